"""Training loops: best-on-validation selection, sequence datasets, determinism."""

import numpy as np
import pytest

from conftest import SMALL_CONFIG, tiny_task
from morpheusnet.model import build_morpheus
from morpheusnet.training import (
    PhaseConfig,
    TrainConfig,
    cnn_accuracy,
    make_sequence_dataset,
    train_cnn,
    train_sequence_learner,
    write_history_csv,
)


class TestTrainCnn:
    def test_learns_tiny_task(self, small_trained, tiny_data):
        model, history = small_trained
        _, val = tiny_data
        acc = cnn_accuracy(model, val[0], val[1])
        assert acc >= 0.8
        assert history[-1].train_loss < history[0].train_loss

    def test_returns_best_validation_checkpoint(self, small_trained, tiny_data):
        model, history = small_trained
        _, val = tiny_data
        best = max(h.val_accuracy for h in history)
        returned = cnn_accuracy(model, val[0], val[1])
        assert returned == pytest.approx(best, abs=1e-9)
        assert returned >= history[-1].val_accuracy

    def test_empty_sets_rejected(self):
        model = build_morpheus(SMALL_CONFIG, seed=0)
        empty = (np.zeros((0, 1, 256), dtype=np.float32), np.zeros(0, dtype=np.int64))
        data = tiny_task(np.random.default_rng(0), 8)
        cfg = TrainConfig()
        with pytest.raises(ValueError):
            train_cnn(model, empty, data, cfg)
        with pytest.raises(ValueError):
            train_cnn(model, data, empty, cfg)

    def test_deterministic_under_seed(self):
        def run():
            rng = np.random.default_rng(5)
            train = tiny_task(rng, 64)
            val = tiny_task(rng, 32)
            model = build_morpheus(SMALL_CONFIG, seed=3)
            cfg = TrainConfig(cnn=PhaseConfig(0.001, 32, 2), seed=9)
            model, history = train_cnn(model, train, val, cfg)
            return np.concatenate([t.data.ravel() for t in model.cnn_parameters()])

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()

    def test_history_csv(self, small_trained, tmp_path):
        _, history = small_trained
        path = tmp_path / "hist.csv"
        write_history_csv(path, history)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_accuracy"
        assert len(lines) == len(history) + 1


class TestSequenceDataset:
    def _model(self):
        return build_morpheus(SMALL_CONFIG, seed=0)

    def test_window_count(self):
        model = self._model()
        epochs = np.zeros((20, 1, 256), dtype=np.float32)
        labels = np.arange(20) % 5
        xs, ys = make_sequence_dataset(model, [(epochs, labels)])
        assert len(xs) == 20 - 12 + 1 == 9
        assert xs.shape[1:] == (12, 5)

    def test_short_recording_yields_nothing(self):
        model = self._model()
        epochs = np.zeros((11, 1, 256), dtype=np.float32)
        xs, ys = make_sequence_dataset(model, [(epochs, np.zeros(11, dtype=int))])
        assert len(xs) == 0

    def test_label_is_last_epoch(self):
        model = self._model()
        epochs = np.zeros((15, 1, 256), dtype=np.float32)
        labels = np.arange(15) % 5
        _, ys = make_sequence_dataset(model, [(epochs, labels)])
        np.testing.assert_array_equal(ys, labels[11:])

    def test_windows_do_not_cross_recordings(self):
        model = self._model()
        a = (np.zeros((12, 1, 256), dtype=np.float32), np.zeros(12, dtype=int))
        b = (np.zeros((13, 1, 256), dtype=np.float32), np.ones(13, dtype=int))
        xs, ys = make_sequence_dataset(model, [a, b])
        assert len(xs) == 1 + 2


class TestSequenceLearner:
    def test_loss_decreases_and_accuracy_reasonable(self):
        # a learnable toy: the label is simply the argmax of the last window row
        rng = np.random.default_rng(11)
        def windows(n):
            x = rng.dirichlet(np.ones(5) * 0.4, size=(n, 12)).astype(np.float32)
            return x, x[:, -1].argmax(axis=1)
        model = build_morpheus(SMALL_CONFIG, seed=2)
        cfg = TrainConfig(seq=PhaseConfig(0.001, 32, 8), seed=2)
        model, history = train_sequence_learner(model, windows(600), windows(200), cfg)
        assert history[-1].train_loss < history[0].train_loss
        assert history[-1].val_accuracy > 0.5

    def test_empty_rejected(self):
        model = build_morpheus(SMALL_CONFIG, seed=0)
        empty = (np.zeros((0, 12, 5), dtype=np.float32), np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            train_sequence_learner(model, empty, empty, TrainConfig())

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(4)
            x = rng.dirichlet(np.ones(5), size=(80, 12)).astype(np.float32)
            y = x[:, -1].argmax(axis=1)
            model = build_morpheus(SMALL_CONFIG, seed=6)
            cfg = TrainConfig(seq=PhaseConfig(0.0001, 32, 2), seed=7)
            model, _ = train_sequence_learner(model, (x, y), (x, y), cfg)
            return np.concatenate([t.data.ravel() for t in model.seq_parameters()])

        assert run().tobytes() == run().tobytes()
