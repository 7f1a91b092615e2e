"""Shared fixtures: a small trained model and its quantized artifacts."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from morpheusnet.model import LayerSpec, MorpheusConfig, build_morpheus
from morpheusnet.quantize import calibrate_ranges, default_plan, fold_cnn, qat_finetune_cnn
from morpheusnet.training import PhaseConfig, TrainConfig, train_cnn

SMALL_CONFIG = MorpheusConfig(
    input_len=256,
    layers=(
        LayerSpec("start", filters=4, kernel=8, pool_kind="max", pool_size=4),
        LayerSpec("conv_block", filters=8, kernel=4),
        LayerSpec("pool", pool_kind="avg", pool_size=4),
        LayerSpec("identity_block", filters=8, kernel=4),
    ),
)


def tiny_task(rng, n, length=256):
    """Five classes, each a distinct tone plus noise; easy to learn quickly."""
    freqs = [3.0, 7.0, 12.0, 18.0, 25.0]
    y = rng.integers(0, 5, n)
    t = np.arange(length) / 100.0
    x = rng.normal(0, 0.4, (n, 1, length))
    for i in range(n):
        x[i, 0] += 1.5 * np.sin(2 * np.pi * freqs[y[i]] * t + rng.uniform(0, 2 * np.pi))
    return x.astype(np.float32), y


@pytest.fixture(scope="session")
def tiny_data():
    rng = np.random.default_rng(100)
    x_train, y_train = tiny_task(rng, 400)
    x_val, y_val = tiny_task(rng, 120)
    return (x_train, y_train), (x_val, y_val)


@pytest.fixture(scope="session")
def small_trained(tiny_data):
    """A small CNN trained enough that activations and accuracy are meaningful."""
    train, val = tiny_data
    model = build_morpheus(SMALL_CONFIG, seed=1)
    cfg = TrainConfig(cnn=PhaseConfig(0.003, 64, 20), seed=1)
    model, history = train_cnn(model, train, val, cfg)
    return model, history


@pytest.fixture(scope="session")
def small_quantized(small_trained, tiny_data):
    """Folded, calibrated, fine-tuned and frozen variant of the small model."""
    import copy

    train, val = tiny_data
    model, _ = small_trained
    icnn = fold_cnn(model)
    plan = default_plan(icnn)
    calib = calibrate_ranges(icnn, train[0][:64])
    qcnn, losses = qat_finetune_cnn(copy.deepcopy(icnn), plan, calib, train, val,
                                    seed=1, epochs=2)
    return qcnn, losses, calib
