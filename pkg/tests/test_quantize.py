"""Quantization arithmetic, calibration, plans, fine-tuning, freezing."""

import copy

import numpy as np
import pytest

from morpheusnet.quantize import (
    QuantParams,
    QuantizationPlan,
    activation_qparams,
    apply_requant,
    calibrate_ranges,
    default_plan,
    dequantize,
    exclusion_plan,
    fake_quantize,
    finetune_sequence_on_quantized,
    fold_cnn,
    icnn_forward,
    qat_finetune_cnn,
    quantize_tensor,
    quantized_sequence_dataset,
    requant_multiplier,
    round_half_away,
    validate_plan,
    weight_qparams,
)


class TestQuantizeTensor:
    def test_zero_maps_to_zero_point(self):
        q = quantize_tensor(np.array([0.0]), QuantParams(0.02, 0))
        assert q.values[0] == 0
        q = quantize_tensor(np.array([0.0]), QuantParams(0.02, -7))
        assert q.values[0] == -7

    def test_saturation(self):
        qp = QuantParams(0.01, 0)
        q = quantize_tensor(np.array([1.27, 2.0, -5.0]), qp)
        assert q.values.tolist() == [127, 127, -128]

    def test_round_trip_bound(self):
        rng = np.random.default_rng(0)
        qp = QuantParams(0.05, 3)
        lo, hi = (-128 - 3) * 0.05, (127 - 3) * 0.05
        x = rng.uniform(lo, hi, 500)
        back = dequantize(quantize_tensor(x, qp))
        assert np.max(np.abs(x - back)) <= qp.scale / 2 + 1e-7

    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, -2.5])),
                                      [1.0, -1.0, 2.0, -3.0])


class TestQparams:
    def test_weight_scale_from_max_abs(self):
        qp = weight_qparams(np.array([0.3, -1.27, 0.9]))
        assert qp.scale == pytest.approx(0.01)
        assert qp.zero_point == 0

    def test_activation_range_example(self):
        # derived from (max - min) / 255 with an unsigned range
        qp, floored = activation_qparams(0.0, 2.54)
        assert qp.scale == pytest.approx(2.54 / 255)
        assert qp.zero_point == -128
        assert not floored

    def test_degenerate_range_floored(self):
        qp, floored = activation_qparams(0.0, 0.0)
        assert floored
        assert qp.scale > 0


class TestFakeQuantize:
    def test_in_range_close_to_identity(self):
        rng = np.random.default_rng(1)
        qp = QuantParams(0.1, 0)
        x = rng.uniform(-10, 10, 200)
        y = fake_quantize(x, qp)
        assert np.max(np.abs(y - x)) <= qp.scale / 2 + 1e-9

    def test_ste_passes_gradient_in_range(self):
        qp = QuantParams(0.1, 0)
        x = np.array([0.5, -3.0])
        _, back = fake_quantize(x, qp, want_grads=True)
        np.testing.assert_array_equal(back(np.array([2.0, 3.0])), [2.0, 3.0])

    def test_ste_zeroes_gradient_when_saturated(self):
        qp = QuantParams(0.1, 0)
        x = np.array([50.0, -50.0, 1.0])
        _, back = fake_quantize(x, qp, want_grads=True)
        np.testing.assert_array_equal(back(np.ones(3)), [0.0, 0.0, 1.0])


class TestRequantMultiplier:
    def test_half_is_exact(self):
        rm = requant_multiplier(0.5, 1.0, 1.0)
        assert rm.multiplier == 2**30
        assert rm.value == 0.5

    def test_one_is_exact(self):
        rm = requant_multiplier(1.0, 1.0, 1.0)
        assert rm.value == 1.0

    def test_normalized_range(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            s = rng.uniform(1e-6, 10, 3)
            rm = requant_multiplier(*s)
            assert 2**30 <= rm.multiplier < 2**31

    def test_million_random_ratios_within_2e_minus_30(self):
        rng = np.random.default_rng(3)
        scales = rng.uniform(1e-5, 100, (1_000_000, 3))
        ratios = scales[:, 0] * scales[:, 1] / scales[:, 2]
        mant, expo = np.frexp(ratios)
        mult = np.floor(mant * 2.0**31 + 0.5)
        carry = mult == 2**31
        mult[carry] //= 2
        expo[carry] += 1
        rebuilt = mult * np.exp2(expo.astype(np.float64) - 31)
        rel = np.abs(rebuilt - ratios) / ratios
        assert rel.max() <= 2.0**-30
        # spot-check the vectorized oracle against the implementation
        for i in rng.integers(0, len(ratios), 50):
            rm = requant_multiplier(*scales[i])
            assert rm.multiplier == int(mult[i]) and rm.shift == int(expo[i])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            requant_multiplier(2.0**20, 2.0**20, 1e-9)
        with pytest.raises(ValueError):
            requant_multiplier(0.0, 1.0, 1.0)

    def test_apply_requant_matches_float(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            ratio_scales = rng.uniform(1e-4, 4, 3)
            rm = requant_multiplier(*ratio_scales)
            acc = rng.integers(-2**24, 2**24, 64)
            got = apply_requant(acc, rm)
            expect = round_half_away(acc * rm.value)
            np.testing.assert_array_equal(got, expect)


class TestPlans:
    def test_plan_text_round_trip(self):
        plan = QuantizationPlan({"start0": True, "conv1": False, "head": True}, 128)
        again = QuantizationPlan.from_text(plan.to_text())
        assert again.flags == plan.flags
        assert again.calibration_samples == 128

    def test_exclusion_plan_marks_start_and_identity(self, small_trained):
        model, _ = small_trained
        icnn = fold_cnn(model)
        plan = exclusion_plan(icnn)
        assert plan.flags == {"start0": False, "conv1": True, "identity3": False,
                              "head": True}

    def test_validate_rejects_partial_plans(self, small_trained):
        model, _ = small_trained
        icnn = fold_cnn(model)
        with pytest.raises(ValueError):
            validate_plan(QuantizationPlan({"start0": True}), icnn)


class TestFoldAndCalibrate:
    def test_folded_matches_inference_model(self, small_trained):
        model, _ = small_trained
        icnn = fold_cnn(model)
        x = np.random.default_rng(5).normal(size=(8, 1, 256)).astype(np.float32)
        a = model.cnn_logits(x, mode="infer")
        b = icnn_forward(icnn, x)
        assert np.max(np.abs(a - b)) < 1e-3

    def test_calibration_covers_all_activation_points(self, small_trained, tiny_data):
        model, _ = small_trained
        icnn = fold_cnn(model)
        calib = calibrate_ranges(icnn, tiny_data[0][0][:32])
        assert set(calib.act_qparams) == {
            "input", "start0.out", "conv1.dw", "conv1.out",
            "identity3.dw", "identity3.out",
        }
        for name, qp in calib.act_qparams.items():
            assert qp.scale > 0

    def test_calibration_needs_samples(self, small_trained):
        model, _ = small_trained
        with pytest.raises(ValueError):
            calibrate_ranges(fold_cnn(model), np.zeros((0, 1, 256), dtype=np.float32))

    def test_report_rows_schema(self, small_quantized):
        _, _, calib = small_quantized
        rows = calib.report_rows()
        assert all(len(r) == 5 for r in rows)


class TestQatFinetune:
    def test_runs_requested_epochs(self, small_quantized):
        _, losses, _ = small_quantized
        assert len(losses) == 2  # fixture fine-tunes for exactly 2 epochs

    def test_five_epochs_by_default(self, small_trained, tiny_data):
        model, _ = small_trained
        train, val = tiny_data
        icnn = fold_cnn(model)
        calib = calibrate_ranges(icnn, train[0][:32])
        small_train = (train[0][:96], train[1][:96])
        _, losses = qat_finetune_cnn(copy.deepcopy(icnn), default_plan(icnn), calib,
                                     small_train, val, seed=0)
        assert len(losses) == 5

    def test_excluded_layers_bitwise_frozen(self, small_trained, tiny_data):
        model, _ = small_trained
        train, val = tiny_data
        icnn = fold_cnn(model)
        plan = exclusion_plan(icnn)
        calib = calibrate_ranges(icnn, train[0][:32])
        work = copy.deepcopy(icnn)
        before = {name: [t.data.copy() for _, t in pairs]
                  for name, pairs in work.named_weight_tensors().items()
                  if not plan.flags[name]}
        qcnn, _ = qat_finetune_cnn(work, plan, calib,
                                   (train[0][:96], train[1][:96]), val, seed=0, epochs=2)
        for name, pairs in qcnn.icnn.named_weight_tensors().items():
            if name in before:
                for (_, t), orig in zip(pairs, before[name]):
                    assert t.data.tobytes() == orig.tobytes()
        # and nothing got frozen to int8 for those layers
        assert not any(k.startswith(("start0", "identity3")) for k in qcnn.weight_q)

    def test_frozen_weights_are_int8(self, small_quantized):
        qcnn, _, _ = small_quantized
        for qt in qcnn.weight_q.values():
            assert qt.values.dtype == np.int8
        for b in qcnn.bias_q.values():
            assert b.dtype == np.int32

    def test_sequence_learner_never_quantized(self, small_quantized):
        qcnn, _, _ = small_quantized
        assert not any(k.startswith("seq") for k in qcnn.weight_q)
        assert not any(k.startswith("seq") for k in qcnn.bias_q)


class TestSequenceFinetune:
    def test_uses_quantized_cnn_outputs(self, small_quantized, small_trained):
        qcnn, _, _ = small_quantized
        model, _ = small_trained
        rng = np.random.default_rng(7)
        epochs = rng.normal(size=(15, 1, 256)).astype(np.float32)
        labels = rng.integers(0, 5, 15)
        xs, _ = quantized_sequence_dataset(qcnn, [(epochs, labels)])
        expect = qcnn.simulate_probs(epochs)
        np.testing.assert_allclose(xs[0], expect[:12], atol=1e-6)
        float_probs = model.cnn_probs(epochs)
        assert not np.allclose(xs[0], float_probs[:12], atol=1e-6)

    def test_hyperparameters_recorded(self, small_quantized, small_trained):
        qcnn, _, _ = small_quantized
        model, _ = small_trained
        rng = np.random.default_rng(8)
        rec = [(rng.normal(size=(20, 1, 256)).astype(np.float32), rng.integers(0, 5, 20))]
        _, record = finetune_sequence_on_quantized(copy.deepcopy(model), qcnn, rec, rec,
                                                   seed=0)
        assert (record["batch_size"], record["lr"], record["epochs"]) == (32, 0.001, 5)

    def test_deterministic(self, small_quantized, small_trained):
        qcnn, _, _ = small_quantized
        model, _ = small_trained
        rng = np.random.default_rng(9)
        rec = [(rng.normal(size=(16, 1, 256)).astype(np.float32), rng.integers(0, 5, 16))]

        def run():
            m, _ = finetune_sequence_on_quantized(copy.deepcopy(model), qcnn, rec, rec,
                                                  seed=3)
            return np.concatenate([t.data.ravel() for t in m.seq_parameters()])

        assert run().tobytes() == run().tobytes()
