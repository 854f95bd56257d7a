import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from octave_unet.autograd import Node, backward
from octave_unet.data.synth import synth_vessels
from octave_unet.errors import ConfigError, DataError, DegenerateDataError, NonFiniteError, ShapeError
from octave_unet.training import (
    LOG_HEADER,
    Adam,
    AdamState,
    LossConfig,
    PlateauSchedule,
    TrainConfig,
    adam_step,
    compute_pos_weight,
    evaluate_model,
    train,
    weighted_bce,
)
from octave_unet.unet import ModelConfig, build

TINY = ModelConfig(depth=2, base_channels=4, alpha=0.5)


def bce(pred, target, **kw):
    return float(weighted_bce(Node(np.asarray(pred, dtype=np.float64)), np.asarray(target, dtype=np.float64),
                              LossConfig(**kw)).value)


class TestWeightedBCE:
    def test_single_pixel_ln2(self):
        assert bce([0.5], [1.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_sum_four_pixels(self):
        p = [0.8, 0.3, 0.6, 0.1]
        y = [1, 1, 0, 0]
        w = 1 / 9
        hand = -(w * math.log(0.8) + w * math.log(0.3) + math.log(0.4) + math.log(0.9))
        assert bce(p, y, w_pos=w, reduction="sum") == pytest.approx(hand, abs=1e-7)
        assert bce(p, y, w_pos=w) == pytest.approx(hand / 4, abs=1e-7)

    def test_perfect_prediction_near_zero(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        eps = 1e-7
        assert 0 <= bce(y, y, reduction="sum", eps=eps) <= 4 * -math.log(1 - eps) + 1e-12

    def test_non_negative(self, rng):
        p = rng.random(50)
        y = (rng.random(50) < 0.5).astype(float)
        assert bce(p, y, w_pos=0.3) >= 0

    def test_clamp_keeps_finite(self):
        assert math.isfinite(bce([0.0, 1.0], [1.0, 0.0]))

    def test_non_binary_target(self):
        with pytest.raises(DataError):
            bce([0.5], [0.5])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce([0.5, 0.5], [1.0])

    def test_gradient(self, rng):
        from octave_unet.autograd import finite_difference_check

        target = (rng.random((1, 1, 3, 3)) < 0.4).astype(np.float64)
        report = finite_difference_check(
            lambda p: weighted_bce(p["p"], target, LossConfig(w_pos=0.2)),
            {"p": rng.uniform(0.1, 0.9, size=(1, 1, 3, 3))})
        assert report.max_error < 1e-5

    @pytest.mark.parametrize("kw", [dict(w_pos=0), dict(eps=0.1), dict(reduction="max"), dict(weight_mode="x")])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw)


class TestPosWeight:
    def test_one_ninth(self):
        t = np.zeros(100)
        t[:10] = 1
        assert compute_pos_weight([t]) == pytest.approx(1 / 9)

    def test_balanced(self):
        assert compute_pos_weight([np.array([0, 1, 0, 1])]) == 1.0

    def test_inverse(self):
        assert compute_pos_weight([np.array([1, 0, 0, 0])], "inverse-ratio") == 3.0

    def test_pooled_over_images(self):
        assert compute_pos_weight([np.array([1, 1]), np.array([0, 0, 0, 0])]) == 0.5

    def test_single_class(self):
        with pytest.raises(DegenerateDataError):
            compute_pos_weight([np.ones(10)])


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
        assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([0.0, 0.0])}
        adam_step(p, {"w": np.array([3.0, -0.02])}, AdamState(), 1e-3)
        assert_allclose(p["w"], [-1e-3, 1e-3], rtol=1e-5)

    def test_three_step_recurrence(self):
        grads = [0.5, -1.5, 2.0]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p, state = {"w": np.array([1.0])}, AdamState()
        for g in grads:
            adam_step(p, {"w": np.array([g])}, state, lr)
        assert abs(p["w"][0] - w) < 1e-10
        assert state.step == 3

    def test_non_finite_names_parameter(self):
        with pytest.raises(NonFiniteError, match="enc.w"):
            adam_step({"enc.w": np.zeros(1)}, {"enc.w": np.array([np.nan])}, AdamState(), 1e-3)

    def test_moments_match_parameter_count(self):
        model = build(TINY, 0)
        opt = Adam(list(model.named_parameters()))
        for p in model.parameters():
            p.grad = np.ones_like(p.value)
        opt.step()
        n = sum(p.value.size for p in model.parameters())
        assert sum(a.size for a in opt.state.m.values()) + sum(a.size for a in opt.state.v.values()) == 2 * n


class TestPlateauSchedule:
    def test_decreasing_keeps_lr(self):
        s = PlateauSchedule()
        for i in range(30):
            s.step(1.0 - 0.01 * i)
        assert s.lr == 1e-3

    def test_ten_flat_epochs(self):
        s = PlateauSchedule()
        s.step(1.0)
        for _ in range(10):
            s.step(1.0)
        assert s.lr == pytest.approx(0.0009, abs=1e-15)

    def test_twenty_flat_epochs(self):
        s = PlateauSchedule()
        s.step(1.0)
        for _ in range(20):
            s.step(1.0)
        assert s.lr == pytest.approx(0.00081, abs=1e-15)

    def test_tiny_improvement_is_not_improvement(self):
        s = PlateauSchedule()
        s.step(1.0)
        for i in range(10):
            s.step(1.0 - 1e-8 * (i + 1))
        assert s.lr < 1e-3

    def test_non_increasing_and_positive(self, rng):
        s = PlateauSchedule()
        lrs = [s.step(float(v)) for v in rng.random(200)]
        assert all(a >= b > 0 for a, b in zip(lrs, lrs[1:]))

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            PlateauSchedule().step(float("nan"))


@pytest.fixture(scope="module")
def data():
    return synth_vessels(4, 32, rng=0), synth_vessels(2, 32, rng=1)


class TestTrainLoop:
    def test_writes_log_and_checkpoints(self, data, tmp_path):
        train_set, val = data
        result = train(build(TINY, 0), train_set, TrainConfig(epochs=2), val_samples=val, out_dir=tmp_path)
        lines = (tmp_path / "train_log.csv").read_text().splitlines()
        assert lines[0] == LOG_HEADER
        assert len(lines) == 3 and lines[1].startswith("1,")
        assert len(lines[1].split(",")) == len(LOG_HEADER.split(","))
        assert (tmp_path / "final.octv").exists() and (tmp_path / "best.octv").exists()
        assert result.best_epoch in (1, 2)

    def test_same_seed_same_losses(self, data):
        a = train(build(TINY, 0), data[0], TrainConfig(epochs=2, seed=5)).losses
        b = train(build(TINY, 0), data[0], TrainConfig(epochs=2, seed=5)).losses
        assert a == b

    def test_loss_decreases(self):
        samples = synth_vessels(8, 32, rng=2)
        losses = train(build(TINY, 0), samples, TrainConfig(epochs=10, seed=0)).losses
        assert losses[9] < losses[0]

    def test_non_finite_loss_aborts(self, data):
        bad = [s.with_(image=np.full_like(s.image, np.nan)) for s in data[0]]
        with pytest.raises(NonFiniteError, match="epoch 1"):
            train(build(TINY, 0), bad, TrainConfig(epochs=1, augment=False))

    def test_empty_set(self):
        with pytest.raises(DataError):
            train(build(TINY, 0), [], TrainConfig(epochs=1))

    def test_manual_mode_requires_weight(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss_weight_mode="manual")

    def test_single_image_overfit(self):
        sample = synth_vessels(1, 64, rng=3)
        model = build(ModelConfig(depth=3, base_channels=8, alpha=0.5), 0)
        train(model, sample, TrainConfig(epochs=200, augment=False, loss_weight_mode="manual", pos_weight=1.0))
        assert evaluate_model(model, sample).metrics["f1"] >= 0.95
