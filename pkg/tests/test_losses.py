import numpy as np
import pytest

from modalpanoptic.losses import (
    LossValue,
    bce_loss,
    focal_loss,
    l1_loss,
    masked_cross_entropy,
    total_loss,
)

from oracles import fd_gradient, focal_sum, rel_err, softmax_ce


class TestFocalLoss:
    def test_near_perfect_prediction(self):
        target = np.zeros((5, 5))
        target[2, 2] = 1.0
        pred = np.where(target == 1.0, 1.0 - 1e-6, 1e-6)
        assert focal_loss(pred, target).value < 1e-4

    def test_matches_direct_sum(self):
        target = np.zeros((4, 4))
        target[1, 2] = 1.0
        pred = np.full((4, 4), 0.5)
        got = focal_loss(pred, target).value
        want = focal_sum(pred, target)
        assert abs(got - want) < 1e-12

    def test_matches_direct_sum_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            target = rng.uniform(0, 1, size=(6, 6))
            target[rng.integers(6), rng.integers(6)] = 1.0
            pred = rng.uniform(0.05, 0.95, size=(6, 6))
            assert abs(focal_loss(pred, target).value - focal_sum(pred, target)) < 1e-10

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            target = rng.uniform(0, 0.9, size=(8, 8))
            target[tuple(rng.integers(8, size=2))] = 1.0
            pred = rng.uniform(0.1, 0.9, size=(8, 8))
            grad = focal_loss(pred, target).gradient
            fd = fd_gradient(lambda p: focal_loss(p, target).value, pred.copy())
            assert rel_err(grad, fd, floor=1e-6) < 1e-4

    def test_no_peaks_uses_floor(self):
        target = np.zeros((3, 3))
        pred = np.full((3, 3), 0.2)
        value = focal_loss(pred, target).value
        assert np.isfinite(value) and value > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss(np.zeros((2, 2)), np.zeros(4))


class TestMaskedCrossEntropy:
    def test_aligned_one_hot(self):
        target = np.array([1, 2, 3])
        logits = np.full((3, 4), 0.0)
        logits[np.arange(3), target] = 20.0
        out = masked_cross_entropy(logits, target)
        assert out.value < 1e-8

    def test_uniform_is_log_k(self):
        logits = np.zeros((6, 4))
        target = np.array([1, 2, 3, 1, 2, 3])
        out = masked_cross_entropy(logits, target)
        assert abs(out.value - np.log(4)) < 1e-12

    def test_matches_explicit_softmax(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(40, 5))
        target = rng.integers(0, 5, size=40)
        mask = rng.uniform(size=40) > 0.3
        got = masked_cross_entropy(logits, target, mask)
        want, n = softmax_ce(logits, target, mask)
        assert abs(got.value - want) < 1e-10
        assert got.count == n

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(12, 4))
        target = rng.integers(0, 4, size=12)
        mask = rng.uniform(size=12) > 0.25
        grad = masked_cross_entropy(logits, target, mask).gradient
        fd = fd_gradient(lambda z: masked_cross_entropy(z, target, mask).value, logits.copy())
        assert rel_err(grad, fd, floor=1e-6) < 1e-4

    def test_masked_out_voxels_have_zero_gradient(self):
        logits = np.random.default_rng(4).normal(size=(6, 3))
        target = np.array([1, 2, 0, 1, 2, 1])
        mask = np.array([True, False, True, True, False, True])
        grad = masked_cross_entropy(logits, target, mask).gradient
        assert np.all(grad[1] == 0) and np.all(grad[4] == 0)
        assert np.all(grad[2] == 0)  # ignore class

    def test_everything_masked_flagged(self):
        out = masked_cross_entropy(np.zeros((3, 2)), np.array([1, 1, 1]),
                                   np.zeros(3, dtype=bool))
        assert out.value == 0.0
        assert out.count == 0


class TestL1Loss:
    def test_exact_match(self):
        x = np.array([1.0, -2.0, 3.0])
        out = l1_loss(x, x)
        assert out.value == 0.0
        assert np.all(out.gradient == 0.0)

    def test_mean_of_abs(self):
        out = l1_loss(np.array([1.0, -3.0]), np.zeros(2))
        assert out.value == 2.0

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        pred = rng.normal(size=(7, 3))
        target = rng.normal(size=(7, 3))
        want = sum(abs(float(a - b)) for a, b in zip(pred.ravel(), target.ravel())) / pred.size
        assert abs(l1_loss(pred, target).value - want) < 1e-12

    def test_masked_mean(self):
        pred = np.array([[1.0, 1.0], [5.0, 5.0]])
        target = np.zeros((2, 2))
        mask = np.array([True, False])
        assert l1_loss(pred, target, mask).value == 1.0

    def test_gradient_off_kink(self):
        rng = np.random.default_rng(6)
        pred = rng.normal(size=(5, 2))
        target = pred + np.where(rng.uniform(size=(5, 2)) > 0.5, 1.0, -1.0) * rng.uniform(0.5, 2, (5, 2))
        grad = l1_loss(pred, target).gradient
        fd = fd_gradient(lambda p: l1_loss(p, target).value, pred.copy())
        assert rel_err(grad, fd, floor=1e-6) < 1e-4

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            l1_loss(np.ones(3), np.ones(3), np.zeros(3, dtype=bool))


class TestBceLoss:
    def test_confident_correct(self):
        pred = np.full(10, 1.0 - 1e-6)
        assert bce_loss(pred, np.ones(10)).value < 1e-5

    def test_uniform_is_log_two(self):
        pred = np.full(8, 0.5)
        target = np.array([0, 1, 0, 1, 1, 0, 1, 0], dtype=float)
        assert abs(bce_loss(pred, target).value - np.log(2)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            pred = rng.uniform(0.05, 0.95, size=30)
            target = rng.integers(0, 2, size=30).astype(float)
            grad = bce_loss(pred, target).gradient
            fd = fd_gradient(lambda p: bce_loss(p, target).value, pred.copy())
            assert rel_err(grad, fd, floor=1e-6) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(np.ones(3), np.ones(4))


class TestTotalLoss:
    def test_plain_sum(self):
        assert total_loss({"det": 1.0, "seg": 2.0, "mem": 3.0, "track": 4.0}) == 10.0

    def test_single_scan_mode(self):
        assert total_loss({"det": 1.0, "seg": 2.0, "mem": 3.0}) == 6.0

    def test_random_parts(self):
        rng = np.random.default_rng(8)
        parts = {k: float(rng.uniform(0, 5)) for k in ("det", "seg", "mem", "track")}
        assert abs(total_loss(parts) - sum(parts.values())) < 1e-12

    def test_weights(self):
        parts = {"det": 1.0, "seg": 1.0, "mem": 1.0, "track": 1.0}
        assert total_loss(parts, weights={"det": 2.0}) == 5.0

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            total_loss({"det": float("nan"), "seg": 0.0, "mem": 0.0})


class TestLossValueInvariants:
    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            pred = rng.uniform(0.01, 0.99, size=100)
            target = rng.integers(0, 2, size=100).astype(float)
            assert bce_loss(pred, target).value >= 0.0
            assert l1_loss(pred, target).value >= 0.0

    def test_gradient_finiteness_enforced(self):
        with pytest.raises(ValueError):
            LossValue(float("inf"), np.zeros(1))
