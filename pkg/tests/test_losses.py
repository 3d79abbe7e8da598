import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from freeedit import tensor as T
from freeedit.losses import (LossWeights, PointPairSet, TrainingAbort, consistency_loss, entropy_loss, jsd,
                             jsd_logits, nearest_point_pairs, photometric_loss, self_view_loss, total_loss)
from freeedit.tensor import Tensor

LN2 = math.log(2.0)


def simplex(seed, n, size=()):
    x = np.random.default_rng(seed).random(size + (n,)) + 1e-3
    return x / x.sum(axis=-1, keepdims=True)


def jsd_by_hand(p, q):
    total = 0.0
    for a, b in zip(p, q):
        m = 0.5 * (a + b)
        if a > 0:
            total += 0.5 * a * math.log(a / m)
        if b > 0:
            total += 0.5 * b * math.log(b / m)
    return total


class TestPhotometric:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).random((5, 3)).astype(np.float32)
        assert photometric_loss(Tensor(gt), gt, np.ones(5, bool)).item() == 0.0

    def test_constant_offset(self):
        gt = np.random.default_rng(1).random((4, 3)) * 0.8
        pred = gt + np.array([0.1, 0.0, 0.0])
        with T.precision(64):
            loss = photometric_loss(Tensor(pred), gt, np.ones(4, bool)).item()
        assert loss == pytest.approx(0.01, abs=1e-12)

    def test_invalid_rays_are_ignored(self):
        gt = np.zeros((3, 3))
        pred = np.full((3, 3), 0.2)
        valid = np.array([True, False, True])
        a = photometric_loss(Tensor(pred), gt, valid).item()
        pred[1] = 1.0
        assert photometric_loss(Tensor(pred), gt, valid).item() == a

    def test_needs_a_valid_ray(self):
        with pytest.raises(T.ContractError):
            photometric_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.zeros(2, bool))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            photometric_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 3)), np.ones(2, bool))


class TestNearestPairs:
    def test_identical_rays(self):
        pts = np.random.default_rng(0).normal(size=(6, 3))
        pairs = nearest_point_pairs(pts, pts)
        np.testing.assert_array_equal(pairs.index, np.arange(6))
        np.testing.assert_array_equal(pairs.distance, 0.0)
        np.testing.assert_allclose(pairs.weights, 1 / 6)

    def test_parallel_offset(self):
        depths = np.linspace(1, 4, 5)[:, None]
        a = depths * np.array([0.0, 0.0, 1.0])
        b = a + np.array([1e-3, 0.0, 0.0])
        pairs = nearest_point_pairs(a, b)
        np.testing.assert_allclose(pairs.distance, 1e-3)
        np.testing.assert_allclose(pairs.weights, 0.2)

    def test_ties_go_to_lower_index(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        assert nearest_point_pairs(a, b).index[0] == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        pairs = nearest_point_pairs(a, b)
        for i in range(8):
            dists = [np.linalg.norm(a[i] - b[j]) for j in range(8)]
            assert pairs.index[i] == int(np.argmin(dists))
            assert pairs.distance[i] == pytest.approx(min(dists))
        w = np.exp(-pairs.distance)
        np.testing.assert_allclose(pairs.weights, w / w.sum(), rtol=1e-12)
        assert pairs.weights.sum() == pytest.approx(1.0, abs=1e-6)


class TestJsd:
    def test_identical(self):
        p = simplex(0, 7)
        assert jsd(p, p) == 0.0

    def test_disjoint(self):
        assert abs(jsd([1.0, 0.0], [0.0, 1.0]) - LN2) < 1e-9

    def test_hand_value(self):
        p, q = [0.2, 0.5, 0.3], [0.6, 0.1, 0.3]
        assert jsd(p, q) == pytest.approx(jsd_by_hand(p, q), abs=1e-15)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_symmetric_and_bounded(self, seed):
        p, q = simplex(seed, 9), simplex(seed + 1, 9)
        assert abs(jsd(p, q) - jsd(q, p)) < 1e-9
        assert 0.0 <= jsd(p, q) <= LN2

    @pytest.mark.parametrize("p", [[0.5, 0.6], [1.2, -0.2]])
    def test_rejects_non_distributions(self, p):
        with pytest.raises(T.ContractError):
            jsd(p, [0.5, 0.5])

    def test_logit_form_matches(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        with T.precision(64):
            got = jsd_logits(Tensor(a), Tensor(b)).data
        sa = np.exp(a) / np.exp(a).sum(-1, keepdims=True)
        sb = np.exp(b) / np.exp(b).sum(-1, keepdims=True)
        np.testing.assert_allclose(got, [jsd_by_hand(x, y) for x, y in zip(sa, sb)], atol=1e-12)

    def test_logit_form_saturates_at_ln2(self):
        with T.precision(64):
            v = jsd_logits(Tensor(np.array([400.0, 0.0])), Tensor(np.array([0.0, 400.0]))).item()
        assert abs(v - LN2) < 1e-9


class TestConsistency:
    def pairs(self, r=2, p=4):
        idx = np.tile(np.arange(p), (r, 1))
        return PointPairSet(idx, np.zeros((r, p)), np.full((r, p), 1.0 / p))

    def test_identical_features(self):
        f = np.random.default_rng(0).normal(size=(2, 4, 3, 5))
        assert consistency_loss(Tensor(f), Tensor(f), self.pairs()).item() == 0.0

    def test_scaled_twin_is_positive_and_bounded(self):
        f = np.random.default_rng(1).normal(size=(2, 4, 3, 5))
        loss = consistency_loss(Tensor(f), Tensor(2 * f), self.pairs()).item()
        assert 0.0 < loss <= LN2

    def test_uses_partner_index(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(1, 3, 2, 2))
        b = a[:, [2, 0, 1]]
        pairs = PointPairSet(np.array([[1, 2, 0]]), np.zeros((1, 3)), np.full((1, 3), 1 / 3))
        with T.precision(64):
            assert consistency_loss(Tensor(a), Tensor(b), pairs).item() == pytest.approx(0.0, abs=1e-15)

    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(1, 2, 2, 3))
        w = np.array([[0.3, 0.7]])
        pairs = PointPairSet(np.array([[0, 1]]), np.zeros((1, 2)), w)
        with T.precision(64):
            got = consistency_loss(Tensor(a), Tensor(b), pairs).item()
        soft = lambda x: np.exp(x) / np.exp(x).sum()
        expect = sum(w[0, i] * jsd_by_hand(soft(a[0, i].ravel()), soft(b[0, i].ravel())) for i in range(2))
        assert got == pytest.approx(expect, abs=1e-12)


class TestSelfView:
    def test_same_sources_give_exact_zero(self):
        rgb = np.random.default_rng(0).random((6, 3)).astype(np.float32)
        valid = np.ones(6, bool)
        assert self_view_loss(Tensor(rgb), Tensor(rgb.copy()), valid, valid).item() == 0.0

    def test_constant_offset(self):
        a = np.random.default_rng(1).random((5, 3)) * 0.5
        with T.precision(64):
            loss = self_view_loss(Tensor(a), Tensor(a + [0.0, 0.1, 0.0]), np.ones(5, bool), np.ones(5, bool))
        assert loss.item() == pytest.approx(0.01, abs=1e-12)

    def test_gradient_reaches_both_renders(self):
        with T.precision(64):
            a = Tensor(np.array([[0.1, 0.2, 0.3]]), requires_grad=True)
            b = Tensor(np.array([[0.3, 0.2, 0.1]]), requires_grad=True)
            T.backward(self_view_loss(a, b, np.ones(1, bool), np.ones(1, bool)))
        np.testing.assert_allclose(a.grad, [[-0.4, 0.0, 0.4]])
        np.testing.assert_allclose(b.grad, [[0.4, 0.0, -0.4]])

    def test_no_common_valid_ray(self):
        with pytest.raises(T.ContractError):
            self_view_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))),
                           np.array([True, False]), np.array([False, True]))


class TestEntropy:
    def test_zero_weights(self):
        assert entropy_loss(Tensor(np.zeros((3, 8)))).item() == 0.0

    def test_single_half(self):
        with T.precision(64):
            v = entropy_loss(Tensor(np.array([[0.5]]))).item()
        assert abs(v - (-0.5 * math.log(0.5))) < 1e-9

    def test_clamped_at_one(self):
        v = entropy_loss(Tensor(np.array([[1.0]], dtype=np.float64))).item()
        assert math.isfinite(v) and v == pytest.approx(-math.log(1e-6), rel=1e-3)

    @settings(max_examples=30)
    @given(hnp.arrays(np.float64, 6, elements=st.floats(0, 0.98)), st.integers(0, 5), st.floats(1e-3, 0.01))
    def test_monotone(self, w, i, bump):
        with T.precision(64):
            before = entropy_loss(Tensor(w[None])).item()
            w2 = w.copy()
            w2[i] += bump
            after = entropy_loss(Tensor(w2[None])).item()
        assert after > before


class TestTotal:
    def test_zero_parts(self):
        assert total_loss({"mse": 0.0, "con": 0.0, "self": 0.0, "en": 0.0}, LossWeights(), 1000) == 0.0

    def test_default_weights(self):
        parts = {"mse": 1.0, "con": 1.0, "self": 1.0, "en": 1.0}
        assert abs(total_loss(parts, LossWeights(), 10_000) - 1.0016) < 1e-9

    def test_gating_removes_only_consistency(self):
        parts = {"mse": 1.0, "con": 1.0, "self": 1.0, "en": 1.0}
        w = LossWeights(con_start_iter=500)
        assert total_loss(parts, w, 500) - total_loss(parts, w, 499) == pytest.approx(5e-4, abs=1e-15)

    def test_nan_aborts_naming_term(self):
        with pytest.raises(TrainingAbort) as err:
            total_loss({"mse": 1.0, "self": float("nan")}, LossWeights(), 0)
        assert err.value.term == "self"
        assert "self" in str(err.value)

    def test_negative_weight(self):
        with pytest.raises(T.ContractError):
            LossWeights(lambda_s=-1.0)

    def test_gradient_is_weighted_sum(self):
        with T.precision(64):
            x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
            parts = {"mse": (x * x).sum(), "con": x.sum(), "self": (x * 3.0).sum(), "en": (x * x * x).sum()}
            T.backward(total_loss(parts, LossWeights(con_start_iter=0), 1))
        xs = np.array([0.3, 0.7])
        expect = 2 * xs + 5e-4 + 1e-3 * 3 + 1e-4 * 3 * xs ** 2
        np.testing.assert_allclose(x.grad, expect, atol=1e-12)
