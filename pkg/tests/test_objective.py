"""Tests for embedding distances and the contrastive pair loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sddi import tensor as T
from sddi.objective import ContrastiveConfig, DistanceKind, contrastive_loss, distance
from sddi.tensor import ShapeError, Tensor, backward, grad_check

GRAD_TOL = 1e-4

ALL_KINDS = list(DistanceKind)


def vec(*values):
    return Tensor(np.array(values, dtype=np.float32))


class TestDistanceOracles:
    def test_identical_inputs(self):
        e = vec(0.3, 1.2, 0.5)
        assert distance(DistanceKind.EUCLIDEAN, e, e).item() == 0.0
        assert distance(DistanceKind.MANHATTAN, e, e).item() == 0.0
        assert distance(DistanceKind.HELLINGER, e, e).item() == 0.0
        np.testing.assert_allclose(
            distance(DistanceKind.JACCARD, e, e).item(), 1.0, rtol=1e-6
        )

    def test_manhattan_unit_basis(self):
        # |1-0| + |0-1| = 2
        d = distance(DistanceKind.MANHATTAN, vec(1.0, 0.0), vec(0.0, 1.0))
        np.testing.assert_allclose(d.item(), 2.0, rtol=1e-6)

    def test_euclidean_unit_basis(self):
        d = distance(DistanceKind.EUCLIDEAN, vec(1.0, 0.0), vec(0.0, 1.0))
        np.testing.assert_allclose(d.item(), np.sqrt(2.0), rtol=1e-6)

    def test_hellinger_disjoint_support(self):
        # Normalized vectors become [2,0] and [0,2]; sum of squared sqrt
        # differences is 4, so the distance is sqrt(8).
        d = distance(DistanceKind.HELLINGER, vec(1.0, 0.0), vec(0.0, 1.0))
        np.testing.assert_allclose(d.item(), np.sqrt(8.0), rtol=1e-5)

    def test_jaccard_hand_value(self):
        # Means are both 1, so p1=[2,0,1], p2=[1,1,1]; min-sum 2, max-sum 4.
        d = distance(DistanceKind.JACCARD, vec(2.0, 0.0, 1.0), vec(1.0, 1.0, 1.0))
        np.testing.assert_allclose(d.item(), 0.5, rtol=1e-6)

    def test_negative_components_clamped(self):
        # [-1, 2] clamps to [0, 2]; matches distance from [0, 2] exactly.
        a, b = vec(-1.0, 2.0), vec(0.5, 0.5)
        for kind in (DistanceKind.HELLINGER, DistanceKind.JACCARD):
            np.testing.assert_allclose(
                distance(kind, a, b).item(),
                distance(kind, vec(0.0, 2.0), b).item(),
                rtol=1e-6,
            )

    def test_all_zero_embedding_never_nan(self):
        z = vec(0.0, 0.0, 0.0)
        e = vec(1.0, 2.0, 3.0)
        for kind in (DistanceKind.HELLINGER, DistanceKind.JACCARD):
            assert np.isfinite(distance(kind, z, e).item())
            assert np.isfinite(distance(kind, z, z).item())

    def test_batched_matches_per_row(self):
        r = np.random.default_rng(0)
        a = r.standard_normal((5, 8)).astype(np.float32)
        b = r.standard_normal((5, 8)).astype(np.float32)
        for kind in ALL_KINDS:
            batch = distance(kind, Tensor(a), Tensor(b)).data
            rows = [distance(kind, Tensor(a[i]), Tensor(b[i])).item() for i in range(5)]
            np.testing.assert_allclose(batch, rows, rtol=1e-5)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            distance(DistanceKind.EUCLIDEAN, vec(1.0, 2.0), vec(1.0, 2.0, 3.0))

    def test_accepts_string_kind(self):
        d = distance("manhattan", vec(1.0, 0.0), vec(0.0, 1.0))
        np.testing.assert_allclose(d.item(), 2.0)


class TestDistanceProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry_exact(self, seed):
        r = np.random.default_rng(seed)
        a = Tensor(r.standard_normal(6).astype(np.float32))
        b = Tensor(r.standard_normal(6).astype(np.float32))
        for kind in ALL_KINDS:
            assert distance(kind, a, b).item() == distance(kind, b, a).item()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_triangle_inequality(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (Tensor(r.standard_normal(6).astype(np.float32)) for _ in range(3))
        for kind in (DistanceKind.EUCLIDEAN, DistanceKind.MANHATTAN):
            ab = distance(kind, a, b).item()
            bc = distance(kind, b, c).item()
            ac = distance(kind, a, c).item()
            assert ac <= ab + bc + 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        a = Tensor(r.standard_normal(6).astype(np.float32))
        b = Tensor(r.standard_normal(6).astype(np.float32))
        for kind in ALL_KINDS:
            assert distance(kind, a, b).item() >= 0.0


# Hand-computed (label, distance, margin) -> loss table, including both
# zero cases and the hinge boundary distance == margin.
LOSS_TABLE = [
    (0, 0.0, 1.0, 0.0),
    (1, 1.5, 1.0, 0.0),
    (1, 1.0, 1.0, 0.0),
    (1, 0.5, 1.0, 0.125),
    (0, 0.5, 1.0, 0.125),
    (0, 2.0, 1.0, 2.0),
    (1, 0.0, 1.0, 0.5),
    (1, 0.0, 2.0, 2.0),
    (0, 1.0, 0.5, 0.5),
    (1, 0.25, 0.5, 0.03125),
    (1, 0.75, 0.5, 0.0),
    (0, 3.0, 2.0, 4.5),
]


class TestContrastiveLoss:
    @pytest.mark.parametrize("label,dist,margin,expected", LOSS_TABLE)
    def test_hand_computed_table(self, label, dist, margin, expected):
        cfg = ContrastiveConfig(margin=margin)
        loss = contrastive_loss(cfg, Tensor([dist]), Tensor([float(label)]))
        np.testing.assert_allclose(loss.item(), expected, atol=1e-6)

    def test_batch_mean_reduction(self):
        cfg = ContrastiveConfig(margin=1.0)
        rows = [r for r in LOSS_TABLE if r[2] == 1.0]
        d = Tensor([r[1] for r in rows])
        y = Tensor([float(r[0]) for r in rows])
        expected = np.mean([r[3] for r in rows])
        np.testing.assert_allclose(contrastive_loss(cfg, d, y).item(), expected, atol=1e-6)

    def test_rejects_non_binary_labels(self):
        cfg = ContrastiveConfig()
        with pytest.raises(ValueError):
            contrastive_loss(cfg, Tensor([1.0]), Tensor([0.5]))

    def test_rejects_negative_margin(self):
        with pytest.raises(ValueError):
            ContrastiveConfig(margin=-0.1)

    def test_gradient_zero_beyond_margin(self):
        cfg = ContrastiveConfig(margin=1.0)
        d = Tensor(np.array([1.0, 1.7, 2.5]), requires_grad=True)
        y = Tensor([1.0, 1.0, 1.0])
        backward(contrastive_loss(cfg, d, y))
        np.testing.assert_allclose(d.grad, np.zeros(3))

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.floats(0, 5), min_size=1, max_size=8),
        st.integers(0, 10_000),
    )
    def test_loss_nonnegative(self, dists, seed):
        r = np.random.default_rng(seed)
        y = r.integers(0, 2, size=len(dists)).astype(np.float32)
        cfg = ContrastiveConfig(margin=1.0)
        loss = contrastive_loss(cfg, Tensor(np.array(dists, dtype=np.float32)), Tensor(y))
        assert loss.item() >= 0.0

    def test_monotone_increasing_for_label_zero(self):
        cfg = ContrastiveConfig(margin=1.0)
        grid = np.linspace(0.1, 3.0, 12)
        losses = [
            contrastive_loss(cfg, Tensor([d]), Tensor([0.0])).item() for d in grid
        ]
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_monotone_decreasing_for_label_one_inside_margin(self):
        cfg = ContrastiveConfig(margin=1.0)
        grid = np.linspace(0.0, 0.95, 12)
        losses = [
            contrastive_loss(cfg, Tensor([d]), Tensor([1.0])).item() for d in grid
        ]
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestGradientsThroughDistances:
    """Finite-difference checks of loss(distance(e1, e2)) w.r.t. e1.

    Inputs are kept away from the kink points of the piecewise-defined
    metrics (componentwise ties, relu boundary at zero).
    """

    def separated_pair(self, kind, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal(6)
        b = r.standard_normal(6)
        if kind in (DistanceKind.HELLINGER, DistanceKind.JACCARD):
            # Stay off the relu kink and keep normalizers healthy.
            a = np.abs(a) + 0.1
            b = np.abs(b) + 0.1
        # Push component pairs apart so |a-b| ties cannot straddle the
        # finite-difference step.
        gap = a - b
        b = np.where(np.abs(gap) < 1e-2, b - np.sign(gap + 0.5) * 2e-2, b)
        return a, b

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("label", [0.0, 1.0])
    def test_loss_gradient_matches_finite_differences(self, kind, label):
        cfg = ContrastiveConfig(margin=1.0, metric=kind)
        for seed in range(5):
            a, b = self.separated_pair(kind, seed)
            fixed = Tensor(b)

            def f(t):
                d = distance(kind, t, fixed).reshape(1)
                return contrastive_loss(cfg, d, Tensor([label]))

            err = grad_check(f, Tensor(a), eps=1e-5)
            assert err <= GRAD_TOL, f"{kind} label={label} seed={seed}: {err}"

    def test_loss_through_toy_tower(self):
        # End-to-end gradient through two shared dense layers and the loss.
        r = np.random.default_rng(42)
        w1 = Tensor(r.standard_normal((5, 4)) * 0.5)
        b1 = Tensor(r.standard_normal(5) * 0.1)
        w2 = Tensor(r.standard_normal((3, 5)) * 0.5)
        b2 = Tensor(r.standard_normal(3) * 0.1)
        x1 = Tensor(r.standard_normal((2, 4)))
        x2 = Tensor(r.standard_normal((2, 4)))
        y = Tensor([1.0, 0.0])
        cfg = ContrastiveConfig(margin=1.0)

        def f(wt):
            def tower(x):
                h = T.relu(T.dense(x, wt, b1))
                return T.dense(h, w2, b2)

            d = distance(DistanceKind.EUCLIDEAN, tower(x1), tower(x2))
            return contrastive_loss(cfg, d, y)

        err = grad_check(f, w1, eps=1e-5)
        assert err <= GRAD_TOL, f"toy tower gradient error {err}"
