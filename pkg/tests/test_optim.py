"""Tests for the four optimizers: hand-derived update oracles, convergence,
determinism, and the learning-rate line search."""

import numpy as np
import pytest

from sddi.optim import (
    DEFAULT_LR_GRID,
    OptimizerKind,
    OptimizerState,
    line_search_lr,
    step,
)
from sddi.tensor import ShapeError, Tensor

ALL_KINDS = list(OptimizerKind)

# First two iterates of each optimizer on f(w) = w^2 from w = 1 at default
# hyperparameters, transcribed by hand from the published update rules and
# evaluated in float64.
TWO_STEP_ORACLE = {
    OptimizerKind.ADAM: (0.999950000000, 0.999900000066),
    OptimizerKind.RMSPROP: (0.999841886119, 0.999727186846),
    OptimizerKind.ADADELTA: (0.995527875225, 0.991008680275),
    OptimizerKind.NADAM: (0.999905000000, 0.999833685572),
}


def quadratic_steps(kind, n, lr=None, dtype=np.float64):
    """Run n optimizer steps on f(w) = w^2 from w = 1; return the iterates."""
    w = Tensor(np.array([1.0], dtype=dtype))
    state = OptimizerState.create(kind, learning_rate=lr)
    iterates = []
    for _ in range(n):
        step(state, {"w": w}, {"w": 2.0 * w.data})
        iterates.append(float(w.data[0]))
    return iterates


class TestTwoStepOracles:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_matches_hand_derivation(self, kind):
        w1, w2 = quadratic_steps(kind, 2)
        exp1, exp2 = TWO_STEP_ORACLE[kind]
        np.testing.assert_allclose([w1, w2], [exp1, exp2], atol=1e-9)

    def test_adam_constant_gradient_deltas(self):
        # With a constant gradient both bias-corrected moments equal the
        # gradient, so every step moves by -lr/(1 + eps-adjustment).
        w = Tensor(np.array([1.0], dtype=np.float64))
        state = OptimizerState.create(OptimizerKind.ADAM, learning_rate=0.1)
        prev = 1.0
        for _ in range(2):
            step(state, {"w": w}, {"w": np.array([1.0])})
            delta = float(w.data[0]) - prev
            np.testing.assert_allclose(delta, -0.099999999, atol=1e-9)
            prev = float(w.data[0])

    def test_adadelta_first_step_closed_form(self):
        w = Tensor(np.array([1.0], dtype=np.float64))
        state = OptimizerState.create(OptimizerKind.ADADELTA)
        step(state, {"w": w}, {"w": np.array([1.0])})
        expected = -np.sqrt(1e-6 / (0.05 + 1e-6))
        np.testing.assert_allclose(float(w.data[0]) - 1.0, expected, atol=1e-12)


class TestStepBehaviour:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_zero_gradient_leaves_params_unchanged(self, kind):
        w = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32))
        before = w.data.copy()
        state = OptimizerState.create(kind)
        step(state, {"w": w}, {"w": np.zeros(3, dtype=np.float32)})
        np.testing.assert_array_equal(w.data, before)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_step_count_increments_by_one(self, kind):
        w = Tensor(np.ones(2, dtype=np.float32))
        state = OptimizerState.create(kind)
        for expected in (1, 2, 3):
            step(state, {"w": w}, {"w": np.ones(2, dtype=np.float32)})
            assert state.step_count == expected

    def test_nan_gradient_names_parameter(self):
        w = Tensor(np.ones(2, dtype=np.float32))
        state = OptimizerState.create(OptimizerKind.ADAM)
        with pytest.raises(ValueError, match="conv1_bias"):
            step(state, {"conv1_bias": w}, {"conv1_bias": np.array([1.0, np.nan], dtype=np.float32)})

    def test_shape_mismatch_rejected(self):
        w = Tensor(np.ones(2, dtype=np.float32))
        state = OptimizerState.create(OptimizerKind.ADAM)
        with pytest.raises(ShapeError):
            step(state, {"w": w}, {"w": np.ones(3, dtype=np.float32)})

    def test_grads_default_to_tensor_grad_field(self):
        w = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        w.grad = np.array([2.0], dtype=np.float32)
        state = OptimizerState.create(OptimizerKind.RMSPROP, learning_rate=0.1)
        step(state, {"w": w})
        assert float(w.data[0]) < 1.0

    def test_missing_gradient_rejected(self):
        w = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        state = OptimizerState.create(OptimizerKind.ADAM)
        with pytest.raises(ValueError, match="w"):
            step(state, {"w": w})


class TestConvergenceAndDeterminism:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_monotone_descent_on_quadratic(self, kind):
        iterates = quadratic_steps(kind, 100)
        values = [w * w for w in [1.0] + iterates]
        assert all(b < a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_bit_identical_given_same_state_and_grads(self, kind):
        r = np.random.default_rng(0)
        grads = [r.standard_normal(4).astype(np.float32) for _ in range(5)]

        def run():
            w = Tensor(np.ones(4, dtype=np.float32))
            state = OptimizerState.create(kind, learning_rate=1e-3)
            for g in grads:
                step(state, {"w": w}, {"w": g})
            return w.data.tobytes()

        assert run() == run()

    def test_nadam_without_nesterov_equals_adam_exactly(self):
        r = np.random.default_rng(1)
        grads = [r.standard_normal(6).astype(np.float32) for _ in range(10)]

        def run(kind, nesterov):
            w = Tensor(np.ones(6, dtype=np.float32))
            state = OptimizerState.create(kind, learning_rate=1e-3)
            state.nesterov = nesterov
            for g in grads:
                step(state, {"w": w}, {"w": g})
            return w.data.tobytes()

        assert run(OptimizerKind.NADAM, False) == run(OptimizerKind.ADAM, True)

    def test_nadam_with_nesterov_differs_from_adam(self):
        g = np.array([1.0], dtype=np.float64)

        def run(kind):
            w = Tensor(np.array([1.0], dtype=np.float64))
            state = OptimizerState.create(kind, learning_rate=0.1)
            step(state, {"w": w}, {"w": g})
            return float(w.data[0])

        assert run(OptimizerKind.NADAM) != run(OptimizerKind.ADAM)


class TestLineSearch:
    def test_single_candidate_returned(self):
        assert line_search_lr(lambda lr: 0.5, [3e-4]) == 3e-4

    def test_peak_selected_from_default_grid(self):
        scores = {1e-3: 0.2, 1e-4: 0.6, 5e-5: 0.9, 1e-5: 0.5}
        assert line_search_lr(lambda lr: scores[lr], DEFAULT_LR_GRID) == 5e-5

    def test_tie_goes_to_smaller_lr(self):
        assert line_search_lr(lambda lr: 1.0, [1e-3, 1e-5, 1e-4]) == 1e-5

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            line_search_lr(lambda lr: 0.0, [])
