"""First-order optimizers with persistent per-parameter state.

All four update rules follow the published algorithms: Adam with bias
correction, RMSprop with an EMA of squared gradients, Adadelta with
accumulated squared gradients and updates (no learning rate of its own,
so its default multiplier is 1.0), and Nadam as Adam with a Nesterov
lookahead on the first moment.  Updates are deterministic functions of
(state, gradients), so identical inputs give bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "OptimizerKind",
    "OptimizerState",
    "step",
    "line_search_lr",
    "DEFAULT_LR",
    "DEFAULT_LR_GRID",
]

DEFAULT_LR = 5e-5
DEFAULT_LR_GRID = (1e-3, 1e-4, 5e-5, 1e-5)


class OptimizerKind(str, Enum):
    ADAM = "adam"
    RMSPROP = "rmsprop"
    ADADELTA = "adadelta"
    NADAM = "nadam"


@dataclass
class OptimizerState:
    """Hyperparameters plus per-parameter moment buffers for one run."""

    kind: OptimizerKind
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    epsilon: float = 1e-8
    nesterov: bool = True
    step_count: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def create(cls, kind: OptimizerKind | str, learning_rate: Optional[float] = None) -> "OptimizerState":
        kind = OptimizerKind(kind)
        if kind is OptimizerKind.ADADELTA:
            lr = 1.0 if learning_rate is None else learning_rate
            return cls(kind=kind, learning_rate=lr, rho=0.95, epsilon=1e-6)
        lr = DEFAULT_LR if learning_rate is None else learning_rate
        if kind is OptimizerKind.RMSPROP:
            return cls(kind=kind, learning_rate=lr, rho=0.9, epsilon=1e-8)
        return cls(kind=kind, learning_rate=lr, beta1=0.9, beta2=0.999, epsilon=1e-8)

    def buffer(self, param: str, name: str, like: np.ndarray) -> np.ndarray:
        slot = self.buffers.setdefault(param, {})
        buf = slot.get(name)
        if buf is None:
            buf = np.zeros_like(like)
            slot[name] = buf
        elif buf.shape != like.shape:
            raise ShapeError(
                f"optimizer buffer {name!r} for {param!r} has shape {buf.shape}, "
                f"parameter has {like.shape}"
            )
        return buf


def step(
    state: OptimizerState,
    params: Dict[str, Tensor],
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """Apply one in-place update to every parameter.

    Gradients default to each tensor's ``grad`` field as populated by
    ``backward``.  A NaN gradient aborts with the offending parameter's
    name before any parameter is touched.
    """
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            grads[name] = p.grad

    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
            )
        if np.isnan(g).any():
            raise ValueError(f"NaN gradient for parameter {name!r}")

    state.step_count += 1
    for name, p in params.items():
        g = grads[name].astype(p.data.dtype, copy=False)
        if state.kind in (OptimizerKind.ADAM, OptimizerKind.NADAM):
            _adam_update(state, name, p, g, nesterov=state.kind is OptimizerKind.NADAM and state.nesterov)
        elif state.kind is OptimizerKind.RMSPROP:
            _rmsprop_update(state, name, p, g)
        elif state.kind is OptimizerKind.ADADELTA:
            _adadelta_update(state, name, p, g)
        else:
            raise ValueError(f"unknown optimizer kind: {state.kind!r}")


def _adam_update(state: OptimizerState, name: str, p: Tensor, g: np.ndarray, nesterov: bool) -> None:
    b1, b2, eps, lr, t = state.beta1, state.beta2, state.epsilon, state.learning_rate, state.step_count
    m = state.buffer(name, "m", p.data)
    v = state.buffer(name, "v", p.data)
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    if nesterov:
        numerator = b1 * m_hat + (1.0 - b1) / (1.0 - b1**t) * g
    else:
        numerator = m_hat
    p.data -= (lr * numerator / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


def _rmsprop_update(state: OptimizerState, name: str, p: Tensor, g: np.ndarray) -> None:
    rho, eps, lr = state.rho, state.epsilon, state.learning_rate
    v = state.buffer(name, "v", p.data)
    v *= rho
    v += (1.0 - rho) * g * g
    p.data -= (lr * g / (np.sqrt(v) + eps)).astype(p.data.dtype, copy=False)


def _adadelta_update(state: OptimizerState, name: str, p: Tensor, g: np.ndarray) -> None:
    rho, eps, lr = state.rho, state.epsilon, state.learning_rate
    acc_g = state.buffer(name, "acc_grad", p.data)
    acc_u = state.buffer(name, "acc_update", p.data)
    acc_g *= rho
    acc_g += (1.0 - rho) * g * g
    update = -np.sqrt((acc_u + eps) / (acc_g + eps)) * g
    acc_u *= rho
    acc_u += (1.0 - rho) * update * update
    p.data += (lr * update).astype(p.data.dtype, copy=False)


def line_search_lr(
    train_fn: Callable[[float], float],
    candidates: Sequence[float] = DEFAULT_LR_GRID,
) -> float:
    """Evaluate every candidate learning rate, return the best scorer.

    Ties go to the smaller learning rate.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")
    best_lr: Optional[float] = None
    best_score = -np.inf
    for lr in candidates:
        score = train_fn(lr)
        if score > best_score or (score == best_score and (best_lr is None or lr < best_lr)):
            best_score = score
            best_lr = lr
    return best_lr
