"""Dense float tensors with reverse-mode automatic differentiation.

Every operation the networks need is implemented as a primitive that
records its inputs and a backward closure on the output tensor.  A
``Graph`` is the topologically ordered tape traced from an output;
``backward`` walks it once in reverse, accumulating gradients into the
``grad`` field of every tensor that requires them.

Training runs in float32.  ``grad_check`` re-runs the forward pass in
float64 so finite-difference comparisons are not polluted by single
precision rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "BatchNormState",
    "ShapeError",
    "tensor",
    "op_result",
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "sum_",
    "mean",
    "maximum",
    "minimum",
    "relu",
    "sigmoid",
    "activation",
    "sqrt",
    "absolute",
    "exp",
    "log",
    "reshape",
    "pad2d",
    "conv2d",
    "maxpool2d",
    "batchnorm",
    "dense",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A dense float array plus an optional gradient.

    Tensors produced by operations carry references to their parents and
    a backward closure; leaf tensors (parameters, inputs) carry neither.
    Data is float32 by default; float64 arrays are kept as-is so the
    gradient-check path can run the whole graph in double precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op: str = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def op_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    """Wrap the result of a primitive, recording the tape entry.

    ``backward_fn`` receives the upstream gradient and must call
    ``accumulate_grad`` on each parent that requires a gradient.
    """
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return op_result(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return op_result(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return op_result(out, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return op_result(out, (a, b), bwd, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return op_result(out, (a,), bwd, f"pow{exponent}")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return op_result(out, (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def bwd(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape) / count)

    return op_result(out, (a,), bwd, "mean")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    out = np.maximum(a.data, b.data)
    # Ties route the full gradient to the first argument.
    mask_a = a.data >= b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * mask_a, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~mask_a, b.shape))

    return op_result(out, (a, b), bwd, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    out = np.minimum(a.data, b.data)
    mask_a = a.data <= b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * mask_a, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~mask_a, b.shape))

    return op_result(out, (a, b), bwd, "minimum")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    # Subgradient at exactly 0 is 0.
    mask = a.data > 0

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return op_result(out, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return op_result(out, (a,), bwd, "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind: {kind!r}")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            # Subgradient 0 at the origin keeps gradients finite.
            safe = np.where(out > 0, out, 1.0)
            a.accumulate_grad(np.where(out > 0, g * 0.5 / safe, 0.0))

    return op_result(out, (a,), bwd, "sqrt")


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * sign)

    return op_result(out, (a,), bwd, "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return op_result(out, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return op_result(out, (a,), bwd, "log")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return op_result(out, (a,), bwd, "reshape")


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes by ``pad`` on every side."""
    if pad < 0:
        raise ShapeError("pad must be nonnegative")
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
            a.accumulate_grad(g[sl])

    return op_result(out, (a,), bwd, "pad2d")


# ---------------------------------------------------------------------------
# Neural-network primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x`` with ``kernels`` plus per-channel bias.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, K, K); output spatial size is floor((H-K)/stride)+1.
    """
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be (C_out, C_in, K, K), got {kernels.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc_in, k, _ = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"input has {c_in} channels but kernels expect {kc_in}")
    if k > h or k > w:
        raise ShapeError(f"kernel size {k} exceeds input {h}x{w}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")

    windows = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C_in, Ho, Wo, K, K)
    _, _, ho, wo, _, _ = windows.shape
    # im2col: one matmul against the flattened kernel bank
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    kmat = kernels.data.reshape(c_out, c_in * k * k)
    out = cols @ kmat.T + bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bwd(g: np.ndarray) -> None:
        if squeeze:
            g = g[None]
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0))
        if kernels.requires_grad:
            kernels.accumulate_grad((gmat.T @ cols).reshape(kernels.shape))
        if x.requires_grad:
            dcols = gmat @ kmat  # (N*Ho*Wo, C_in*K*K)
            dcols = dcols.reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
            dx = np.zeros_like(xd)
            for ki in range(k):
                for kj in range(k):
                    dx[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                        :, :, :, :, ki, kj
                    ]
            x.accumulate_grad(dx[0] if squeeze else dx)

    return op_result(out[0] if squeeze else out, (x, kernels, bias), bwd, "conv2d")


def maxpool2d(x: Tensor, pool: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling over pool x pool windows; backward routes gradient to the
    first (row-major) maximum of each window."""
    if stride is None:
        stride = pool
    if pool < 1 or stride < 1:
        raise ShapeError("pool and stride must be >= 1")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d input must be 3-D or 4-D, got shape {x.shape}")
    n, c, h, w = xd.shape
    if pool > h or pool > w:
        raise ShapeError(f"pool size {pool} exceeds input {h}x{w}")

    windows = np.lib.stride_tricks.sliding_window_view(xd, (pool, pool), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    _, _, ho, wo, _, _ = windows.shape
    flat = windows.reshape(n, c, ho, wo, pool * pool)
    argmax = flat.argmax(axis=-1)  # first occurrence on ties (row-major)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        if squeeze:
            g = g[None]
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + argmax // pool
        cols = wi * stride + argmax % pool
        dx = np.zeros_like(xd)
        np.add.at(dx, (ni, ci, rows, cols), g)
        x.accumulate_grad(dx[0] if squeeze else dx)

    return op_result(out[0] if squeeze else out, (x,), bwd, "maxpool2d")


@dataclass
class BatchNormState:
    """Learnable affine plus running statistics for one batchnorm layer.

    In training mode the layer standardizes by batch statistics and folds
    them into the running averages; in inference mode only the running
    statistics are used, so the output is independent of batch content.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalization over an (N, C, H, W) tensor."""
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"input has {c} channels but state has {state.channels}")

    xd = x.data
    eps = state.epsilon
    gamma = state.gamma
    beta = state.beta
    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)

    if state.training:
        axes = (0, 2, 3)
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gview * xhat + bview
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mu).astype(
            state.running_mean.dtype
        )
        state.running_var = (m * state.running_var + (1.0 - m) * var).astype(
            state.running_var.dtype
        )

        def bwd(g: np.ndarray) -> None:
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=axes))
            if x.requires_grad:
                gh = g * gview  # gradient w.r.t. xhat
                mean_gh = gh.mean(axis=axes, keepdims=True)
                mean_gh_xhat = (gh * xhat).mean(axis=axes, keepdims=True)
                dx = inv_std.reshape(1, c, 1, 1) * (gh - mean_gh - xhat * mean_gh_xhat)
                x.accumulate_grad(dx)

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gview * xhat + bview

        def bwd(g: np.ndarray) -> None:
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x.accumulate_grad(g * (gview * inv_std.reshape(1, c, 1, 1)))

    return op_result(out, (x, gamma, beta), bwd, "batchnorm")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, D_in) @ (D_out, D_in)^T + (D_out,)."""
    if x.ndim != 2:
        raise ShapeError(f"dense input must be (N, D_in), got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"weight shape {weight.shape} incompatible with input {x.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def bwd(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)

    return op_result(out, (x, weight, bias), bwd, "dense")


# ---------------------------------------------------------------------------
# Graph tracing and backward
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered tape of the operations reaching an output."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``grad`` on every reachable tensor that requires it.

    ``loss`` must be scalar.  Each tape node is visited exactly once, in
    reverse topological order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The forward pass is evaluated in float64.  The per-coordinate error is
    |analytic - numeric| / max(1, |analytic|); the maximum over all
    coordinates is returned.
    """
    base = x.data.astype(np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(out)
    grad = xt.grad if xt.grad is not None else np.zeros_like(base)
    analytic = grad.reshape(-1).copy()

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(base.shape))).item()
        lo = f(Tensor((flat - bump).reshape(base.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
