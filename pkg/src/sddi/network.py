"""Model architectures and forward passes.

Three networks share the autodiff engine: the Siamese convolutional
tower that embeds one grayscale image into a low-dimensional vector, an
optional spatial-transformer preprocessor that learns to re-pose inputs
before embedding, and a convolutional autoencoder used as an
image-similarity baseline.

Weight sharing between the two Siamese branches is by object identity:
both branches call the same forward with the same parameter tensors, so
"sharing" can never drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .objective import DistanceKind, distance
from .tensor import BatchNormState, ShapeError, Tensor, op_result

__all__ = [
    "ConfigError",
    "TowerSpec",
    "StnSpec",
    "AutoencoderSpec",
    "ModelState",
    "StnState",
    "AutoencoderState",
    "init_model",
    "init_autoencoder",
    "tower_forward",
    "siamese_forward",
    "stn_forward",
    "autoencoder_forward",
    "affine_grid",
    "bilinear_sample",
    "upsample2d_nearest",
]

# Sampling coordinates this close to a pixel-lattice point (in pixel
# units) are snapped onto it, making lattice-aligned transforms exact.
LATTICE_SNAP = 1e-6


class ConfigError(ValueError):
    """Raised when an architecture description cannot produce a valid
    shape chain."""


# ---------------------------------------------------------------------------
# Architecture descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TowerSpec:
    """Embedding tower layout: conv blocks then fully connected layers.

    Each conv block is conv (valid, stride 1) -> relu -> maxpool
    (non-overlapping) -> batchnorm.  All fc layers use relu except the
    last, which is linear so embeddings are sign-unrestricted.
    """

    input_size: int = 500
    conv_filters: Tuple[int, ...] = (64, 128, 128, 256)
    kernel: int = 9
    pool: int = 3
    fc_sizes: Tuple[int, ...] = (256, 128, 20)

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(self.conv_filters))
        object.__setattr__(self, "fc_sizes", tuple(self.fc_sizes))
        if self.input_size < 1 or self.kernel < 1 or self.pool < 1:
            raise ConfigError("input_size, kernel, and pool must be positive")
        if not self.conv_filters or not self.fc_sizes:
            raise ConfigError("conv_filters and fc_sizes must be nonempty")
        self.shape_chain()  # validates

    @property
    def embedding_dim(self) -> int:
        return self.fc_sizes[-1]

    def shape_chain(self) -> List[int]:
        """Spatial side length after each conv and pool, input first.

        Raises ConfigError if any stage would feed a conv an input
        smaller than the kernel or pool a dimension to zero.
        """
        side = self.input_size
        chain = [side]
        for i, _ in enumerate(self.conv_filters):
            if side < self.kernel:
                raise ConfigError(
                    f"conv block {i} input side {side} is smaller than kernel {self.kernel}"
                )
            side = side - self.kernel + 1
            chain.append(side)
            side = side // self.pool
            if side < 1:
                raise ConfigError(f"pool after conv block {i} reduces side to zero")
            chain.append(side)
        return chain

    @property
    def flat_dim(self) -> int:
        side = self.shape_chain()[-1]
        return side * side * self.conv_filters[-1]


@dataclass(frozen=True)
class StnSpec:
    """Localisation network layout for the spatial transformer.

    The final dense layer regresses the six affine parameters; it is
    initialized to the identity transform (zero weights, bias
    [1,0,0,0,1,0]) so an untrained transformer is a no-op.
    """

    loc_conv_filters: Tuple[int, ...] = (8, 10)
    loc_kernels: Tuple[int, ...] = (7, 5)
    loc_pool: int = 2
    loc_fc: Tuple[int, ...] = (32, 6)

    def __post_init__(self):
        object.__setattr__(self, "loc_conv_filters", tuple(self.loc_conv_filters))
        object.__setattr__(self, "loc_kernels", tuple(self.loc_kernels))
        object.__setattr__(self, "loc_fc", tuple(self.loc_fc))
        if len(self.loc_conv_filters) != len(self.loc_kernels):
            raise ConfigError("loc_conv_filters and loc_kernels must have equal length")
        if self.loc_fc[-1] != 6:
            raise ConfigError("final localisation layer must output exactly 6 values")

    def shape_chain(self, input_size: int) -> List[int]:
        side = input_size
        chain = [side]
        for i, k in enumerate(self.loc_kernels):
            if side < k:
                raise ConfigError(
                    f"localisation conv {i} input side {side} is smaller than kernel {k}"
                )
            side = side - k + 1
            side = side // self.loc_pool
            if side < 1:
                raise ConfigError(f"localisation pool {i} reduces side to zero")
            chain.append(side)
        return chain

    def flat_dim(self, input_size: int) -> int:
        side = self.shape_chain(input_size)[-1]
        return side * side * self.loc_conv_filters[-1]


POOL = "pool"
UPSAMPLE = "up"


@dataclass(frozen=True)
class AutoencoderSpec:
    """Convolutional autoencoder layout for the similarity baseline.

    Integer entries are SAME-padded conv layers; the tokens "pool" and
    "up" are 2x max-pooling and 2x nearest-neighbor upsampling.  The
    final encoder conv and final decoder conv use sigmoid, all others
    relu, so features and reconstructions live in [0,1].
    """

    encoder_layers: Tuple[Union[int, str], ...] = (16, 32, 64, POOL, 128, 64, POOL, 32, 16, 8)
    decoder_layers: Tuple[Union[int, str], ...] = (16, 32, UPSAMPLE, 64, 128, UPSAMPLE, 64, 32, 16, 1)
    kernel: int = 3
    pool: int = 2
    upsample: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(self.decoder_layers))
        if self.kernel % 2 != 1:
            raise ConfigError("SAME padding requires an odd kernel")
        for name, layers in (("encoder", self.encoder_layers), ("decoder", self.decoder_layers)):
            for entry in layers:
                if not (isinstance(entry, int) or entry in (POOL, UPSAMPLE)):
                    raise ConfigError(f"bad {name} layer entry: {entry!r}")
        n_pool = self.encoder_layers.count(POOL)
        n_up = self.decoder_layers.count(UPSAMPLE)
        if n_pool != n_up:
            raise ConfigError(
                f"decoder must undo every pooling: {n_pool} pools vs {n_up} upsamples"
            )
        if self.decoder_layers[-1] != 1:
            raise ConfigError("decoder must end in a single-channel conv")

    @property
    def downscale(self) -> int:
        return self.pool ** self.encoder_layers.count(POOL)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class StnState:
    spec: StnSpec
    conv_kernels: List[Tensor]
    conv_biases: List[Tensor]
    fc_weights: List[Tensor]
    fc_biases: List[Tensor]

    def parameters(self) -> dict:
        out = {}
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            out[f"stn/conv{i}/kernels"] = k
            out[f"stn/conv{i}/bias"] = b
        for i, (w, b) in enumerate(zip(self.fc_weights, self.fc_biases)):
            out[f"stn/fc{i}/weight"] = w
            out[f"stn/fc{i}/bias"] = b
        return out


@dataclass
class ModelState:
    """All learnable state of one Siamese model (tower plus optional STN)."""

    spec: TowerSpec
    conv_kernels: List[Tensor]
    conv_biases: List[Tensor]
    bn_states: List[BatchNormState]
    fc_weights: List[Tensor]
    fc_biases: List[Tensor]
    stn: Optional[StnState] = None

    def parameters(self) -> dict:
        """Trainable tensors keyed by stable slash-separated names."""
        out = {}
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            out[f"tower/conv{i}/kernels"] = k
            out[f"tower/conv{i}/bias"] = b
        for i, bn in enumerate(self.bn_states):
            out[f"tower/bn{i}/gamma"] = bn.gamma
            out[f"tower/bn{i}/beta"] = bn.beta
        for i, (w, b) in enumerate(zip(self.fc_weights, self.fc_biases)):
            out[f"tower/fc{i}/weight"] = w
            out[f"tower/fc{i}/bias"] = b
        if self.stn is not None:
            out.update(self.stn.parameters())
        return out

    def buffers(self) -> dict:
        """Non-trainable arrays that must persist across save/load."""
        out = {}
        for i, bn in enumerate(self.bn_states):
            out[f"tower/bn{i}/running_mean"] = bn.running_mean
            out[f"tower/bn{i}/running_var"] = bn.running_var
        return out

    def set_training(self, training: bool) -> None:
        for bn in self.bn_states:
            bn.training = training

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


@dataclass
class AutoencoderState:
    spec: AutoencoderSpec
    enc_kernels: List[Tensor]
    enc_biases: List[Tensor]
    dec_kernels: List[Tensor]
    dec_biases: List[Tensor]
    trained: bool = False

    def parameters(self) -> dict:
        out = {}
        for i, (k, b) in enumerate(zip(self.enc_kernels, self.enc_biases)):
            out[f"ae/enc{i}/kernels"] = k
            out[f"ae/enc{i}/bias"] = b
        for i, (k, b) in enumerate(zip(self.dec_kernels, self.dec_biases)):
            out[f"ae/dec{i}/kernels"] = k
            out[f"ae/dec{i}/bias"] = b
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    limit = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _init_stn(spec: StnSpec, input_size: int, rng: np.random.Generator) -> StnState:
    spec.shape_chain(input_size)  # validates against this image size
    conv_kernels, conv_biases = [], []
    c_in = 1
    for filters, k in zip(spec.loc_conv_filters, spec.loc_kernels):
        conv_kernels.append(_he_uniform(rng, (filters, c_in, k, k), c_in * k * k))
        conv_biases.append(_zeros(filters))
        c_in = filters
    fc_weights, fc_biases = [], []
    d_in = spec.flat_dim(input_size)
    for i, d_out in enumerate(spec.loc_fc):
        last = i == len(spec.loc_fc) - 1
        if last:
            # Identity init: the untrained transformer must be a no-op.
            fc_weights.append(_zeros((d_out, d_in)))
            fc_biases.append(
                Tensor(np.array([1, 0, 0, 0, 1, 0], dtype=np.float32), requires_grad=True)
            )
        else:
            fc_weights.append(_he_uniform(rng, (d_out, d_in), d_in))
            fc_biases.append(_zeros(d_out))
        d_in = d_out
    return StnState(spec, conv_kernels, conv_biases, fc_weights, fc_biases)


def init_model(
    spec: TowerSpec,
    stn_spec: Optional[StnSpec] = None,
    seed: int = 0,
) -> ModelState:
    """Seeded He-uniform initialization of the tower and optional STN."""
    rng = np.random.default_rng(seed)
    conv_kernels, conv_biases, bn_states = [], [], []
    c_in = 1
    for filters in spec.conv_filters:
        k = spec.kernel
        conv_kernels.append(_he_uniform(rng, (filters, c_in, k, k), c_in * k * k))
        conv_biases.append(_zeros(filters))
        bn_states.append(BatchNormState.create(filters))
        c_in = filters
    fc_weights, fc_biases = [], []
    d_in = spec.flat_dim
    for d_out in spec.fc_sizes:
        fc_weights.append(_he_uniform(rng, (d_out, d_in), d_in))
        fc_biases.append(_zeros(d_out))
        d_in = d_out
    stn = _init_stn(stn_spec, spec.input_size, rng) if stn_spec is not None else None
    return ModelState(spec, conv_kernels, conv_biases, bn_states, fc_weights, fc_biases, stn)


def init_autoencoder(spec: AutoencoderSpec, seed: int = 0) -> AutoencoderState:
    rng = np.random.default_rng(seed)

    def build(layers, c_in):
        kernels, biases = [], []
        for entry in layers:
            if isinstance(entry, int):
                k = spec.kernel
                kernels.append(_he_uniform(rng, (entry, c_in, k, k), c_in * k * k))
                biases.append(_zeros(entry))
                c_in = entry
        return kernels, biases, c_in

    enc_kernels, enc_biases, enc_out = build(spec.encoder_layers, 1)
    dec_kernels, dec_biases, _ = build(spec.decoder_layers, enc_out)
    return AutoencoderState(spec, enc_kernels, enc_biases, dec_kernels, dec_biases)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def tower_forward(state: ModelState, batch: Tensor) -> Tensor:
    """Embed a batch of (N, 1, H, W) images into (N, embedding_dim)."""
    spec = state.spec
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ShapeError(f"tower input must be (N, 1, H, W), got {batch.shape}")
    if batch.shape[2] != spec.input_size or batch.shape[3] != spec.input_size:
        raise ShapeError(
            f"tower input is {batch.shape[2]}x{batch.shape[3]}, "
            f"spec expects {spec.input_size}x{spec.input_size}"
        )
    h = batch
    for kernels, bias, bn in zip(state.conv_kernels, state.conv_biases, state.bn_states):
        h = T.conv2d(h, kernels, bias)
        h = T.relu(h)
        h = T.maxpool2d(h, spec.pool)
        h = T.batchnorm(h, bn)
    n = h.shape[0]
    h = h.reshape(n, spec.flat_dim)
    for i, (w, b) in enumerate(zip(state.fc_weights, state.fc_biases)):
        h = T.dense(h, w, b)
        if i < len(state.fc_weights) - 1:
            h = T.relu(h)
    return h


def siamese_forward(
    state: ModelState,
    a: Tensor,
    b: Tensor,
    metric: DistanceKind = DistanceKind.EUCLIDEAN,
) -> Tensor:
    """Per-pair embedding distance through the shared tower.

    When the model carries a spatial transformer it is applied to both
    images independently, with the same transformer parameters.
    """
    if a.shape != b.shape:
        raise ShapeError(f"pair batches differ in shape: {a.shape} vs {b.shape}")
    if state.stn is not None:
        a = stn_forward(state.stn, a)
        b = stn_forward(state.stn, b)
    ea = tower_forward(state, a)
    eb = tower_forward(state, b)
    return distance(metric, ea, eb)


def _loc_net(stn: StnState, image: Tensor) -> Tensor:
    """Regress the six affine parameters from an image batch."""
    h = image
    for kernels, bias in zip(stn.conv_kernels, stn.conv_biases):
        h = T.conv2d(h, kernels, bias)
        h = T.relu(h)
        h = T.maxpool2d(h, stn.spec.loc_pool)
    n = h.shape[0]
    h = h.reshape(n, int(np.prod(h.shape[1:])))
    for i, (w, b) in enumerate(zip(stn.fc_weights, stn.fc_biases)):
        h = T.dense(h, w, b)
        if i < len(stn.fc_weights) - 1:
            h = T.relu(h)
    return h


def stn_forward(stn: StnState, image: Tensor) -> Tensor:
    """Re-pose each image by its regressed affine transform."""
    if image.ndim != 4:
        raise ShapeError(f"stn input must be (N, C, H, W), got {image.shape}")
    n, _, h, w = image.shape
    theta = _loc_net(stn, image).reshape(n, 2, 3)
    grid = affine_grid(theta, h, w)
    return bilinear_sample(image, grid)


def autoencoder_forward(state: AutoencoderState, image: Tensor) -> Tuple[Tensor, Tensor]:
    """Encode then reconstruct; returns (features, reconstruction)."""
    spec = state.spec
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"autoencoder input must be (N, 1, H, W), got {image.shape}")
    n, _, h, w = image.shape
    scale = spec.downscale
    if h % scale != 0 or w % scale != 0:
        raise ConfigError(
            f"input dims {h}x{w} must be divisible by {scale} for pooling to invert"
        )

    pad = spec.kernel // 2

    def run(layers, kernels, biases, x):
        conv_i = 0
        n_convs = len(kernels)
        for entry in layers:
            if entry == POOL:
                x = T.maxpool2d(x, spec.pool)
            elif entry == UPSAMPLE:
                x = upsample2d_nearest(x, spec.upsample)
            else:
                x = T.conv2d(T.pad2d(x, pad), kernels[conv_i], biases[conv_i])
                last = conv_i == n_convs - 1
                x = T.sigmoid(x) if last else T.relu(x)
                conv_i += 1
        return x

    features = run(spec.encoder_layers, state.enc_kernels, state.enc_biases, image)
    reconstruction = run(spec.decoder_layers, state.dec_kernels, state.dec_biases, features)
    return features, reconstruction


# ---------------------------------------------------------------------------
# Spatial transformer primitives
# ---------------------------------------------------------------------------


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Source coordinates for sampling, one (x, y) pair per output pixel.

    Target pixels are placed on the normalized grid [-1, 1] x [-1, 1]
    (corners aligned); each source coordinate is theta @ [x, y, 1].
    Output shape is (N, out_h, out_w, 2).  The base grid is built in
    float64 so lattice-aligned transforms survive snapping downstream.
    """
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ShapeError(f"theta must be (N, 2, 3), got {theta.shape}")
    n = theta.shape[0]
    xs = np.linspace(-1.0, 1.0, out_w, dtype=np.float64)
    ys = np.linspace(-1.0, 1.0, out_h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    base = np.stack([gx.ravel(), gy.ravel(), np.ones(out_h * out_w)], axis=0)  # (3, M)
    out = theta.data.astype(np.float64) @ base  # (N, 2, M)
    out = out.transpose(0, 2, 1).reshape(n, out_h, out_w, 2)

    def bwd(g: np.ndarray) -> None:
        if theta.requires_grad:
            gm = g.reshape(n, out_h * out_w, 2).transpose(0, 2, 1)  # (N, 2, M)
            theta.accumulate_grad(gm @ base.T)

    return op_result(out, (theta,), bwd, "affine_grid")


def bilinear_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Sample an image at fractional source coordinates.

    Coordinates are normalized to [-1, 1] with corners aligned to the
    outermost pixel centers.  Samples outside the image contribute zero.
    Coordinates within a hair of a lattice point are snapped onto it, so
    transforms that permute pixels reproduce them bit-exactly.
    Differentiable in both the image and the grid.
    """
    if image.ndim != 4:
        raise ShapeError(f"image must be (N, C, H, W), got {image.shape}")
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"grid must be (N, h, w, 2), got {grid.shape}")
    if grid.shape[0] != image.shape[0]:
        raise ShapeError(
            f"batch mismatch: image N={image.shape[0]}, grid N={grid.shape[0]}"
        )
    n, c, h, w = image.shape
    out_h, out_w = grid.shape[1], grid.shape[2]
    m = out_h * out_w

    gx = grid.data[..., 0].astype(np.float64)
    gy = grid.data[..., 1].astype(np.float64)
    x = (gx + 1.0) * 0.5 * (w - 1)
    y = (gy + 1.0) * 0.5 * (h - 1)
    rx, ry = np.round(x), np.round(y)
    x = np.where(np.abs(x - rx) <= LATTICE_SNAP, rx, x)
    y = np.where(np.abs(y - ry) <= LATTICE_SNAP, ry, y)

    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0i, y0i = x0.astype(np.int64), y0.astype(np.int64)
    x1i, y1i = x0i + 1, y0i + 1

    flat = image.data.reshape(n, c, h * w)

    def gather(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)  # (N, oh, ow)
        idx3 = np.repeat(idx.reshape(n, 1, m), c, axis=1)
        vals = np.take_along_axis(flat, idx3, axis=2).reshape(n, c, out_h, out_w)
        return vals * valid[:, None, :, :], valid, idx

    v00, m00, i00 = gather(y0i, x0i)
    v01, m01, i01 = gather(y0i, x1i)
    v10, m10, i10 = gather(y1i, x0i)
    v11, m11, i11 = gather(y1i, x1i)

    wxb = wx[:, None, :, :]
    wyb = wy[:, None, :, :]
    w00 = (1.0 - wxb) * (1.0 - wyb)
    w01 = wxb * (1.0 - wyb)
    w10 = (1.0 - wxb) * wyb
    w11 = wxb * wyb
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out = out.astype(image.dtype, copy=False)

    def bwd(g: np.ndarray) -> None:
        if image.requires_grad:
            dflat = np.zeros_like(image.data, shape=(n, c, h * w))
            bi = np.broadcast_to(np.arange(n).reshape(n, 1, 1, 1), (n, c, out_h, out_w))
            ci = np.broadcast_to(np.arange(c).reshape(1, c, 1, 1), (n, c, out_h, out_w))
            for weight, mask, idx in ((w00, m00, i00), (w01, m01, i01), (w10, m10, i10), (w11, m11, i11)):
                contrib = g * weight * mask[:, None, :, :]
                pix = np.broadcast_to(idx.reshape(n, 1, out_h, out_w), (n, c, out_h, out_w))
                np.add.at(dflat, (bi, ci, pix), contrib)
            image.accumulate_grad(dflat.reshape(image.shape))
        if grid.requires_grad:
            dwx = (1.0 - wyb) * (v01 - v00) + wyb * (v11 - v10)
            dwy = (1.0 - wxb) * (v10 - v00) + wxb * (v11 - v01)
            dx = (g * dwx).sum(axis=1) * 0.5 * (w - 1)
            dy = (g * dwy).sum(axis=1) * 0.5 * (h - 1)
            grid.accumulate_grad(np.stack([dx, dy], axis=-1))

    return op_result(out, (image, grid), bwd, "bilinear_sample")


def upsample2d_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the two trailing axes."""
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    if x.ndim != 4:
        raise ShapeError(f"upsample input must be (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            blocks = g.reshape(n, c, h, factor, w, factor)
            x.accumulate_grad(blocks.sum(axis=(3, 5)))

    return op_result(out, (x,), bwd, "upsample2d")
