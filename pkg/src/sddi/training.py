"""Mini-batch training loops for the pair model and the autoencoder baseline.

Everything is seeded and single-threaded, so a (seed, config, dataset)
triple reproduces the same checkpoint byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import pack_model, save_checkpoint
from .data import GrayImage, PairExample
from .eval import classify_and_report, pr_curve
from .network import (
    AutoencoderState,
    ModelState,
    autoencoder_forward,
    siamese_forward,
    stn_forward,
    tower_forward,
)
from .objective import ContrastiveConfig, DistanceKind, contrastive_loss
from .optim import OptimizerKind, OptimizerState, step
from .tensor import Tensor

__all__ = [
    "TrainingError",
    "PairBatch",
    "TrainConfig",
    "EpochStats",
    "TrainResult",
    "embed_images",
    "pair_distances",
    "select_threshold",
    "train",
    "train_autoencoder",
]

Logger = Callable[[str], None]


class TrainingError(RuntimeError):
    """Raised when a training run cannot proceed."""


@dataclass
class PairBatch:
    """Dense arrays for a set of labeled image pairs."""

    left: np.ndarray  # (N, 1, H, W) float32
    right: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray  # (N,) float32, 1 = interacting

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise TrainingError(
                f"pair sides disagree: {self.left.shape} vs {self.right.shape}"
            )
        if self.left.ndim != 4 or self.labels.shape != (self.left.shape[0],):
            raise TrainingError(
                f"expected (N,1,H,W) images with (N,) labels, got "
                f"{self.left.shape} and {self.labels.shape}"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "PairBatch":
        idx = np.asarray(indices)
        return PairBatch(self.left[idx], self.right[idx], self.labels[idx])

    @classmethod
    def from_examples(
        cls, pairs: Sequence[PairExample], images: Mapping[str, object]
    ) -> "PairBatch":
        """Stack per-drug grayscale images (GrayImage or 2-D array) into pairs."""
        if not pairs:
            raise TrainingError("no pairs to assemble")

        def pixels(drug: str) -> np.ndarray:
            if drug not in images:
                raise TrainingError(f"no image loaded for drug {drug!r}")
            img = images[drug]
            return img.pixels if isinstance(img, GrayImage) else np.asarray(img)

        left = [pixels(pair.a) for pair in pairs]
        right = [pixels(pair.b) for pair in pairs]
        labels = [pair.label for pair in pairs]
        stack_l = np.stack(left).astype(np.float32)[:, None, :, :]
        stack_r = np.stack(right).astype(np.float32)[:, None, :, :]
        return cls(stack_l, stack_r, np.asarray(labels, dtype=np.float32))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    margin: float = 1.0
    metric: DistanceKind = DistanceKind.EUCLIDEAN
    val_fraction: float = 0.1
    checkpoint_every: int = 10

    def __post_init__(self):
        self.metric = DistanceKind(self.metric)
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise TrainingError(
                f"val_fraction must be in [0, 1), got {self.val_fraction}"
            )
        if self.checkpoint_every < 1:
            raise TrainingError(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}"
            )


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_f1: float
    val_recall: float
    val_precision: float

    def format(self) -> str:
        return (
            f"epoch={self.epoch} loss={self.loss:.6f} val_f1={self.val_f1:.6f} "
            f"val_recall={self.val_recall:.6f} val_precision={self.val_precision:.6f}"
        )


@dataclass
class TrainResult:
    threshold: float
    history: List[EpochStats] = field(default_factory=list)


def pair_distances(
    model: ModelState,
    data: PairBatch,
    metric: DistanceKind,
    batch_size: int = 32,
    rotate: bool = False,
) -> np.ndarray:
    """Inference-mode embedding distances for every pair, in input order."""
    model.set_training(False)
    left, right = data.left, data.right
    if rotate:
        left = np.ascontiguousarray(np.rot90(left, 1, axes=(2, 3)))
        right = np.ascontiguousarray(np.rot90(right, 1, axes=(2, 3)))
    out = []
    for start in range(0, len(data), batch_size):
        stop = start + batch_size
        d = siamese_forward(model, Tensor(left[start:stop]), Tensor(right[start:stop]), metric)
        out.append(np.atleast_1d(d.data))
    return np.concatenate(out)


def embed_images(
    model: ModelState,
    images: np.ndarray,
    batch_size: int = 32,
    rotate: bool = False,
) -> np.ndarray:
    """Inference-mode embeddings for (N, 1, H, W) images."""
    model.set_training(False)
    if rotate:
        images = np.ascontiguousarray(np.rot90(images, 1, axes=(2, 3)))
    out = []
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start : start + batch_size])
        if model.stn is not None:
            x = stn_forward(model.stn, x)
        out.append(tower_forward(model, x).data)
    return np.concatenate(out, axis=0)


def select_threshold(distances: np.ndarray, labels: np.ndarray, fallback: float) -> float:
    """Best-F1 threshold when both classes are present, else the fallback."""
    positives = float(np.sum(labels))
    if 0.0 < positives < labels.shape[0]:
        return float(pr_curve(distances, labels).selected_threshold)
    return float(fallback)


def train(
    model: ModelState,
    optimizer: OptimizerState,
    data: PairBatch,
    config: TrainConfig,
    checkpoint_path=None,
    extra_config: Optional[Dict[str, str]] = None,
    log: Optional[Logger] = None,
) -> TrainResult:
    """Shuffled mini-batch loop minimizing the contrastive objective.

    A validation subset (``val_fraction`` of the input, seeded split) drives
    per-epoch metric logging and the final decision threshold.  Checkpoints
    are written every ``checkpoint_every`` epochs and at the end.  A
    non-finite loss aborts immediately, naming the epoch and batch.
    """
    if len(data) == 0:
        raise TrainingError("no training pairs")
    rng = np.random.default_rng(config.seed)
    n_val = math.floor(len(data) * config.val_fraction)
    holdout = rng.permutation(len(data))
    fit = data.subset(holdout[n_val:])
    val = data.subset(holdout[:n_val]) if n_val else fit
    if len(fit) == 0:
        raise TrainingError("validation fraction leaves no training pairs")

    loss_cfg = ContrastiveConfig(margin=config.margin, metric=config.metric)
    labels_by_pair = fit.labels
    history: List[EpochStats] = []
    threshold = config.margin / 2

    def write_checkpoint(tau: float) -> None:
        if checkpoint_path is None:
            return
        extras = dict(extra_config or {})
        extras["threshold"] = repr(float(tau))
        extras["metric"] = config.metric.value
        extras["margin"] = repr(config.margin)
        cfg, tensors = pack_model(model, optimizer, extras)
        save_checkpoint(checkpoint_path, cfg, tensors)

    for epoch in range(1, config.epochs + 1):
        model.set_training(True)
        order = rng.permutation(len(fit))
        total = 0.0
        for batch_index, start in enumerate(range(0, len(fit), config.batch_size)):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            d = siamese_forward(
                model,
                Tensor(fit.left[idx]),
                Tensor(fit.right[idx]),
                config.metric,
            )
            loss = contrastive_loss(loss_cfg, d, Tensor(labels_by_pair[idx]))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch} batch {batch_index}"
                )
            T.backward(loss)
            step(optimizer, model.parameters())
            total += value * idx.shape[0]

        d_val = pair_distances(model, val, config.metric, config.batch_size)
        threshold = select_threshold(d_val, val.labels, config.margin / 2)
        report = classify_and_report(d_val, val.labels, threshold)
        stats = EpochStats(
            epoch=epoch,
            loss=total / len(fit),
            val_f1=report.f1,
            val_recall=report.recall,
            val_precision=report.precision,
        )
        history.append(stats)
        if log is not None:
            log(stats.format())
        if epoch % config.checkpoint_every == 0 and epoch != config.epochs:
            write_checkpoint(threshold)

    if config.epochs == 0:
        d_val = pair_distances(model, val, config.metric, config.batch_size)
        threshold = select_threshold(d_val, val.labels, config.margin / 2)
    write_checkpoint(threshold)
    return TrainResult(threshold=threshold, history=history)


# ---------------------------------------------------------------------------
# Autoencoder baseline training
# ---------------------------------------------------------------------------

RECONSTRUCTION_EPSILON = 1e-7


def _bce_reconstruction(recon: Tensor, target: Tensor) -> Tensor:
    eps = RECONSTRUCTION_EPSILON
    keep = target * T.log(recon + eps) + (1.0 - target) * T.log(1.0 - recon + eps)
    return -keep.mean()


def train_autoencoder(
    state: AutoencoderState,
    images: np.ndarray,
    epochs: int = 10,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    seed: int = 0,
    log: Optional[Logger] = None,
) -> List[float]:
    """Adam-driven pixel BCE reconstruction; marks the state trained.

    Returns the per-epoch mean losses.
    """
    if images.ndim != 4 or images.shape[1] != 1:
        raise TrainingError(f"expected (N, 1, H, W) images, got {images.shape}")
    if images.shape[0] == 0:
        raise TrainingError("no images to train the autoencoder on")
    rng = np.random.default_rng(seed)
    optimizer = OptimizerState.create(OptimizerKind.ADAM, learning_rate=learning_rate)
    losses = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(images.shape[0])
        total = 0.0
        for batch_index, start in enumerate(range(0, images.shape[0], batch_size)):
            idx = order[start : start + batch_size]
            state.zero_grad()
            x = Tensor(images[idx])
            _, recon = autoencoder_forward(state, x)
            loss = _bce_reconstruction(recon, x)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch} batch {batch_index}"
                )
            T.backward(loss)
            step(optimizer, state.parameters())
            total += value * idx.shape[0]
        losses.append(total / images.shape[0])
        if log is not None:
            log(f"epoch={epoch} loss={losses[-1]:.6f}")
    state.trained = True
    return losses
