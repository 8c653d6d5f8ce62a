"""Embedding distances and the contrastive pair loss.

Training pushes interacting pairs (label 1) apart beyond a margin and
pulls non-interacting pairs (label 0) together, so larger distance means
more likely to interact.  All distances are differentiable through the
autodiff engine; Hellinger and Jaccard first map embeddings onto a
nonnegative, mean-normalized simplex since their formulas require
probability-like inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = ["DistanceKind", "ContrastiveConfig", "distance", "contrastive_loss"]

EPSILON = 1e-8


class DistanceKind(str, Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    HELLINGER = "hellinger"
    JACCARD = "jaccard"


@dataclass
class ContrastiveConfig:
    """Margin and metric for the pair loss."""

    margin: float = 1.0
    metric: DistanceKind = DistanceKind.EUCLIDEAN

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        self.metric = DistanceKind(self.metric)


def _normalized_nonnegative(e: Tensor) -> Tensor:
    """Clamp to nonnegative and divide by the mean, epsilon-guarded."""
    clamped = T.relu(e)
    denom = clamped.mean(axis=-1, keepdims=True) + EPSILON
    return clamped / denom


def distance(kind: DistanceKind, e1: Tensor, e2: Tensor) -> Tensor:
    """Distance between embedding vectors, reduced over the last axis.

    Accepts single vectors of shape (D,) or batches of shape (N, D);
    the result drops the last axis.
    """
    kind = DistanceKind(kind)
    if e1.shape != e2.shape:
        raise ShapeError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    if e1.ndim == 0 or e1.shape[-1] < 1:
        raise ShapeError("embeddings must have at least one component")

    if kind is DistanceKind.EUCLIDEAN:
        diff = e1 - e2
        return T.sqrt((diff * diff).sum(axis=-1))

    if kind is DistanceKind.MANHATTAN:
        return T.absolute(e1 - e2).sum(axis=-1)

    if kind is DistanceKind.HELLINGER:
        p1 = _normalized_nonnegative(e1)
        p2 = _normalized_nonnegative(e2)
        diff = T.sqrt(p1) - T.sqrt(p2)
        return T.sqrt(2.0 * (diff * diff).sum(axis=-1))

    if kind is DistanceKind.JACCARD:
        p1 = _normalized_nonnegative(e1)
        p2 = _normalized_nonnegative(e2)
        overlap = T.minimum(p1, p2).sum(axis=-1)
        union = T.maximum(p1, p2).sum(axis=-1)
        return overlap / (union + EPSILON)

    raise ValueError(f"unknown distance kind: {kind!r}")


def contrastive_loss(cfg: ContrastiveConfig, distances: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of (1-Y)/2 * D^2 + Y/2 * max(0, m - D)^2.

    Label 1 marks an interacting pair and contributes only while its
    distance is inside the margin; label 0 marks a non-interacting pair
    and contributes its squared distance.
    """
    if not isinstance(labels, Tensor):
        labels = Tensor(labels)
    y = labels.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary (0 or 1)")
    if distances.shape != labels.shape:
        raise ShapeError(
            f"distances shape {distances.shape} != labels shape {labels.shape}"
        )
    margin = float(cfg.margin)
    zero = Tensor(np.zeros_like(distances.data))
    hinge = T.maximum(margin - distances, zero)
    pull = (1.0 - labels) * 0.5 * distances * distances
    push = labels * 0.5 * hinge * hinge
    return (pull + push).mean()
