"""Threshold selection, classification metrics, and the two
image-similarity baselines.

The Siamese decision rule is "interact iff distance >= threshold":
training pushes interacting pairs apart, so large distance is evidence
FOR interaction.  The baselines run the opposite way — they score image
similarity, and similar structures are taken as evidence for
interaction — so SSIM and cosine predict interact above their mean,
and BCE (a dissimilarity) below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import GrayImage, PairExample
from .network import AutoencoderState, autoencoder_forward
from .tensor import Tensor

__all__ = [
    "SsimConfig",
    "SsimBreakdown",
    "PRCurve",
    "EvalReport",
    "ssim",
    "ssim_classify",
    "ae_similarity",
    "pr_curve",
    "classify_and_report",
    "cosine_similarity",
    "bce_dissimilarity",
]


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class SsimBreakdown:
    mu_a: float
    mu_b: float
    var_a: float
    var_b: float
    cov: float
    score: float


@dataclass
class PRCurve:
    """Precision/recall at every candidate threshold, plus the pick."""

    points: List[Tuple[float, float, float]]  # (threshold, precision, recall)
    selected_threshold: float


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    seed: Optional[int] = None
    epochs: Optional[int] = None

    def to_text(self) -> str:
        lines = [
            f"accuracy={self.accuracy:.6f}",
            f"precision={self.precision:.6f}",
            f"recall={self.recall:.6f}",
            f"f1={self.f1:.6f}",
            f"tp={self.tp}",
            f"fp={self.fp}",
            f"tn={self.tn}",
            f"fn={self.fn}",
            f"threshold={self.threshold:.6f}",
        ]
        if self.seed is not None:
            lines.append(f"seed={self.seed}")
        if self.epochs is not None:
            lines.append(f"epochs={self.epochs}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        values: Dict[str, str] = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            values[key] = value
        return cls(
            accuracy=float(values["accuracy"]),
            precision=float(values["precision"]),
            recall=float(values["recall"]),
            f1=float(values["f1"]),
            tp=int(values["tp"]),
            fp=int(values["fp"]),
            tn=int(values["tn"]),
            fn=int(values["fn"]),
            threshold=float(values["threshold"]),
            seed=int(values["seed"]) if "seed" in values else None,
            epochs=int(values["epochs"]) if "epochs" in values else None,
        )


# ---------------------------------------------------------------------------
# SSIM baseline
# ---------------------------------------------------------------------------


def _as_pixels(img) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.pixels.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> SsimBreakdown:
    """Global single-window structural similarity of two images."""
    pa, pb = _as_pixels(a), _as_pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image dimensions differ: {pa.shape} vs {pb.shape}")
    mu_a = pa.mean()
    mu_b = pb.mean()
    var_a = pa.var()
    var_b = pb.var()
    cov = ((pa - mu_a) * (pb - mu_b)).mean()
    c1, c2 = cfg.c1, cfg.c2
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return SsimBreakdown(
        mu_a=float(mu_a),
        mu_b=float(mu_b),
        var_a=float(var_a),
        var_b=float(var_b),
        cov=float(cov),
        score=float(score),
    )


def ssim_classify(
    pairs: Sequence[PairExample],
    images: Dict[str, GrayImage],
    cfg: SsimConfig = SsimConfig(),
) -> EvalReport:
    """SSIM baseline: interact iff pair SSIM >= the mean SSIM over pairs."""
    if not pairs:
        raise ValueError("cannot classify an empty pair list")
    scores = np.array(
        [ssim(images[p.a], images[p.b], cfg).score for p in pairs], dtype=np.float64
    )
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    threshold = float(scores.mean())
    return _report_from_predictions(scores >= threshold, labels, threshold)


# ---------------------------------------------------------------------------
# Autoencoder baseline
# ---------------------------------------------------------------------------

BCE_CLIP = 1e-7


def _encoder_features(state: AutoencoderState, img: GrayImage) -> np.ndarray:
    batch = Tensor(img.pixels.reshape(1, 1, img.height, img.width))
    features, _ = autoencoder_forward(state, batch)
    return features.data.reshape(-1).astype(np.float64)


def cosine_similarity(fa: np.ndarray, fb: np.ndarray) -> float:
    """Cosine of the angle between feature vectors; 0 if either is zero."""
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(fa, fb) / (na * nb))


def bce_dissimilarity(fa: np.ndarray, fb: np.ndarray) -> float:
    """Binary cross-entropy of fa as predictions against fb as targets."""
    p = np.clip(fa, BCE_CLIP, 1.0 - BCE_CLIP)
    t = fb
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def ae_similarity(
    state: AutoencoderState,
    pairs: Sequence[PairExample],
    images: Dict[str, GrayImage],
    criterion: str = "cosine",
) -> EvalReport:
    """Autoencoder-feature baseline over flattened encoder outputs.

    Cosine scores similarity (interact iff >= mean over pairs); BCE
    scores dissimilarity (interact iff < mean).
    """
    if criterion not in ("bce", "cosine"):
        raise ValueError(f"criterion must be 'bce' or 'cosine', got {criterion!r}")
    if not state.trained:
        raise ValueError("autoencoder state is untrained; run baseline training first")
    if not pairs:
        raise ValueError("cannot classify an empty pair list")

    cache: Dict[str, np.ndarray] = {}

    def feats(drug_id: str) -> np.ndarray:
        if drug_id not in cache:
            cache[drug_id] = _encoder_features(state, images[drug_id])
        return cache[drug_id]

    score_fn = cosine_similarity if criterion == "cosine" else bce_dissimilarity
    scores = np.array([score_fn(feats(p.a), feats(p.b)) for p in pairs], dtype=np.float64)
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    threshold = float(scores.mean())
    if criterion == "cosine":
        predictions = scores >= threshold
    else:
        predictions = scores < threshold
    return _report_from_predictions(predictions, labels, threshold)


# ---------------------------------------------------------------------------
# Threshold selection and reporting
# ---------------------------------------------------------------------------


def pr_curve(distances: Sequence[float], labels: Sequence[int]) -> PRCurve:
    """Precision/recall over all candidate thresholds; pick the F1 argmax.

    Candidates are the sorted unique distances; prediction is
    "interact iff distance >= threshold".  Ties in F1 go to the larger
    threshold, favoring precision.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if d.shape != y.shape or d.ndim != 1:
        raise ValueError("distances and labels must be equal-length 1-D sequences")
    total_pos = int(y.sum())
    if total_pos == 0 or total_pos == len(y):
        raise ValueError("pr_curve requires at least one positive and one negative label")

    # Sweep thresholds descending: with each new unique distance the
    # decision region grows, so tp/fp accumulate.
    order = np.argsort(-d, kind="stable")
    d_sorted = d[order]
    y_sorted = y[order]
    tp_cum = np.cumsum(y_sorted)
    # Last index of each run of equal distances = counts with D >= that value.
    boundaries = np.nonzero(np.append(d_sorted[1:] != d_sorted[:-1], True))[0]

    points: List[Tuple[float, float, float]] = []
    best_f1 = -1.0
    best_threshold = float(d_sorted[0])
    for idx in boundaries:
        threshold = float(d_sorted[idx])
        predicted = idx + 1
        tp = int(tp_cum[idx])
        precision = tp / predicted
        recall = tp / total_pos
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        points.append((threshold, precision, recall))
        if f1 > best_f1 or (f1 == best_f1 and threshold > best_threshold):
            best_f1 = f1
            best_threshold = threshold
    points.reverse()  # ascending thresholds
    return PRCurve(points=points, selected_threshold=best_threshold)


def classify_and_report(
    distances: Sequence[float],
    labels: Sequence[int],
    threshold: float,
    seed: Optional[int] = None,
    epochs: Optional[int] = None,
) -> EvalReport:
    """Confusion-matrix metrics under "interact iff distance >= threshold"."""
    if not math.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    return _report_from_predictions(d >= threshold, y, threshold, seed=seed, epochs=epochs)


def _report_from_predictions(
    predictions: np.ndarray,
    labels: np.ndarray,
    threshold: float,
    seed: Optional[int] = None,
    epochs: Optional[int] = None,
) -> EvalReport:
    pred = predictions.astype(bool)
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    n = tp + fp + tn + fn
    accuracy = (tp + tn) / n if n else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        threshold=threshold,
        seed=seed,
        epochs=epochs,
    )
