"""scikit-learn style estimators wrapping the pair-distance pipeline.

``X`` is always an array of image pairs shaped (n_pairs, 2, height,
width) with pixel values in [0, 1]; ``y`` holds binary interaction
labels where 1 means the two drugs interact.  Fitted classifiers
predict 1 when the learned embedding distance (or the dissimilarity
implied by the score) crosses the fitted threshold.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .eval import ssim
from .network import StnSpec, TowerSpec, init_model
from .objective import DistanceKind
from .optim import OptimizerKind, OptimizerState
from .training import PairBatch, TrainConfig, pair_distances, train

__all__ = ["SiameseInteractionClassifier", "SsimInteractionClassifier"]


def _validate_pairs(X, y=None, expected_size: Optional[int] = None):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"X must be (n_pairs, 2, height, width), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if expected_size is not None and X.shape[2] != expected_size:
        raise ValueError(
            f"images are {X.shape[2]}px, the estimator was fitted on {expected_size}px"
        )
    if y is None:
        return X, None
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError(f"y must be ({X.shape[0]},), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must contain only 0 and 1")
    return X, y.astype(np.float32)


def _as_batch(X, y=None) -> PairBatch:
    labels = np.zeros(X.shape[0], dtype=np.float32) if y is None else y
    return PairBatch(X[:, :1], X[:, 1:], labels)


class SiameseInteractionClassifier(ClassifierMixin, BaseEstimator):
    """Embedding-distance classifier over drug-structure image pairs.

    Trains a weight-sharing convolutional tower with the contrastive
    objective, then thresholds the pair distance; ``decision_function``
    is ``distance - threshold_`` so positive scores mean "interacts".
    """

    def __init__(
        self,
        conv_filters=(4, 8),
        kernel=3,
        pool=2,
        fc_sizes=(16, 8),
        use_stn=False,
        metric="euclidean",
        margin=1.0,
        optimizer="adam",
        learning_rate=1e-3,
        epochs=50,
        batch_size=32,
        val_fraction=0.0,
        random_state=0,
    ):
        self.conv_filters = conv_filters
        self.kernel = kernel
        self.pool = pool
        self.fc_sizes = fc_sizes
        self.use_stn = use_stn
        self.metric = metric
        self.margin = margin
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _validate_pairs(X, y)
        batch = _as_batch(X, y)
        spec = TowerSpec(
            input_size=X.shape[2],
            conv_filters=tuple(self.conv_filters),
            kernel=self.kernel,
            pool=self.pool,
            fc_sizes=tuple(self.fc_sizes),
        )
        stn_spec = StnSpec() if self.use_stn else None
        model = init_model(spec, stn_spec, seed=self.random_state)
        opt = OptimizerState.create(OptimizerKind(self.optimizer), self.learning_rate)
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            margin=self.margin,
            metric=DistanceKind(self.metric),
            val_fraction=self.val_fraction,
        )
        result = train(model, opt, batch, config)
        self.model_ = model
        self.threshold_ = result.threshold
        self.history_ = result.history
        self.input_size_ = X.shape[2]
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this SiameseInteractionClassifier instance is not fitted yet"
            )

    def decision_function(self, X):
        self._check_fitted()
        X, _ = _validate_pairs(X, expected_size=self.input_size_)
        distances = pair_distances(
            self.model_, _as_batch(X), DistanceKind(self.metric), self.batch_size
        )
        return distances - self.threshold_

    def predict(self, X):
        return (self.decision_function(X) >= 0.0).astype(int)


class SsimInteractionClassifier(ClassifierMixin, BaseEstimator):
    """Structural-similarity baseline with a fitted mean-score threshold.

    ``fit`` only records the mean pair SSIM of the training data; pairs
    scoring at or above it are predicted to interact.
    """

    def __init__(self):
        pass

    @staticmethod
    def _scores(X) -> np.ndarray:
        return np.array([ssim(pair[0], pair[1]).score for pair in X])

    def fit(self, X, y=None):
        X, _ = _validate_pairs(X, y)
        self.threshold_ = float(self._scores(X).mean())
        self.input_size_ = X.shape[2]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        if not hasattr(self, "threshold_"):
            raise NotFittedError(
                "this SsimInteractionClassifier instance is not fitted yet"
            )
        X, _ = _validate_pairs(X, expected_size=self.input_size_)
        return self._scores(X) - self.threshold_

    def predict(self, X):
        return (self.decision_function(X) >= 0.0).astype(int)
