"""Scikit-learn style estimators wrapping the functional core.

``ConvNetClassifier`` and ``DeepEnsembleClassifier`` follow the sklearn
contract (no work in __init__, fitted attributes carry a trailing
underscore, ``get_params``/``set_params``/``clone`` work), so the models
compose with pipelines and model-selection utilities. X is a stack of IQ
frames with shape (n_samples, frame_len, 2).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import ensemble, nncore
from .nncore import TrainConfig
from .seeding import derive_seed

_ARCHITECTURES = {
    "desk": nncore.desk_architecture,
    "paper": nncore.paper_architecture,
}


def check_iq_array(X) -> np.ndarray:
    """Validate a stack of IQ frames: 3-D, trailing axis of size 2, finite."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[2] != 2:
        raise ValueError(f"X must have shape (n_samples, frame_len, 2), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X must contain at least one frame")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    return X


def _encode_labels(y, classes: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(classes, y)
    if np.any(classes[idx] != np.asarray(y)):
        raise ValueError("y contains labels unseen during fit")
    return idx


class ConvNetClassifier(BaseEstimator, ClassifierMixin):
    """Single CNN classifier trained with plain SGD."""

    def __init__(
        self,
        architecture: str = "desk",
        epochs: int = 15,
        batch_size: int = 64,
        learning_rate: float = 0.01,
        init_seed: int = 0,
        shuffle_seed: int = 0,
        precision: str = "f32",
    ):
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.init_seed = init_seed
        self.shuffle_seed = shuffle_seed
        self.precision = precision

    def _specs(self, frame_len: int, n_classes: int):
        if self.architecture not in _ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        return _ARCHITECTURES[self.architecture](frame_len, n_classes)

    def fit(self, X, y):
        X = check_iq_array(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be one label per frame")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        y_idx = _encode_labels(y, self.classes_)
        specs = self._specs(X.shape[1], self.classes_.size)
        params = nncore.init_params(specs, self.init_seed, self.precision)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            shuffle_seed=self.shuffle_seed,
        )
        self.model_, self.loss_trace_ = nncore.train_arrays(params, X, y_idx, cfg)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting")

    def predict_proba(self, X):
        self._check_fitted()
        return nncore.forward_batch(self.model_, check_iq_array(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class DeepEnsembleClassifier(BaseEstimator, ClassifierMixin):
    """Equal-weight deep ensemble of independently seeded CNNs.

    ``predict_proba`` returns the aggregated mean distribution;
    ``predict_with_uncertainty`` additionally exposes the per-class sample
    variance across members.
    """

    def __init__(
        self,
        n_members: int = 5,
        architecture: str = "desk",
        epochs: int = 15,
        batch_size: int = 64,
        learning_rate: float = 0.01,
        master_seed: int = 0,
        precision: str = "f32",
        workers: int = 1,
    ):
        self.n_members = n_members
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.master_seed = master_seed
        self.precision = precision
        self.workers = workers

    def fit(self, X, y):
        X = check_iq_array(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be one label per frame")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        y_idx = _encode_labels(y, self.classes_)
        if self.architecture not in _ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        specs = _ARCHITECTURES[self.architecture](X.shape[1], self.classes_.size)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            shuffle_seed=derive_seed(self.master_seed, 0, 1),
        )
        members = ensemble.train_members_arrays(
            X,
            y_idx,
            specs,
            self.n_members,
            cfg,
            self.master_seed,
            self.precision,
            self.workers,
        )
        self.ensemble_ = ensemble.EnsembleModel(
            members, np.full(self.n_members, 1.0 / self.n_members)
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "ensemble_"):
            raise NotFittedError("call fit before predicting")

    def predict_proba(self, X):
        self._check_fitted()
        return ensemble.predict_batch(self.ensemble_, check_iq_array(X)).mean_probs

    def predict_with_uncertainty(self, X):
        """(mean_probs, per_class_variance) arrays, both (n_samples, C)."""
        self._check_fitted()
        pred = ensemble.predict_batch(self.ensemble_, check_iq_array(X))
        return pred.mean_probs, pred.per_class_variance

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
