"""scikit-learn style wrappers around the training loops."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import models
from .distill import DIRECTIONS, METHODS, DistillMethod, train_run
from .exceptions import ConfigError, DomainError
from .models import InitSpec, MlpNet
from .tasks import SynthDataset

__all__ = ["SpectralMLPRegressor", "DistilledMLPRegressor"]


def _dataset(x: np.ndarray, y: np.ndarray) -> SynthDataset:
    zeros = np.zeros(len(x), dtype=np.int64)
    return SynthDataset(x, None, y, zeros, y, 1)


class _MLPBase(BaseEstimator, RegressorMixin, TransformerMixin):
    """Shared fit/predict/transform plumbing.

    ``transform`` returns encoder features, so a fitted estimator can act as
    a feature extractor or as the teacher of another estimator.
    """

    def _widths(self, n_in: int, n_out: int) -> list[int]:
        return [n_in, self.hidden, self.feature_dim, self.hidden, n_out]

    def _check_params(self):
        if self.task not in ("reg", "depth"):
            raise ConfigError(f"task must be 'reg' or 'depth', got {self.task!r}")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")

    def _prepare(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        self._check_params()
        self._y_1d = y.ndim == 1
        y2 = y.reshape(len(y), -1)
        if self.task == "depth" and np.any(y2 <= 0):
            raise DomainError("depth targets must be strictly positive")
        self.n_features_in_ = X.shape[1]
        return X, y2

    def _net(self, n_in: int, n_out: int) -> MlpNet:
        return models.mlp_new(self._widths(n_in, n_out), 2, InitSpec(seed=self.random_state))

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = models.forward(self.net_, X)
        if self.task == "depth":
            out = np.exp(out)
        return out[:, 0] if self._y_1d else out

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return models.encode(self.net_, X)


class SpectralMLPRegressor(_MLPBase):
    """Encoder/decoder MLP with an optional penalty on its trailing feature spectrum.

    Parameters
    ----------
    hidden : int
        Width of the hidden layers on either side of the feature layer.
    feature_dim : int
        Width of the encoder output.
    spectral_r : int or None
        1-based index of the first singular triple of the feature matrix
        that is penalised. ``None`` trains without the penalty.
    spectral_weight : float
        Multiplier on the penalty.
    task : {"reg", "depth"}
        ``"reg"`` fits squared error; ``"depth"`` fits positive targets in
        log space with the scale-invariant log loss.
    epochs, lr : int, float
        Full-batch gradient descent budget and step size.
    weight_decay : float
        Decoupled shrinkage applied after each step.
    random_state : int
        Seed for the weight initialisation.
    """

    def __init__(self, hidden=32, feature_dim=16, spectral_r=None, spectral_weight=1.0, task="reg",
                 epochs=500, lr=0.01, weight_decay=0.0, random_state=0):
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.spectral_r = spectral_r
        self.spectral_weight = spectral_weight
        self.task = task
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._prepare(X, y)
        if self.spectral_r is not None and not 1 <= self.spectral_r <= min(self.feature_dim, len(X)):
            raise ConfigError(f"spectral_r must lie in [1, {min(self.feature_dim, len(X))}]")
        net = self._net(X.shape[1], y.shape[1])
        ds = _dataset(X, y)
        self.record_ = train_run(net, None, ds, self.task, None, "inverted", self.epochs, self.lr,
                                 self.random_state, spectral_r=self.spectral_r,
                                 spectral_weight=self.spectral_weight, weight_decay=self.weight_decay)
        self.net_ = net
        return self


class DistilledMLPRegressor(_MLPBase):
    """Encoder/decoder MLP whose features are distilled from a frozen teacher.

    Parameters
    ----------
    teacher : fitted estimator with ``transform``, or a frozen ``MlpNet``
        Source of teacher features for the training inputs.
    method : {"fitnets", "at", "pkt", "ensemble"}
    direction : {"inverted", "traditional"}
        ``"inverted"`` maps teacher features into the student space.
    distill_weight : float
    hidden, feature_dim, task, epochs, lr, weight_decay, random_state
        As in :class:`SpectralMLPRegressor`.
    """

    def __init__(self, teacher=None, method="fitnets", direction="inverted", distill_weight=1.0,
                 hidden=32, feature_dim=16, task="reg", epochs=500, lr=0.01, weight_decay=0.0,
                 random_state=0):
        self.teacher = teacher
        self.method = method
        self.direction = direction
        self.distill_weight = distill_weight
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.task = task
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _teacher_net(self, n_in: int) -> MlpNet:
        t = self.teacher
        if isinstance(t, MlpNet):
            if not t.frozen:
                raise ConfigError("teacher MlpNet must be frozen")
            return t
        check_is_fitted(t, "net_")
        if t.n_features_in_ != n_in:
            raise ValueError(f"teacher expects {t.n_features_in_} features, X has {n_in}")
        return t.net_.copy().freeze()

    def fit(self, X, y):
        X, y = self._prepare(X, y)
        if self.teacher is None:
            raise ConfigError("a teacher is required")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")
        teacher = self._teacher_net(X.shape[1])
        net = self._net(X.shape[1], y.shape[1])
        self.record_ = train_run(net, teacher, _dataset(X, y), self.task, DistillMethod(self.method),
                                 self.direction, self.epochs, self.lr, self.random_state,
                                 distill_weight=self.distill_weight, weight_decay=self.weight_decay)
        self.projectors_ = self.record_.projectors
        self.net_ = net
        return self
