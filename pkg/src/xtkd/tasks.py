"""Synthetic shared-latent tasks, task losses and depth metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import TextIO

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, DomainError, ShapeError

__all__ = [
    "SynthDataset",
    "MetricsReport",
    "synth_gen",
    "silog_loss",
    "ce_loss",
    "depth_metrics",
    "accuracy",
    "tape_silog",
    "tape_ce",
    "tape_mse",
    "write_dataset_csv",
    "read_dataset_csv",
    "TASKS",
]

TASKS = ("depth", "class", "reg")


@dataclass(frozen=True)
class SynthDataset:
    """Inputs and three task labels, all driven by the same latent factors."""

    x: np.ndarray
    latents: np.ndarray | None
    y_depth: np.ndarray
    y_class: np.ndarray
    y_reg: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "SynthDataset":
        return replace(
            self,
            x=self.x[rows],
            latents=None if self.latents is None else self.latents[rows],
            y_depth=self.y_depth[rows],
            y_class=self.y_class[rows],
            y_reg=self.y_reg[rows],
        )

    def split(self, n_train: int) -> tuple["SynthDataset", "SynthDataset"]:
        if not 0 < n_train < len(self):
            raise ContractError(f"n_train must lie in (0, {len(self)}), got {n_train}")
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))

    def target(self, task: str) -> np.ndarray:
        if task == "depth":
            return self.y_depth
        if task == "class":
            return self.y_class
        if task == "reg":
            return self.y_reg
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")

    def output_dim(self, task: str) -> int:
        return self.n_classes if task == "class" else self.target(task).shape[1]


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def synth_gen(seed: int, n: int, latent_dim: int, input_dim: int, classes: int,
              out_dim: int = 4, noise: float = 0.05, label_noise: float = 0.0) -> SynthDataset:
    """Draw ``n`` samples whose inputs and labels share ``latent_dim`` factors.

    ``x = latents @ W_lift + noise * N(0, 1)``; depth is ``1 + exp(latents @ W_d)``,
    class is ``argmax(latents @ W_c)``, regression is ``latents @ W_r``.
    ``label_noise`` multiplies depth by ``exp(label_noise * N(0, 1))`` and adds
    the same scale of Gaussian noise to the regression targets.
    """
    if min(n, latent_dim, input_dim, classes, out_dim) < 1:
        raise ContractError("sizes must be positive")
    if input_dim < latent_dim:
        raise ContractError(f"input_dim ({input_dim}) must be >= latent_dim ({latent_dim})")
    rng = np.random.default_rng(seed)
    w_lift = rng.standard_normal((latent_dim, input_dim)) / np.sqrt(latent_dim)
    w_d = rng.standard_normal((latent_dim, out_dim)) / np.sqrt(latent_dim)
    w_c = rng.standard_normal((latent_dim, classes))
    w_r = rng.standard_normal((latent_dim, out_dim)) / np.sqrt(latent_dim)

    latents = rng.uniform(-1.0, 1.0, size=(n, latent_dim))
    x = latents @ w_lift + noise * rng.standard_normal((n, input_dim))
    y_depth = 1.0 + np.exp(latents @ w_d)
    y_class = np.argmax(latents @ w_c, axis=1)
    y_reg = latents @ w_r
    if label_noise > 0:
        y_depth = y_depth * np.exp(label_noise * rng.standard_normal(y_depth.shape))
        y_reg = y_reg + label_noise * rng.standard_normal(y_reg.shape)
    return SynthDataset(x, latents, y_depth, y_class, y_reg, classes)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# -- SILog -------------------------------------------------------------------

def _silog_parts(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise DomainError("SILog needs strictly positive depths")
    g = np.log(pred) - np.log(gt)
    k = g.size
    s = g.sum()
    radicand = np.sum(g * g) / k + 0.15 * s * s / (k * k)
    return g, k, s, radicand


def silog_loss(pred, gt) -> float:
    """``10 * sqrt(mean(g^2) + 0.15 / K^2 * sum(g)^2)`` with ``g = log pred - log gt``.

    The plus sign on the second term is deliberate; see README.
    """
    _, _, _, radicand = _silog_parts(np.asarray(pred, float), np.asarray(gt, float))
    return float(10.0 * np.sqrt(radicand))


def tape_silog(pred: ad.Var, gt: np.ndarray) -> ad.Var:
    gt = np.asarray(gt, dtype=np.float64)
    p = pred.value
    g, k, s, radicand = _silog_parts(p, gt)
    loss = 10.0 * np.sqrt(radicand)

    def vjp(up):
        if radicand == 0.0:
            return (np.zeros_like(p),)
        dg = (5.0 / np.sqrt(radicand)) * (2.0 * g / k + 0.3 * s / (k * k))
        return (up[0, 0] * dg / p,)

    return pred.tape.record("silog", (pred,), np.array([[loss]]), vjp)


# -- cross-entropy -----------------------------------------------------------

def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def tape_ce(logits: ad.Var, labels) -> ad.Var:
    x = logits.value
    labels = _check_labels(x, labels)
    logp = _log_softmax(x)
    rows = np.arange(len(labels))
    loss = -np.mean(logp[rows, labels])

    def vjp(up):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (up[0, 0] * grad / len(labels),)

    return logits.tape.record("ce", (logits,), np.array([[loss]]), vjp)


def tape_mse(a: ad.Var, b) -> ad.Var:
    """Mean squared elementwise difference."""
    n = a.value.size
    return ad.scale(ad.sq_frob_dist(a, b), 1.0 / n)


# -- depth metrics -----------------------------------------------------------

def depth_metrics(pred, gt, mask=None) -> MetricsReport:
    """Standard monocular-depth error and threshold-accuracy metrics.

    ``mask`` selects valid pixels; all entries are valid by default.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, gt = pred[mask], gt[mask]
    pred, gt = pred.ravel(), gt.ravel()
    if pred.size == 0:
        raise ContractError("no valid pixels")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise DomainError("depth metrics need strictly positive depths")
    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff * diff / gt)),
        rms=float(np.sqrt(np.mean(diff * diff))),
        rms_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


# -- CSV ---------------------------------------------------------------------

def write_dataset_csv(fh: TextIO, ds: SynthDataset) -> None:
    d, m, r = ds.x.shape[1], ds.y_depth.shape[1], ds.y_reg.shape[1]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(
        [f"x_{i}" for i in range(d)] + [f"ydepth_{i}" for i in range(m)]
        + ["yclass"] + [f"yreg_{i}" for i in range(r)]
    )
    for i in range(len(ds)):
        writer.writerow(
            [repr(float(v)) for v in ds.x[i]] + [repr(float(v)) for v in ds.y_depth[i]]
            + [int(ds.y_class[i])] + [repr(float(v)) for v in ds.y_reg[i]]
        )


def read_dataset_csv(fh: TextIO, n_classes: int | None = None) -> SynthDataset:
    reader = csv.reader(fh)
    header = next(reader)
    cols = {name: i for i, name in enumerate(header)}
    if "yclass" not in cols:
        raise ContractError("dataset CSV lacks a yclass column")
    xi = [cols[h] for h in header if h.startswith("x_")]
    di = [cols[h] for h in header if h.startswith("ydepth_")]
    ri = [cols[h] for h in header if h.startswith("yreg_")]
    rows = [row for row in reader if row]
    table = np.array([[float(v) for v in row] for row in rows])
    y_class = table[:, cols["yclass"]].astype(np.int64)
    k = n_classes if n_classes is not None else int(y_class.max()) + 1
    return SynthDataset(table[:, xi], None, table[:, di], y_class, table[:, ri], k)
