"""Spectral tail regulariser, the decoupled distillation bound, and
singular-spectrum tracking of projector weights."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import autodiff as ad
from .exceptions import BoundsError, DegeneracyError, ShapeError
from .linalg import as_matrix, effective_rank, frob_norm, svd

__all__ = [
    "BoundReport",
    "SpectrumTrace",
    "spectral_reg_loss",
    "spectral_reg_grad",
    "tape_spectral",
    "decoupled_bound",
    "track_spectrum",
    "write_trace_csv",
    "read_trace_csv",
    "BOUND_TOL",
    "PLOT_RANK_TOL",
]

BOUND_TOL = 1e-6
PLOT_RANK_TOL = 1e-2
GAP_TOL = 1e-8


def _tail(z: np.ndarray, r: int):
    s = svd(z)
    rmax = len(s.sigma)
    if not 1 <= r <= rmax:
        raise BoundsError(f"r={r} outside [1, {rmax}]")
    tail = (s.u[:, r - 1:] * s.sigma[r - 1:]) @ s.v[:, r - 1:].T
    return s, tail


def spectral_reg_loss(z, r: int) -> float:
    """Frobenius norm of the part of ``z`` carried by singular triples ``r, r+1, ...``.

    ``r`` is 1-based: ``r=1`` penalises all of ``z``, larger ``r`` keeps the
    leading ``r - 1`` components free.
    """
    _, tail = _tail(as_matrix(z, "z"), r)
    return frob_norm(tail)


def _check_gap(sigma: np.ndarray, r: int) -> None:
    if r >= 2 and r - 1 < len(sigma):
        if sigma[r - 2] - sigma[r - 1] <= GAP_TOL * sigma[0]:
            raise DegeneracyError(
                f"singular gap sigma_{r - 1} - sigma_{r} = {sigma[r - 2] - sigma[r - 1]:.3e} too small"
            )


def spectral_reg_grad(z, r: int) -> np.ndarray:
    """Gradient of :func:`spectral_reg_loss` with the leading subspace held fixed.

    Equals ``tail / ||tail||``; the norm is clamped at 1e-12 so an empty
    tail gives a zero gradient.
    """
    z = as_matrix(z, "z")
    s, tail = _tail(z, r)
    _check_gap(s.sigma, r)
    return tail / max(frob_norm(tail), 1e-12)


def tape_spectral(z: ad.Var, r: int) -> ad.Var:
    """Record the tail-norm loss on ``z``'s tape.

    Raises :class:`DegeneracyError` when the split at ``r`` is degenerate,
    before anything is recorded.
    """
    s, tail = _tail(z.value, r)
    _check_gap(s.sigma, r)
    norm = frob_norm(tail)
    direction = tail / max(norm, 1e-12)
    return z.tape.record("spectral_tail", (z,), np.array([[norm]]), lambda g: (g[0, 0] * direction,))


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    kt: float
    reg: float
    slack: float
    k_set_size: int

    @property
    def holds(self) -> bool:
        return self.slack >= -1e-9


def _weights(p) -> np.ndarray:
    return np.asarray(getattr(p, "weights", p), dtype=np.float64)


def decoupled_bound(z_s, z_t, p, tol: float = BOUND_TOL) -> BoundReport:
    """Evaluate both sides of the knowledge-transfer + regularisation bound.

    ``p`` is an inverted projector (``d_t x d_s``) or its weight matrix. The
    retained set ``k`` holds indices whose projected-teacher singular value
    is at least ``tol`` times the largest; triples are paired by sorted index.
    """
    z_s = as_matrix(z_s, "z_s")
    z_t = as_matrix(z_t, "z_t")
    w = _weights(p)
    if z_s.shape[0] != z_t.shape[0] or w.shape != (z_t.shape[1], z_s.shape[1]):
        raise ShapeError(f"incompatible shapes z_s {z_s.shape}, z_t {z_t.shape}, P {w.shape}")
    zbar = z_t @ w
    sb = svd(zbar)
    ss = svd(z_s)
    if sb.sigma[0] > 0:
        k = int(np.count_nonzero(sb.sigma >= tol * sb.sigma[0]))
    else:
        k = 0
    teacher_part = (sb.u[:, :k] * sb.sigma[:k]) @ sb.v[:, :k].T
    student_head = (ss.u[:, :k] * ss.sigma[:k]) @ ss.v[:, :k].T
    student_tail = (ss.u[:, k:] * ss.sigma[k:]) @ ss.v[:, k:].T
    lhs = frob_norm(z_s - zbar)
    kt = frob_norm(teacher_part - student_head)
    reg = frob_norm(student_tail)
    return BoundReport(lhs, kt, reg, kt + reg - lhs, k)


@dataclass
class SpectrumTrace:
    epochs: list[int] = field(default_factory=list)
    spectra: list[np.ndarray] = field(default_factory=list)
    raw: list[np.ndarray] = field(default_factory=list)
    ranks: list[int] = field(default_factory=list)
    tol: float = PLOT_RANK_TOL

    def final_rank(self) -> int:
        return self.ranks[-1]


def track_spectrum(p, epoch: int, trace: SpectrumTrace) -> SpectrumTrace:
    """Append the normalised singular spectrum of ``p`` and its effective rank."""
    sigma = svd(_weights(p)).sigma
    normed = sigma / sigma[0] if sigma[0] > 0 else np.zeros_like(sigma)
    trace.epochs.append(int(epoch))
    trace.spectra.append(normed)
    trace.raw.append(sigma)
    trace.ranks.append(effective_rank(sigma, trace.tol))
    return trace


def write_trace_csv(fh: TextIO, trace: SpectrumTrace) -> None:
    r = len(trace.spectra[0]) if trace.spectra else 0
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["epoch", "eff_rank"] + [f"sigma_{i}" for i in range(r)] + [f"raw_sigma_{i}" for i in range(r)])
    for e, rank, s, raw in zip(trace.epochs, trace.ranks, trace.spectra, trace.raw):
        writer.writerow([e, rank] + [repr(float(v)) for v in s] + [repr(float(v)) for v in raw])


def read_trace_csv(fh: TextIO, tol: float = PLOT_RANK_TOL) -> SpectrumTrace:
    reader = csv.reader(fh)
    header = next(reader)
    r = sum(1 for h in header if h.startswith("sigma_"))
    trace = SpectrumTrace(tol=tol)
    for row in reader:
        if not row:
            continue
        trace.epochs.append(int(row[0]))
        trace.ranks.append(int(row[1]))
        trace.spectra.append(np.array([float(v) for v in row[2:2 + r]]))
        trace.raw.append(np.array([float(v) for v in row[2 + r:2 + 2 * r]]))
    return trace
