"""Dense matrix helpers and a one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is written from
scratch so the spectral tooling does not depend on LAPACK's sign and
ordering conventions.
"""
from __future__ import annotations

from typing import NamedTuple, TextIO

import numba
import numpy as np

from .exceptions import BoundsError, ContractError, DomainError, ShapeError

__all__ = [
    "SvdResult",
    "as_matrix",
    "matmul",
    "svd",
    "truncated_reconstruct",
    "frob_norm",
    "effective_rank",
    "write_matrix",
    "read_matrix",
    "format_matrix",
    "parse_matrix",
]

DEFAULT_RANK_TOL = 1e-6
_MAX_SWEEPS = 80


class SvdResult(NamedTuple):
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``sigma`` non-increasing."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 array (copying only if needed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@numba.njit(cache=True)
def _jacobi_sweeps(w: np.ndarray, v: np.ndarray, tol: float, max_sweeps: int) -> int:
    """Cyclic one-sided Jacobi on the columns of ``w`` (in place).

    Each column pair is rotated until ``|w_i . w_j| <= tol * |w_i| |w_j|``;
    the same rotations are accumulated into ``v``. Returns sweeps used.
    """
    m, n = w.shape
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += w[k, i] * w[k, i]
                    beta += w[k, j] * w[k, j]
                    gamma += w[k, i] * w[k, j]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    wi = w[k, i]
                    wj = w[k, j]
                    w[k, i] = c * wi - s * wj
                    w[k, j] = s * wi + c * wj
                for k in range(n):
                    vi = v[k, i]
                    vj = v[k, j]
                    v[k, i] = c * vi - s * vj
                    v[k, j] = s * vi + c * vj
        if not rotated:
            return sweep + 1
    return max_sweeps


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall matrix (rows >= cols).

    Columns are rotated pairwise until mutually orthogonal, after which the
    column norms are the singular values and the accumulated rotations form
    ``v``.
    """
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    _jacobi_sweeps(w, v, max(m, n) * np.finfo(np.float64).eps, _MAX_SWEEPS)
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]

    u = np.zeros_like(w)
    floor = sigma[0] * m * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0
    for k in range(n):
        col = w[:, k] / sigma[k] if sigma[k] > floor else np.zeros(m)
        # Re-orthogonalise against earlier columns; fills in null-space
        # directions when the column has collapsed.
        for _ in range(2):
            col = col - u[:, :k] @ (u[:, :k].T @ col)
        norm = np.linalg.norm(col)
        if norm < 0.5:
            col = _complete_basis(u[:, :k], m)
            norm = 1.0
        u[:, k] = col / norm
    return u, sigma, v


def _complete_basis(basis: np.ndarray, m: int) -> np.ndarray:
    for e in np.eye(m):
        col = e.copy()
        for _ in range(2):
            col = col - basis @ (basis.T @ col)
        norm = np.linalg.norm(col)
        if norm > 0.5:
            return col / norm
    raise ContractError("cannot extend orthonormal basis")  # pragma: no cover


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    for k in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, k]) > 1e-12)
        if nz.size and u[nz[0], k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]


def svd(a) -> SvdResult:
    """Thin SVD of ``a`` by one-sided Jacobi rotations.

    Returns ``min(rows, cols)`` singular triples sorted by decreasing
    singular value. The first clearly nonzero entry of every left singular
    vector is made non-negative so results are deterministic.
    """
    a = as_matrix(a)
    if a.shape[0] >= a.shape[1]:
        u, sigma, v = _jacobi_tall(a)
    else:
        v, sigma, u = _jacobi_tall(a.T)
    _fix_signs(u, v)
    return SvdResult(u, sigma, v)


def truncated_reconstruct(s: SvdResult, k: int) -> np.ndarray:
    """Rank-``k`` reconstruction from the leading ``k`` singular triples."""
    r = len(s.sigma)
    if not 0 <= k <= r:
        raise BoundsError(f"k={k} outside [0, {r}]")
    return (s.u[:, :k] * s.sigma[:k]) @ s.v[:, :k].T


def frob_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def effective_rank(sigma, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values at or above ``tol * sigma[0]``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if tol <= 0:
        raise ContractError(f"tol must be positive, got {tol}")
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    if np.any(np.diff(sigma) > 0):
        raise ContractError("singular values must be sorted in descending order")
    return int(np.count_nonzero(sigma >= tol * sigma[0]))


def format_matrix(a) -> str:
    """Text form: ``"rows cols"`` header then one line per row (17 sig. digits)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D array, got shape {a.shape}")
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines.extend(" ".join(f"{x:.17g}" for x in row) for row in a)
    return "\n".join(lines) + "\n"


def write_matrix(fh: TextIO, a) -> None:
    fh.write(format_matrix(a))


def read_matrix(fh: TextIO) -> np.ndarray:
    header = fh.readline().split()
    if len(header) != 2:
        raise ShapeError(f"bad matrix header {header!r}")
    rows, cols = int(header[0]), int(header[1])
    data = np.empty((rows, cols))
    for i in range(rows):
        vals = fh.readline().split()
        if len(vals) != cols:
            raise ShapeError(f"row {i}: expected {cols} values, got {len(vals)}")
        data[i] = [float(x) for x in vals]
    return data


def parse_matrix(text: str) -> np.ndarray:
    import io

    return read_matrix(io.StringIO(text))
