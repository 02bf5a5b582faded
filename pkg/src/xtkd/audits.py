"""Randomised property audits: gradients, the decoupled bound, product ranks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .distill import DistillMethod, tape_distill
from .linalg import effective_rank, svd
from .spectral import BoundReport, decoupled_bound, tape_spectral
from .tasks import tape_ce, tape_mse, tape_silog

__all__ = [
    "GradAuditRow",
    "BoundAudit",
    "RankAudit",
    "grad_cases",
    "grad_audit",
    "bound_audit",
    "rank_audit",
    "random_bound_instance",
]

GRAD_TOL = 1e-4
SPECTRAL_GRAD_TOL = 1e-3


@dataclass(frozen=True)
class GradAuditRow:
    name: str
    max_rel_err: float
    tol: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _weighted_sum(tape: ad.Tape, v: ad.Var, rng_seed: int) -> ad.Var:
    """Reduce a matrix-valued node to a scalar with fixed random weights."""
    c = np.random.default_rng(rng_seed).standard_normal(v.shape)
    return ad.sum_all(ad.mul(v, tape.const(c)))


def _spread_matrix(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """Random matrix with well separated singular values."""
    k = min(m, n)
    u, _ = np.linalg.qr(rng.standard_normal((m, k)))
    v, _ = np.linalg.qr(rng.standard_normal((n, k)))
    s = np.linspace(3.0, 0.5, k) * rng.uniform(0.8, 1.2)
    return (u * s) @ v.T


# Each case maps a seed to (graph, inputs, tolerance).
GradCase = Callable[[int], tuple[ad.TapeGraph, dict, float]]


def _unary(op, positive=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.2, 2.0, (4, 3)) if positive else rng.standard_normal((4, 3))
        g = ad.TapeGraph(lambda t, x: _weighted_sum(t, op(x), seed + 1), ("x",))
        return g, {"x": x}, GRAD_TOL
    return case


def _binary(op, shape_b):
    def case(seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal(shape_b)
        g = ad.TapeGraph(lambda t, a, b: _weighted_sum(t, op(a, b), seed + 1), ("a", "b"))
        return g, {"a": a, "b": b}, GRAD_TOL
    return case


def _scalar(op, positive=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.2, 2.0, (4, 3)) if positive else rng.standard_normal((4, 3))
        return ad.TapeGraph(lambda t, x: op(x), ("x",)), {"x": x}, GRAD_TOL
    return case


def _distill_case(kind):
    def case(seed):
        rng = np.random.default_rng(seed)
        m = DistillMethod(kind)
        a = rng.standard_normal((5, 3))
        b = rng.standard_normal((5, 3))
        if kind == "ensemble":
            p = [rng.standard_normal((3, 3)) for _ in range(m.n_projectors)]

            def build(t, a, b, p0, p1, p2):
                return tape_distill(m, [ad.matmul(a, q) for q in (p0, p1, p2)], [b, b, b])

            return ad.TapeGraph(build, ("a", "b", "p0", "p1", "p2")), {"a": a, "b": b, "p0": p[0], "p1": p[1], "p2": p[2]}, GRAD_TOL
        return ad.TapeGraph(lambda t, a, b: tape_distill(m, a, b), ("a", "b")), {"a": a, "b": b}, GRAD_TOL
    return case


def _ce_case(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=6)
    x = rng.standard_normal((6, 4))
    return ad.TapeGraph(lambda t, x: tape_ce(x, labels), ("x",)), {"x": x}, GRAD_TOL


def _silog_case(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 5.0, (5, 2))
    x = rng.standard_normal((5, 2))
    return ad.TapeGraph(lambda t, x: tape_silog(ad.exp(x), gt), ("x",)), {"x": x}, GRAD_TOL


def _mse_case(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((5, 2))
    x = rng.standard_normal((5, 2))
    return ad.TapeGraph(lambda t, x: tape_mse(x, y), ("x",)), {"x": x}, GRAD_TOL


def _spectral_case(seed):
    rng = np.random.default_rng(seed)
    z = _spread_matrix(rng, 6, 4)
    r = int(rng.integers(1, 5))
    return ad.TapeGraph(lambda t, z: tape_spectral(z, r), ("z",)), {"z": z}, SPECTRAL_GRAD_TOL


def grad_cases() -> dict[str, GradCase]:
    """Every tape op and fused loss, keyed by a short name."""
    return {
        "matmul": _binary(ad.matmul, (3, 2)),
        "transpose": _unary(ad.transpose),
        "add": _binary(ad.add, (4, 3)),
        "add_row_broadcast": _binary(ad.add, (1, 3)),
        "add_col_broadcast": _binary(ad.add, (4, 1)),
        "sub": _binary(ad.sub, (4, 3)),
        "sub_row_broadcast": _binary(ad.sub, (1, 3)),
        "scale": _unary(lambda x: ad.scale(x, -1.7)),
        "mul": _binary(ad.mul, (4, 3)),
        "tanh": _unary(ad.tanh),
        "relu": _unary(ad.relu),
        "row_softmax": _unary(ad.row_softmax),
        "log": _unary(ad.log, positive=True),
        "exp": _unary(ad.exp),
        "sq_frob_dist": _binary(ad.sq_frob_dist, (4, 3)),
        "sum_all": _scalar(ad.sum_all),
        "mean": _scalar(ad.mean),
        "fitnets": _distill_case("fitnets"),
        "at": _distill_case("at"),
        "pkt": _distill_case("pkt"),
        "ensemble": _distill_case("ensemble"),
        "ce": _ce_case,
        "silog": _silog_case,
        "mse": _mse_case,
        "spectral_tail": _spectral_case,
    }


def grad_audit(seeds: int = 20, eps: float = 1e-5) -> list[GradAuditRow]:
    rows = []
    for name, case in grad_cases().items():
        worst, tol = 0.0, GRAD_TOL
        for seed in range(seeds):
            graph, inputs, tol = case(seed)
            ad.forward(graph, inputs)
            worst = max(worst, ad.grad_check(graph, eps).max_rel_err)
        rows.append(GradAuditRow(name, worst, tol, seeds))
    return rows


# -- bound ---------------------------------------------------------------------

@dataclass(frozen=True)
class BoundAudit:
    reports: list[BoundReport]
    tol: float

    @property
    def min_slack(self) -> float:
        return min(r.slack for r in self.reports)

    @property
    def n_holds(self) -> int:
        return sum(r.holds for r in self.reports)


def random_bound_instance(rng: np.random.Generator):
    """Random ``(Z_s, Z_t, P)`` with ``P`` of random (possibly zero) rank."""
    n = int(rng.integers(3, 25))
    d_s = int(rng.integers(1, 10))
    d_t = int(rng.integers(1, 10))
    k = int(rng.integers(0, min(d_s, d_t) + 1))
    z_s = rng.standard_normal((n, d_s)) * rng.uniform(0.1, 3.0)
    z_t = rng.standard_normal((n, d_t)) * rng.uniform(0.1, 3.0)
    p = rng.standard_normal((d_t, k)) @ rng.standard_normal((k, d_s))
    return z_s, z_t, p


def bound_audit(n: int = 200, tol: float = 1e-6, seed: int = 0) -> BoundAudit:
    rng = np.random.default_rng(seed)
    reports = [decoupled_bound(*random_bound_instance(rng), tol=tol) for _ in range(n)]
    return BoundAudit(reports, tol)


# -- rank of products ----------------------------------------------------------

@dataclass(frozen=True)
class RankAudit:
    product_ranks: list[int]
    bounds: list[int]

    @property
    def violations(self) -> int:
        return sum(p > b for p, b in zip(self.product_ranks, self.bounds))


def _low_rank(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    k = int(rng.integers(0, min(m, n) + 1))
    return rng.standard_normal((m, k)) @ rng.standard_normal((k, n))


def rank_audit(n: int = 100, tol: float = 1e-8, seed: int = 0) -> RankAudit:
    """Check ``rank(AB) <= min(rank A, rank B)`` on random low-rank factors."""
    rng = np.random.default_rng(seed)
    prods, bounds = [], []
    for _ in range(n):
        m, k, q = (int(v) for v in rng.integers(1, 13, size=3))
        a, b = _low_rank(rng, m, k), _low_rank(rng, k, q)
        ra = effective_rank(svd(a).sigma, tol)
        rb = effective_rank(svd(b).sigma, tol)
        prods.append(effective_rank(svd(a @ b).sigma, tol))
        bounds.append(min(ra, rb))
    return RankAudit(prods, bounds)
