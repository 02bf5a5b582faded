"""Feature projectors, distillation distances and the training loops."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import autodiff as ad
from . import models
from .exceptions import ContractError, DegeneracyError, FrozenError, NumericError, ShapeError
from .models import MlpNet
from .spectral import SpectrumTrace, tape_spectral, track_spectrum
from .tasks import SynthDataset, accuracy, ce_loss, depth_metrics, silog_loss, tape_ce, tape_mse, tape_silog

__all__ = [
    "INVERTED",
    "TRADITIONAL",
    "METHODS",
    "Projector",
    "DistillMethod",
    "RunRecord",
    "project",
    "distill_loss",
    "tape_distill",
    "total_loss",
    "train_run",
    "linear_map_experiment",
    "task_loss",
    "predict_task",
    "write_record_csv",
    "read_record_csv",
]

log = logging.getLogger(__name__)

INVERTED = "inverted"
TRADITIONAL = "traditional"
DIRECTIONS = (INVERTED, TRADITIONAL)
METHODS = ("fitnets", "at", "pkt", "ensemble")
_NORM_EPS = 1e-12


# -- projector -----------------------------------------------------------------

@dataclass
class Projector:
    """Learnable linear map between student and teacher feature spaces.

    Inverted projectors map teacher features into the student space
    (``d_t x d_s``); traditional ones map student features into the teacher
    space (``d_s x d_t``).
    """

    weights: np.ndarray
    direction: str
    d_s: int
    d_t: int

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ContractError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.weights.shape != self.expected_shape(self.direction, self.d_s, self.d_t):
            raise ShapeError(
                f"{self.direction} projector for d_s={self.d_s}, d_t={self.d_t} "
                f"needs shape {self.expected_shape(self.direction, self.d_s, self.d_t)}, got {self.weights.shape}"
            )

    @staticmethod
    def expected_shape(direction: str, d_s: int, d_t: int) -> tuple[int, int]:
        return (d_t, d_s) if direction == INVERTED else (d_s, d_t)

    @classmethod
    def new(cls, d_s: int, d_t: int, direction: str, seed: int = 0) -> "Projector":
        """Uniform fan-in initialisation, like the MLP layers."""
        shape = cls.expected_shape(direction, d_s, d_t)
        bound = 1.0 / np.sqrt(shape[0])
        w = np.random.default_rng(seed).uniform(-bound, bound, size=shape)
        return cls(w, direction, d_s, d_t)


def _align(direction: str, w, zs, zt):
    if direction == INVERTED:
        return zs, zt @ w
    return zs @ w, zt


def project(p: Projector, z_student, z_teacher) -> tuple[np.ndarray, np.ndarray]:
    """Bring student and teacher features into a common space."""
    zs = np.asarray(z_student, dtype=np.float64)
    zt = np.asarray(z_teacher, dtype=np.float64)
    if zs.ndim != 2 or zt.ndim != 2 or zs.shape[1] != p.d_s or zt.shape[1] != p.d_t or zs.shape[0] != zt.shape[0]:
        raise ShapeError(
            f"features {zs.shape} / {zt.shape} do not match projector dims d_s={p.d_s}, d_t={p.d_t}"
        )
    return _align(p.direction, p.weights, zs, zt)


# -- distances ---------------------------------------------------------------

@dataclass(frozen=True)
class DistillMethod:
    kind: str = "fitnets"
    ensemble_size: int = 3

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ContractError(f"unknown distillation method {self.kind!r}; expected one of {METHODS}")
        if self.ensemble_size < 1:
            raise ContractError("ensemble_size must be >= 1")

    @property
    def n_projectors(self) -> int:
        return self.ensemble_size if self.kind == "ensemble" else 1


def _attention(x: np.ndarray):
    s = x * x
    norm = np.sqrt(np.sum(s * s, axis=1, keepdims=True))
    denom = np.maximum(norm, _NORM_EPS)
    return s / denom, denom


def _attention_vjp(x, n, denom, g):
    gs = (g - n * np.sum(n * g, axis=1, keepdims=True)) / denom
    gs = np.where(denom > _NORM_EPS, gs, g / denom)
    return 2.0 * x * gs


def _similarity_probs(x: np.ndarray):
    """Row-stochastic matrix of shifted cosine similarities, zero diagonal."""
    norm = np.maximum(np.sqrt(np.sum(x * x, axis=1, keepdims=True)), _NORM_EPS)
    n = x / norm
    k = 0.5 * (n @ n.T + 1.0)
    np.fill_diagonal(k, 0.0)
    rowsum = k.sum(axis=1, keepdims=True)
    if np.any(rowsum <= 0):
        # every other row is antipodal: no similarity distribution exists
        raise NumericError("PKT similarity row sums to zero")
    return k / rowsum, (n, norm, rowsum)


def _similarity_vjp(p, cache, g):
    n, norm, rowsum = cache
    gk = (g - np.sum(g * p, axis=1, keepdims=True)) / rowsum
    np.fill_diagonal(gk, 0.0)
    gc = 0.5 * gk
    gn = (gc + gc.T) @ n
    gx = (gn - n * np.sum(n * gn, axis=1, keepdims=True)) / norm
    return np.where(norm > _NORM_EPS, gx, gn / norm)


def _kl_rows(q: np.ndarray, p: np.ndarray) -> float:
    b = q.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(q / p), 0.0)
    np.fill_diagonal(terms, 0.0)
    return float(terms.sum() / b)


def _fitnets(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.mean(d * d))


def _at(a: np.ndarray, b: np.ndarray) -> float:
    na, _ = _attention(a)
    nb, _ = _attention(b)
    return float(np.mean((na - nb) ** 2))


def _pkt(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[0] < 2:
        raise ContractError("PKT needs a batch of at least 2 rows")
    p, _ = _similarity_probs(a)
    q, _ = _similarity_probs(b)
    return _kl_rows(q, p)


def _pairs(a, b):
    if isinstance(a, np.ndarray) and a.ndim == 2:
        a, b = [a], [b]
    pairs = []
    for ai, bi in zip(a, b, strict=True):
        ai = np.asarray(ai, dtype=np.float64)
        bi = np.asarray(bi, dtype=np.float64)
        if ai.shape != bi.shape:
            raise ShapeError(f"aligned features differ in shape: {ai.shape} vs {bi.shape}")
        pairs.append((ai, bi))
    return pairs


def distill_loss(m: DistillMethod, a, b) -> float:
    """Distance between aligned student features ``a`` and teacher features ``b``.

    For the ensemble method ``a`` and ``b`` may be sequences holding one
    aligned pair per projector; the result is the mean FitNets distance.
    PKT treats the teacher similarities as the target distribution.
    """
    pairs = _pairs(a, b)
    if m.kind == "ensemble":
        return float(np.mean([_fitnets(x, y) for x, y in pairs]))
    if len(pairs) != 1:
        raise ContractError(f"{m.kind} takes a single aligned pair")
    x, y = pairs[0]
    return {"fitnets": _fitnets, "at": _at, "pkt": _pkt}[m.kind](x, y)


def _tape_at(a: ad.Var, b: ad.Var) -> ad.Var:
    av, bv = a.value, b.value
    na, da = _attention(av)
    nb, db = _attention(bv)
    diff = na - nb
    size = diff.size

    def vjp(g):
        gn = 2.0 * g[0, 0] * diff / size
        return _attention_vjp(av, na, da, gn), _attention_vjp(bv, nb, db, -gn)

    return a.tape.record("at", (a, b), np.array([[np.mean(diff * diff)]]), vjp)


def _tape_pkt(a: ad.Var, b: ad.Var) -> ad.Var:
    av, bv = a.value, b.value
    if av.shape[0] < 2:
        raise ContractError("PKT needs a batch of at least 2 rows")
    p, pc = _similarity_probs(av)
    q, qc = _similarity_probs(bv)
    batch = av.shape[0]
    loss = _kl_rows(q, p)

    def vjp(g):
        scale = g[0, 0] / batch
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(q > 0, -q / p, 0.0) * scale
            gq = np.where(q > 0, np.log(q / p) + 1.0, 0.0) * scale
        np.fill_diagonal(gp, 0.0)
        np.fill_diagonal(gq, 0.0)
        return _similarity_vjp(p, pc, gp), _similarity_vjp(q, qc, gq)

    return a.tape.record("pkt", (a, b), np.array([[loss]]), vjp)


def tape_distill(m: DistillMethod, a, b) -> ad.Var:
    """Tape version of :func:`distill_loss`; ``a``/``b`` are Vars or lists of Vars."""
    if isinstance(a, ad.Var):
        a, b = [a], [b]
    for x, y in zip(a, b, strict=True):
        if x.shape != y.shape:
            raise ShapeError(f"aligned features differ in shape: {x.shape} vs {y.shape}")
    if m.kind == "ensemble":
        total = tape_mse(a[0], b[0])
        for x, y in zip(a[1:], b[1:]):
            total = ad.add(total, tape_mse(x, y))
        return ad.scale(total, 1.0 / len(a))
    if len(a) != 1:
        raise ContractError(f"{m.kind} takes a single aligned pair")
    if m.kind == "fitnets":
        return tape_mse(a[0], b[0])
    if m.kind == "at":
        return _tape_at(a[0], b[0])
    return _tape_pkt(a[0], b[0])


def total_loss(task: float, distill: float) -> float:
    """Unit-weighted sum of task and distillation losses."""
    if not (np.isfinite(task) and np.isfinite(distill)):
        raise NumericError(f"non-finite loss component: task={task}, distill={distill}")
    return float(task) + float(distill)


# -- task heads ----------------------------------------------------------------

def tape_task_loss(task: str, out: ad.Var, target) -> ad.Var:
    """Depth heads predict log-depth; the loss sees ``exp(out)``."""
    if task == "depth":
        return tape_silog(ad.exp(out), target)
    if task == "class":
        return tape_ce(out, target)
    if task == "reg":
        return tape_mse(out, target)
    raise ContractError(f"unknown task {task!r}")


def predict_task(task: str, out: np.ndarray) -> np.ndarray:
    if task == "depth":
        return np.exp(out)
    if task == "class":
        return np.argmax(out, axis=1)
    return out


def task_loss(task: str, out: np.ndarray, target) -> float:
    if task == "depth":
        return silog_loss(np.exp(out), target)
    if task == "class":
        return ce_loss(out, target)
    return float(np.mean((out - target) ** 2))


def evaluate(task: str, out: np.ndarray, target) -> dict[str, float]:
    metrics = {"val_loss": task_loss(task, out, target)}
    if task == "depth":
        metrics.update(depth_metrics(np.exp(out), target).as_dict())
    elif task == "class":
        metrics["accuracy"] = accuracy(out, target)
    return metrics


# -- run records ---------------------------------------------------------------

@dataclass
class RunRecord:
    """Per-epoch log of one seeded training run."""

    seed: int
    config_hash: str = ""
    epochs: list[int] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    distill_loss: list[float] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    metrics: list[dict[str, float]] = field(default_factory=list)
    sigma: list[np.ndarray] = field(default_factory=list)
    trace: SpectrumTrace | None = None
    projectors: list[Projector] = field(default_factory=list)
    skipped_spectral: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def final(self, key: str) -> float:
        return self.metrics[-1][key]

    def append(self, epoch, task, distill, metrics, sigma=None):
        if self.epochs and epoch <= self.epochs[-1]:
            raise ContractError("epochs must be strictly increasing")
        self.epochs.append(int(epoch))
        self.task_loss.append(float(task))
        self.distill_loss.append(float(distill))
        self.total_loss.append(total_loss(task, distill))
        self.metrics.append(dict(metrics))
        self.sigma.append(np.asarray(sigma if sigma is not None else [], dtype=np.float64))


def write_record_csv(fh: TextIO, rec: RunRecord) -> None:
    metric_keys = list(rec.metrics[0]) if rec.metrics else []
    r = max((len(s) for s in rec.sigma), default=0)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["epoch", "task_loss", "distill_loss", "total_loss"] + metric_keys + [f"sigma_{i}" for i in range(r)])
    for i, e in enumerate(rec.epochs):
        sig = [repr(float(v)) for v in rec.sigma[i]] + [""] * (r - len(rec.sigma[i]))
        writer.writerow(
            [e, repr(rec.task_loss[i]), repr(rec.distill_loss[i]), repr(rec.total_loss[i])]
            + [repr(float(rec.metrics[i][k])) for k in metric_keys] + sig
        )


def read_record_csv(fh: TextIO, seed: int = 0, config_hash: str = "") -> RunRecord:
    reader = csv.reader(fh)
    header = next(reader)
    metric_keys = [h for h in header[4:] if not h.startswith("sigma_")]
    sig_start = 4 + len(metric_keys)
    rec = RunRecord(seed=seed, config_hash=config_hash)
    for row in reader:
        if not row:
            continue
        metrics = {k: float(v) for k, v in zip(metric_keys, row[4:sig_start])}
        sigma = [float(v) for v in row[sig_start:] if v != ""]
        rec.append(int(row[0]), float(row[1]), float(row[2]), metrics, sigma)
    return rec


def config_hash(**fields) -> str:
    text = ";".join(f"{k}={fields[k]!r}" for k in sorted(fields))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# -- training ------------------------------------------------------------------

def _normalized_sigma(trace: SpectrumTrace) -> np.ndarray:
    return trace.spectra[-1]


def train_run(
    student: MlpNet,
    teacher: MlpNet | None,
    dataset: SynthDataset,
    task: str,
    method: DistillMethod | None,
    direction: str,
    epochs: int,
    lr: float,
    seed: int,
    *,
    val: SynthDataset | None = None,
    distill_weight: float = 1.0,
    spectral_r: int | None = None,
    spectral_weight: float = 1.0,
    projector_lr: float | None = None,
    pkt_rows: int | None = 256,
    track_every: int = 1,
    weight_decay: float = 0.0,
    projector_decay: float | None = None,
) -> RunRecord:
    """Full-batch gradient descent on task loss + distillation (+ spectral) loss.

    ``student`` is updated in place. The teacher, if given, must be frozen and
    only its encoder is evaluated, once, since its features never change.
    ``spectral_r`` adds the teacher-free tail loss on the student features;
    steps where the split is degenerate skip that term and are logged.
    ``pkt_rows`` caps the rows entering the PKT similarity matrices.
    ``weight_decay`` shrinks student and projector weights by
    ``1 - lr * weight_decay`` after every step (decoupled, AdamW-style);
    ``projector_decay``, when given, replaces ``weight_decay`` for the
    projectors only.
    """
    if teacher is not None and not teacher.frozen:
        raise FrozenError("teacher network must be frozen")
    if student.frozen:
        raise FrozenError("student network must not be frozen")
    if epochs < 0:
        raise ContractError("epochs must be non-negative")
    use_teacher = teacher is not None and method is not None
    val = val if val is not None else dataset
    target = dataset.target(task)
    rec = RunRecord(seed=seed)

    projectors: list[Projector] = []
    zt = None
    if use_teacher:
        if direction not in DIRECTIONS:
            raise ContractError(f"direction must be one of {DIRECTIONS}")
        zt = models.encode(teacher, dataset.x)
        d_s, d_t = student.feature_dim, teacher.feature_dim
        projectors = [Projector.new(d_s, d_t, direction, seed=seed * 1000 + k) for k in range(method.n_projectors)]
        rec.trace = SpectrumTrace()
    rec.projectors = projectors
    p_lr = lr if projector_lr is None else projector_lr
    p_decay = weight_decay if projector_decay is None else projector_decay
    teacher_fp = teacher.fingerprint() if teacher is not None else None

    for epoch in range(1, epochs + 1):
        tape = ad.Tape()
        params = [tape.leaf(p) for p in student.params()]
        x = tape.const(dataset.x)
        z = models.apply_tape(student, params, x, 0, student.encoder_cut)
        out = models.apply_tape(student, params, z, student.encoder_cut, student.n_layers)
        lt = tape_task_loss(task, out, target)
        root = lt
        distill_val = 0.0
        pvars = []
        if use_teacher:
            zt_var = tape.const(zt)
            pvars = [tape.leaf(p.weights) for p in projectors]
            if direction == INVERTED:
                aligned = [(z, ad.matmul(zt_var, pv)) for pv in pvars]
            else:
                aligned = [(ad.matmul(z, pv), zt_var) for pv in pvars]
            if method.kind == "pkt" and pkt_rows is not None and dataset.x.shape[0] > pkt_rows:
                aligned = [(_rows(a, pkt_rows), _rows(b, pkt_rows)) for a, b in aligned]
            ld = tape_distill(method, [a for a, _ in aligned], [b for _, b in aligned])
            distill_val = float(ld.value[0, 0])
            root = ad.add(root, ad.scale(ld, distill_weight))
        if spectral_r is not None:
            try:
                ls = tape_spectral(z, spectral_r)
            except DegeneracyError as exc:
                rec.skipped_spectral.append(epoch)
                log.info("epoch %d: spectral term skipped (%s)", epoch, exc)
            else:
                distill_val += spectral_weight * float(ls.value[0, 0])
                root = ad.add(root, ad.scale(ls, spectral_weight))

        grads = tape.backward(root)
        models.sgd_step(student, [grads.get(p.id, np.zeros_like(p.value)) for p in params], lr)
        for proj, pv in zip(projectors, pvars):
            proj.weights -= p_lr * grads.get(pv.id, np.zeros_like(pv.value))
        if weight_decay:
            for w in student.weights:
                w *= 1.0 - lr * weight_decay
        if p_decay:
            for proj in projectors:
                proj.weights *= 1.0 - p_lr * p_decay

        val_out = models.forward(student, val.x)
        metrics = evaluate(task, val_out, val.target(task))
        sigma = None
        if projectors and (epoch % track_every == 0 or epoch == epochs):
            track_spectrum(projectors[0], epoch, rec.trace)
            sigma = rec.trace.spectra[-1]
        rec.append(epoch, float(lt.value[0, 0]), distill_val, metrics, sigma)

    if teacher is not None and teacher.fingerprint() != teacher_fp:
        raise FrozenError("teacher weights changed during training")  # pragma: no cover
    return rec


def _rows(v: ad.Var, n: int) -> ad.Var:
    """First ``n`` rows of ``v`` as a tape node."""
    full = v.shape

    def vjp(g):
        out = np.zeros(full)
        out[:n] = g
        return (out,)

    return v.tape.record("rows", (v,), v.value[:n], vjp)


def linear_map_experiment(
    enc: MlpNet,
    dec: MlpNet,
    dataset: SynthDataset,
    epochs: int,
    lr: float,
    seed: int,
    *,
    task: str = "depth",
    val: SynthDataset | None = None,
    init: np.ndarray | None = None,
) -> RunRecord:
    """Train only a linear map ``P`` in ``dec(enc(x) @ P)`` between frozen nets.

    Row 0 of the record holds metrics before any update.
    """
    if not (enc.frozen and dec.frozen):
        raise FrozenError("encoder and decoder networks must both be frozen")
    d_in, d_out = enc.feature_dim, dec.feature_dim
    if init is not None:
        w = np.array(init, dtype=np.float64)
        if w.shape != (d_in, d_out):
            raise ShapeError(f"initial map must have shape {(d_in, d_out)}, got {w.shape}")
    else:
        bound = 1.0 / np.sqrt(d_in)
        w = np.random.default_rng(seed).uniform(-bound, bound, size=(d_in, d_out))
    val = val if val is not None else dataset
    feats = models.encode(enc, dataset.x)
    val_feats = models.encode(enc, val.x)
    target = dataset.target(task)
    dec_params = dec.params()
    rec = RunRecord(seed=seed)
    rec.trace = SpectrumTrace()

    def _log(epoch, loss):
        out = models.decode(dec, val_feats @ w)
        track_spectrum(w, epoch, rec.trace)
        rec.append(epoch, loss, 0.0, evaluate(task, out, val.target(task)), rec.trace.spectra[-1])

    _log(0, task_loss(task, models.decode(dec, feats @ w), target))
    for epoch in range(1, epochs + 1):
        tape = ad.Tape()
        pv = tape.leaf(w)
        consts = [tape.const(p) for p in dec_params]
        h = ad.matmul(tape.const(feats), pv)
        out = models.apply_tape(dec, consts, h, dec.encoder_cut, dec.n_layers)
        loss = tape_task_loss(task, out, target)
        (g,) = tape.grad(loss, [pv])
        w = w - lr * g
        _log(epoch, float(loss.value[0, 0]))
    rec.projectors = [Projector(w, INVERTED, d_s=d_out, d_t=d_in)]
    return rec
