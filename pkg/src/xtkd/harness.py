"""Experiment configs, named presets, and the seeded multi-run executor."""
from __future__ import annotations

import csv
import difflib
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from . import models
from .distill import METHODS, DIRECTIONS, DistillMethod, RunRecord, config_hash, linear_map_experiment, train_run, write_record_csv
from .exceptions import ConfigError, XtkdError
from .models import InitSpec, MlpNet
from .spectral import write_trace_csv
from .tasks import TASKS, SynthDataset, synth_gen

__all__ = [
    "ExperimentConfig",
    "RunSpec",
    "SummaryTable",
    "RunFailure",
    "parse_config",
    "parse_config_text",
    "format_config",
    "preset_list",
    "preset_config",
    "expand",
    "run_specs",
    "run_experiment",
    "read_summary_csv",
    "DEFAULT_OUT",
]

DEFAULT_OUT = "xtkd-out"
TEACHER_KINDS = ("none", "random-frozen") + tuple(f"pretrained-task-{t}" for t in TASKS)
MODES = ("distill", "linear-map")

# Seed offsets keep the nets of one run on disjoint random streams.
_TEACHER_SEED = 10_000
_DECODER_SEED = 20_000


class RunFailure(XtkdError, RuntimeError):
    """A run aborted; the partial manifest names what completed."""


# -- config --------------------------------------------------------------------

def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _strs(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip() in ("", "none") else float(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a grid of seeded runs.

    List-valued fields (teacher kinds, methods, directions, spectral ranks)
    are expanded combinatorially by :func:`expand`.
    """

    name: str = "experiment"
    mode: str = "distill"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = DEFAULT_OUT
    baseline: bool = False
    # data
    n_samples: int = 3000
    teacher_pool: int = 2000
    n_train: int = 60
    latent_dim: int = 4
    input_dim: int = 32
    classes: int = 5
    noise: float = 0.05
    label_noise: float = 0.3
    # student
    student_widths: tuple[int, ...] = (32, 32, 16, 32, 4)
    student_cut: int = 2
    task: str = "depth"
    epochs: int = 2000
    lr: float = 0.01
    weight_decay: float = 0.0
    # teacher
    teacher_kinds: tuple[str, ...] = ("none",)
    teacher_widths: tuple[int, ...] = (32, 64, 64, 64, 4)
    teacher_cut: int = 2
    teacher_epochs: int = 1500
    teacher_lr: float = 0.01
    # distillation
    methods: tuple[str, ...] = ()
    directions: tuple[str, ...] = ("inverted", "traditional")
    distill_weight: float = 1.0
    projector_lr: float | None = None
    projector_decay: float | None = None
    track_every: int = 100
    # teacher-free spectral loss
    spectral_r: tuple[int, ...] = ()
    spectral_weight: float = 1.0

    def hash_fields(self) -> dict[str, Any]:
        skip = {"name", "seeds", "out_dir", "baseline", "teacher_kinds", "methods", "directions", "spectral_r"}
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}


# section -> key -> (field name, parser)
_SCHEMA: dict[str, dict[str, tuple[str, Callable[[str], Any]]]] = {
    "experiment": {
        "name": ("name", str.strip),
        "mode": ("mode", str.strip),
        "seeds": ("seeds", lambda s: tuple(_ints(s))),
        "out_dir": ("out_dir", str.strip),
        "baseline": ("baseline", _bool),
    },
    "data": {
        "n_samples": ("n_samples", int),
        "teacher_pool": ("teacher_pool", int),
        "n_train": ("n_train", int),
        "latent_dim": ("latent_dim", int),
        "input_dim": ("input_dim", int),
        "classes": ("classes", int),
        "noise": ("noise", float),
        "label_noise": ("label_noise", float),
    },
    "student": {
        "widths": ("student_widths", lambda s: tuple(_ints(s))),
        "encoder_cut": ("student_cut", int),
        "task": ("task", str.strip),
        "epochs": ("epochs", int),
        "lr": ("lr", float),
        "weight_decay": ("weight_decay", float),
    },
    "teacher": {
        "kind": ("teacher_kinds", lambda s: tuple(_strs(s))),
        "widths": ("teacher_widths", lambda s: tuple(_ints(s))),
        "encoder_cut": ("teacher_cut", int),
        "epochs": ("teacher_epochs", int),
        "lr": ("teacher_lr", float),
    },
    "distill": {
        "methods": ("methods", lambda s: tuple(_strs(s))),
        "directions": ("directions", lambda s: tuple(_strs(s))),
        "weight": ("distill_weight", float),
        "projector_lr": ("projector_lr", _opt_float),
        "projector_decay": ("projector_decay", _opt_float),
        "track_every": ("track_every", int),
    },
    "spectral": {
        "r": ("spectral_r", lambda s: tuple(_ints(s))),
        "weight": ("spectral_weight", float),
    },
}


def _suggest(word: str, options: Iterable[str]) -> str:
    close = difflib.get_close_matches(word, list(options), n=3)
    return f" (did you mean {', '.join(close)}?)" if close else ""


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines grouped under ``[section]`` headers.

    ``#`` starts a comment. Unknown sections or keys are errors, as is any
    value that fails to parse or breaks a config invariant.
    """
    values: dict[str, Any] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]{_suggest(section, _SCHEMA)}")
            continue
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        keys = _SCHEMA[section]
        if key not in keys:
            raise ConfigError(f"{where}: unknown key {section}.{key}{_suggest(key, keys)}")
        name, parse = keys[key]
        try:
            values[name] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config_text`; every field is written out."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_fmt(getattr(cfg, name))}" for key, (name, _) in keys.items())
        lines.append("")
    return "\n".join(lines)


def validate(cfg: ExperimentConfig) -> None:
    def bad(path, msg):
        raise ConfigError(f"{path}: {msg}")

    if not cfg.seeds:
        bad("experiment.seeds", "at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        bad("experiment.seeds", "seeds must be distinct")
    if cfg.mode not in MODES:
        bad("experiment.mode", f"unknown mode {cfg.mode!r}; expected one of {MODES}")
    if cfg.task not in TASKS:
        bad("student.task", f"unknown task {cfg.task!r}; expected one of {TASKS}")
    for kind in cfg.teacher_kinds:
        if kind not in TEACHER_KINDS:
            bad("teacher.kind", f"unknown teacher kind {kind!r}{_suggest(kind, TEACHER_KINDS)}")
    for m in cfg.methods:
        if m not in METHODS:
            bad("distill.methods", f"unknown method {m!r}{_suggest(m, METHODS)}")
    for d in cfg.directions:
        if d not in DIRECTIONS:
            bad("distill.directions", f"unknown direction {d!r}{_suggest(d, DIRECTIONS)}")
    if any(r < 1 for r in cfg.spectral_r):
        bad("spectral.r", "ranks are 1-based and must be >= 1")
    if any(r > cfg.student_widths[cfg.student_cut] for r in cfg.spectral_r if 0 < cfg.student_cut < len(cfg.student_widths)):
        bad("spectral.r", f"ranks may not exceed the student feature width {cfg.student_widths[cfg.student_cut]}")
    real_teachers = [k for k in cfg.teacher_kinds if k != "none"]
    if cfg.methods and not real_teachers and cfg.mode == "distill":
        bad("teacher.kind", "distillation methods need a teacher; kind none allows only baseline or spectral runs")
    if real_teachers and not cfg.methods and cfg.mode == "distill":
        bad("distill.methods", "a teacher kind was given but no distillation method")
    if cfg.mode == "linear-map" and not any(k.startswith("pretrained-task-") for k in cfg.teacher_kinds):
        bad("teacher.kind", "linear-map mode needs a pretrained-task-* encoder")
    for path, widths, cut in (("student", cfg.student_widths, cfg.student_cut), ("teacher", cfg.teacher_widths, cfg.teacher_cut)):
        if len(widths) < 3 or min(widths) < 1:
            bad(f"{path}.widths", "need at least three positive widths")
        if not 1 <= cut < len(widths) - 1:
            bad(f"{path}.encoder_cut", f"must lie in [1, {len(widths) - 2}]")
        if widths[0] != cfg.input_dim:
            bad(f"{path}.widths", f"input width {widths[0]} differs from data.input_dim {cfg.input_dim}")
    out = cfg.classes if cfg.task == "class" else 4
    if cfg.student_widths[-1] != out:
        bad("student.widths", f"output width must be {out} for task {cfg.task}")
    for kind in real_teachers:
        if kind.startswith("pretrained-task-"):
            t = kind.rsplit("-", 1)[1]
            need = cfg.classes if t == "class" else 4
            if cfg.teacher_widths[-1] != need:
                bad("teacher.widths", f"output width must be {need} for a {kind} teacher")
    if cfg.n_train < 1 or cfg.n_samples - cfg.teacher_pool - cfg.n_train < 1:
        bad("data.n_samples", "too small for teacher pool + training split + a validation split")
    pretrained = any(k.startswith("pretrained-task-") for k in cfg.teacher_kinds)
    if (pretrained or cfg.mode == "linear-map") and cfg.teacher_pool < 1:
        bad("data.teacher_pool", "pretrained networks need a positive pool")
    if cfg.teacher_pool < 0:
        bad("data.teacher_pool", "must be non-negative")
    if cfg.epochs < (0 if cfg.mode == "linear-map" else 1):
        bad("student.epochs", "training runs need at least one epoch")
    if cfg.teacher_epochs < 0:
        bad("teacher.epochs", "must be non-negative")
    if cfg.track_every < 1:
        bad("distill.track_every", "must be >= 1")
    for name in ("lr", "teacher_lr"):
        if getattr(cfg, name) <= 0:
            bad(name, "learning rates must be positive")
    if cfg.projector_lr is not None and cfg.projector_lr <= 0:
        bad("distill.projector_lr", "learning rates must be positive")
    for path, value in (("student.weight_decay", cfg.weight_decay), ("distill.projector_decay", cfg.projector_decay),
                        ("distill.weight", cfg.distill_weight), ("spectral.weight", cfg.spectral_weight)):
        if value is not None and value < 0:
            bad(path, "must be non-negative")


# -- expansion -----------------------------------------------------------------

@dataclass(frozen=True, order=True)
class RunSpec:
    """One configuration of a grid; runs once per seed."""

    teacher: str = "none"
    method: str = ""
    direction: str = ""
    spectral_r: int = 0

    @property
    def is_baseline(self) -> bool:
        return self.teacher == "none" and not self.method and not self.spectral_r

    @property
    def label(self) -> str:
        if self.is_baseline:
            return "baseline"
        if self.spectral_r:
            return f"spectral/r={self.spectral_r}"
        return f"{self.teacher}/{self.method}/{self.direction}"


def expand(cfg: ExperimentConfig) -> list[RunSpec]:
    """Treatment configurations in canonical order (the baseline excluded)."""
    if cfg.mode == "linear-map":
        return [RunSpec(teacher=k, method="linear-map") for k in cfg.teacher_kinds if k.startswith("pretrained-task-")]
    specs = [RunSpec(spectral_r=r) for r in cfg.spectral_r]
    for kind in cfg.teacher_kinds:
        if kind == "none":
            continue
        specs.extend(RunSpec(kind, m, d) for m in cfg.methods for d in cfg.directions)
    return specs


def run_specs(cfg: ExperimentConfig) -> list[RunSpec]:
    """Treatments plus the no-teacher baseline when requested or implied."""
    specs = expand(cfg)
    if cfg.mode == "distill" and (cfg.baseline or not specs):
        specs = [RunSpec()] + specs
    return specs


def spec_hash(cfg: ExperimentConfig, spec: RunSpec) -> str:
    return config_hash(**cfg.hash_fields(), teacher=spec.teacher, method=spec.method,
                       direction=spec.direction, spectral_r=spec.spectral_r)


# -- presets -------------------------------------------------------------------

_COMMON = """
[experiment]
seeds = 0,1,2,3,4
[data]
n_samples = 3000
teacher_pool = 2000
n_train = 60
latent_dim = 4
input_dim = 32
classes = 5
noise = 0.05
label_noise = 0.3
[student]
widths = 32,32,16,32,4
encoder_cut = 2
task = depth
epochs = 2000
lr = 0.01
[teacher]
widths = 32,64,64,64,4
encoder_cut = 2
epochs = 1500
lr = 0.01
"""

_PRESETS = {
    "table1-grid": """
[experiment]
name = table1-grid
baseline = true
[teacher]
kind = pretrained-task-depth, random-frozen
[distill]
methods = fitnets, at, pkt, ensemble
directions = inverted, traditional
weight = 100
track_every = 500
""",
    "fig-spectra": """
[experiment]
name = fig-spectra
[teacher]
kind = pretrained-task-depth, random-frozen
[distill]
methods = fitnets
directions = inverted, traditional
weight = 100
projector_decay = 1.0
track_every = 50
""",
    "teacher-free-sweep": """
[experiment]
name = teacher-free-sweep
baseline = true
[spectral]
r = 1,2,3,4,5,6,7,8
weight = 1.0
""",
    "linear-map": """
[experiment]
name = linear-map
mode = linear-map
[teacher]
kind = pretrained-task-reg
[student]
epochs = 300
lr = 0.05
""",
}

_PRESET_NAMES = ("table1-grid", "fig-spectra", "teacher-free-sweep", "linear-map", "bound-audit")


def _merge(base: str, overlay: str) -> str:
    # Later assignments win, so the overlay text simply follows the base.
    return base + "\n" + overlay


def preset_list() -> list[str]:
    return list(_PRESET_NAMES)


def _check_preset(name: str) -> None:
    if name not in _PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}{_suggest(name, _PRESET_NAMES)}; available: {', '.join(_PRESET_NAMES)}")


def preset_text(name: str) -> str:
    _check_preset(name)
    if name == "bound-audit":
        raise ConfigError("bound-audit is a property sweep, not a training grid; run `xtkd bound-audit`")
    return _merge(_COMMON, _PRESETS[name])


def preset_config(name: str, seeds: Iterable[int] | None = None, out_dir: str | None = None) -> ExperimentConfig:
    cfg = parse_config_text(preset_text(name), source=f"preset:{name}")
    if seeds is not None:
        cfg = replace(cfg, seeds=tuple(seeds))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    validate(cfg)
    return cfg


# -- execution -----------------------------------------------------------------

def make_splits(cfg: ExperimentConfig, seed: int) -> tuple[SynthDataset, SynthDataset, SynthDataset]:
    """``(teacher pool, train, validation)``, carved from one seeded draw."""
    ds = synth_gen(seed, cfg.n_samples, cfg.latent_dim, cfg.input_dim, cfg.classes,
                   noise=cfg.noise, label_noise=cfg.label_noise)
    pool = ds.subset(slice(0, cfg.teacher_pool))
    train = ds.subset(slice(cfg.teacher_pool, cfg.teacher_pool + cfg.n_train))
    val = ds.subset(slice(cfg.teacher_pool + cfg.n_train, None))
    return pool, train, val


def _pretrain(widths, cut, task, pool, epochs, lr, seed, init_seed) -> MlpNet:
    net = models.mlp_new(widths, cut, InitSpec(seed=init_seed))
    if epochs:
        train_run(net, None, pool, task, None, "inverted", epochs, lr, seed)
    return net.freeze()


def build_teacher(cfg: ExperimentConfig, kind: str, seed: int, pool: SynthDataset) -> MlpNet | None:
    if kind == "none":
        return None
    if kind == "random-frozen":
        return models.mlp_new(cfg.teacher_widths, cfg.teacher_cut, InitSpec(seed=_TEACHER_SEED + seed)).freeze()
    task = kind[len("pretrained-task-"):]
    return _pretrain(cfg.teacher_widths, cfg.teacher_cut, task, pool, cfg.teacher_epochs,
                     cfg.teacher_lr, seed, _TEACHER_SEED + seed)


def build_decoder(cfg: ExperimentConfig, seed: int, pool: SynthDataset) -> MlpNet:
    """Frozen network of student shape trained on the student task; its decoder is reused."""
    return _pretrain(cfg.student_widths, cfg.student_cut, cfg.task, pool, cfg.teacher_epochs,
                     cfg.teacher_lr, seed, _DECODER_SEED + seed)


def execute_run(cfg: ExperimentConfig, spec: RunSpec, seed: int, teacher: MlpNet | None = None,
                decoder: MlpNet | None = None) -> RunRecord:
    """Run one (configuration, seed) pair. Pretrained nets may be passed in
    to avoid retraining; otherwise they are rebuilt from the seed."""
    pool, train, val = make_splits(cfg, seed)
    if teacher is None and spec.teacher != "none":
        teacher = build_teacher(cfg, spec.teacher, seed, pool)
    if spec.method == "linear-map":
        decoder = decoder if decoder is not None else build_decoder(cfg, seed, pool)
        rec = linear_map_experiment(teacher, decoder, train, cfg.epochs, cfg.lr, seed, task=cfg.task, val=val)
    else:
        student = models.mlp_new(cfg.student_widths, cfg.student_cut, InitSpec(seed=seed))
        rec = train_run(
            student, teacher, train, cfg.task,
            DistillMethod(spec.method) if spec.method else None,
            spec.direction or "inverted", cfg.epochs, cfg.lr, seed,
            val=val, distill_weight=cfg.distill_weight,
            spectral_r=spec.spectral_r or None, spectral_weight=cfg.spectral_weight,
            projector_lr=cfg.projector_lr, track_every=cfg.track_every,
            weight_decay=cfg.weight_decay, projector_decay=cfg.projector_decay,
        )
    rec.config_hash = spec_hash(cfg, spec)
    return rec


def _record_texts(rec: RunRecord) -> tuple[str, str | None]:
    buf = io.StringIO()
    write_record_csv(buf, rec)
    trace = None
    if rec.trace is not None and rec.trace.epochs:
        tbuf = io.StringIO()
        write_trace_csv(tbuf, rec.trace)
        trace = tbuf.getvalue()
    return buf.getvalue(), trace


def _worker(args) -> tuple[str, str | None, dict]:
    cfg, spec, seed, teacher, decoder = args
    rec = execute_run(cfg, spec, seed, teacher, decoder)
    run_csv, trace_csv = _record_texts(rec)
    final = dict(rec.metrics[-1])
    final["first_val_loss"] = rec.metrics[0]["val_loss"]
    if "rms_log" in rec.metrics[0]:
        final["first_rms_log"] = rec.metrics[0]["rms_log"]
    if rec.trace is not None and rec.trace.ranks:
        final["eff_rank"] = float(rec.trace.final_rank())
    return run_csv, trace_csv, final


# -- summary -------------------------------------------------------------------

@dataclass
class SummaryTable:
    """One row per configuration; numeric cells are floats or ``None``."""

    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)

    def row(self, config: str) -> dict[str, Any]:
        for r in self.rows:
            if r["config"] == config:
                return r
        raise KeyError(config)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([_cell(r.get(c)) for c in self.columns])
        return buf.getvalue()


_TEXT_COLUMNS = ("config", "hash", "teacher", "method", "direction")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_summary_csv(fh) -> SummaryTable:
    reader = csv.reader(fh)
    columns = next(reader)
    table = SummaryTable(columns)
    for row in reader:
        if not row:
            continue
        parsed = {}
        for c, v in zip(columns, row):
            if c in _TEXT_COLUMNS:
                parsed[c] = v
            elif c in ("spectral_r", "n_seeds"):
                parsed[c] = int(v)
            else:
                parsed[c] = float(v) if v != "" else None
        table.rows.append(parsed)
    return table


def _std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def summarize(cfg: ExperimentConfig, specs: list[RunSpec], finals: dict[tuple[RunSpec, int], dict]) -> SummaryTable:
    metric_keys: list[str] = []
    for spec in specs:
        for k in finals[(spec, cfg.seeds[0])]:
            if k not in metric_keys and k != "val_loss":
                metric_keys.append(k)
    columns = ["config", "hash", "teacher", "method", "direction", "spectral_r", "n_seeds",
               "task_loss_mean", "task_loss_std"]
    for k in metric_keys:
        columns += [f"{k}_mean", f"{k}_std"]
    columns += ["delta_vs_baseline", "inv_minus_trad", "sign_inv_minus_trad"]
    table = SummaryTable(columns)
    means = {}
    for spec in specs:
        per_seed = [finals[(spec, s)] for s in cfg.seeds]
        loss = np.array([f["val_loss"] for f in per_seed])
        row = {
            "config": spec.label, "hash": spec_hash(cfg, spec), "teacher": spec.teacher,
            "method": spec.method, "direction": spec.direction, "spectral_r": spec.spectral_r,
            "n_seeds": len(cfg.seeds), "task_loss_mean": float(loss.mean()), "task_loss_std": _std(loss),
        }
        for k in metric_keys:
            vals = [f[k] for f in per_seed if k in f]
            if len(vals) == len(per_seed):
                row[f"{k}_mean"] = float(np.mean(vals))
                row[f"{k}_std"] = _std(np.array(vals))
        means[spec] = row["task_loss_mean"]
        table.rows.append(row)
    base = next((means[s] for s in specs if s.is_baseline), None)
    for spec, row in zip(specs, table.rows):
        if base is not None and not spec.is_baseline:
            row["delta_vs_baseline"] = row["task_loss_mean"] - base
        if spec.direction:
            inv = replace(spec, direction="inverted")
            trad = replace(spec, direction="traditional")
            if inv in means and trad in means:
                d = means[inv] - means[trad]
                row["inv_minus_trad"] = d
                row["sign_inv_minus_trad"] = float(np.sign(d))
    return table


# -- orchestration -------------------------------------------------------------

def resolve_out_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """``--out`` beats ``XTKD_OUT``, which beats the config's ``out_dir``."""
    return Path(override or os.environ.get("XTKD_OUT") or cfg.out_dir)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _manifest(entries: list[tuple[str, str, int, str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "hash", "seed", "status", "detail"])
    writer.writerows(entries)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, out_dir: str | os.PathLike | None = None) -> SummaryTable:
    """Run every (configuration, seed) pair and write CSVs under the output dir.

    Layout: ``runs/<hash>_<seed>.csv``, ``traces/<hash>_<seed>.csv`` (projector
    spectra), ``summary.csv``, ``manifest.csv`` and the resolved ``config.ini``.
    Outputs do not depend on ``jobs``. On failure the manifest marks which
    runs finished and :class:`RunFailure` is raised.
    """
    validate(cfg)
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    out = Path(out_dir) if out_dir is not None else resolve_out_dir(cfg)
    _write(out / "config.ini", format_config(cfg))
    specs = run_specs(cfg)

    # Pretrained nets are shared by every configuration of a seed, so build them once here.
    shared: dict[tuple[str, int], MlpNet | None] = {}
    for seed in cfg.seeds:
        pool = make_splits(cfg, seed)[0]
        for kind in sorted({s.teacher for s in specs} - {"none"}):
            shared[(kind, seed)] = build_teacher(cfg, kind, seed, pool)
        if cfg.mode == "linear-map":
            shared[("decoder", seed)] = build_decoder(cfg, seed, pool)

    tasks = [(spec, seed) for spec in specs for seed in cfg.seeds]
    args = [(cfg, spec, seed, shared.get((spec.teacher, seed)), shared.get(("decoder", seed))) for spec, seed in tasks]
    results: dict[tuple[RunSpec, int], tuple] = {}
    errors: dict[tuple[RunSpec, int], str] = {}
    if jobs == 1:
        for key, a in zip(tasks, args):
            try:
                results[key] = _worker(a)
            except Exception as exc:  # noqa: BLE001 - recorded in the manifest
                errors[key] = f"{type(exc).__name__}: {exc}"
                break
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool_exec:
            futures = {key: pool_exec.submit(_worker, a) for key, a in zip(tasks, args)}
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    errors[key] = f"{type(exc).__name__}: {exc}"

    entries = []
    for spec, seed in tasks:
        h = spec_hash(cfg, spec)
        if (spec, seed) in results:
            run_csv, trace_csv, _ = results[(spec, seed)]
            _write(out / "runs" / f"{h}_{seed}.csv", run_csv)
            if trace_csv is not None:
                _write(out / "traces" / f"{h}_{seed}.csv", trace_csv)
            entries.append((spec.label, h, seed, "ok", f"runs/{h}_{seed}.csv"))
        elif (spec, seed) in errors:
            entries.append((spec.label, h, seed, "failed", errors[(spec, seed)]))
        else:
            entries.append((spec.label, h, seed, "not-run", ""))
    _write(out / "manifest.csv", _manifest(entries))
    if errors:
        (spec, seed), msg = next(iter(errors.items()))
        raise RunFailure(f"run {spec.label} seed {seed} failed: {msg}; partial manifest at {out / 'manifest.csv'}")

    table = summarize(cfg, specs, {k: v[2] for k, v in results.items()})
    _write(out / "summary.csv", table.to_csv())
    return table


# -- preset claims -------------------------------------------------------------

@dataclass(frozen=True)
class Claim:
    name: str
    passed: bool
    detail: str


def _loss(table: SummaryTable, config: str) -> float:
    return table.row(config)["task_loss_mean"]


def _per_seed_rms_log(out: Path, table: SummaryTable) -> list[tuple[float, float]]:
    from .distill import read_record_csv

    pairs = []
    for row in table.rows:
        for path in sorted((out / "runs").glob(f"{row['hash']}_*.csv")):
            with open(path) as fh:
                rec = read_record_csv(fh)
            pairs.append((rec.metrics[0]["rms_log"], rec.metrics[-1]["rms_log"]))
    return pairs


def check_preset(name: str, table: SummaryTable, out: Path | None = None) -> list[Claim]:
    """Directional claims each training preset is expected to reproduce."""
    claims = []
    if name == "table1-grid":
        same, rand = "pretrained-task-depth", "random-frozen"
        for m in ("fitnets", "ensemble"):
            inv, trad = _loss(table, f"{rand}/{m}/inverted"), _loss(table, f"{rand}/{m}/traditional")
            claims.append(Claim(f"random teacher, {m}: inverted < traditional", inv < trad, f"{inv:.4f} vs {trad:.4f}"))
        inv, trad = _loss(table, f"{same}/fitnets/inverted"), _loss(table, f"{same}/fitnets/traditional")
        claims.append(Claim("same-task teacher, fitnets: traditional <= inverted", trad <= inv, f"{trad:.4f} vs {inv:.4f}"))
        base = _loss(table, "baseline")
        for teacher in (same, rand):
            for m in METHODS:
                best = min(_loss(table, f"{teacher}/{m}/{d}") for d in DIRECTIONS)
                claims.append(Claim(f"{teacher}/{m} best direction beats baseline", best < base, f"{best:.4f} vs {base:.4f}"))
    elif name == "fig-spectra":
        rank = lambda c: table.row(c)["eff_rank_mean"]  # noqa: E731
        r_rand, r_same = rank("random-frozen/fitnets/inverted"), rank("pretrained-task-depth/fitnets/inverted")
        r_trad = rank("random-frozen/fitnets/traditional")
        claims.append(Claim("inverted rank: random teacher <= same-task teacher", r_rand <= r_same, f"{r_rand:.2f} vs {r_same:.2f}"))
        claims.append(Claim("random teacher rank: inverted <= traditional", r_rand <= r_trad, f"{r_rand:.2f} vs {r_trad:.2f}"))
    elif name == "teacher-free-sweep":
        b = table.row("baseline")
        best = None
        for row in table.rows:
            if not row["spectral_r"]:
                continue
            pooled = np.sqrt((b["task_loss_std"] ** 2 + row["task_loss_std"] ** 2) / 2.0)
            gain = b["task_loss_mean"] - row["task_loss_mean"]
            if best is None or gain - pooled > best[1] - best[2]:
                best = (row["spectral_r"], gain, pooled)
        ok = best is not None and best[1] > 0 and best[1] >= best[2]
        claims.append(Claim("some r beats the baseline by >= 1 pooled stddev", ok,
                            f"r={best[0]} gain {best[1]:.4f}, pooled std {best[2]:.4f}" if best else "no spectral rows"))
    elif name == "linear-map":
        if out is None:
            raise ConfigError("the linear-map claim needs the run directory")
        pairs = _per_seed_rms_log(out, table)
        improved = sum(last < first for first, last in pairs)
        need = int(np.ceil(0.8 * len(pairs)))
        claims.append(Claim("validation RMSL falls from epoch 0 in >= 80% of seeds", improved >= need, f"{improved}/{len(pairs)}"))
    else:
        _check_preset(name)
    return claims
