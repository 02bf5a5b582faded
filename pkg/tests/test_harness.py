import numpy as np
import pytest

from xtkd import harness
from xtkd.distill import read_record_csv
from xtkd.exceptions import ConfigError
from xtkd.harness import (
    ExperimentConfig,
    RunSpec,
    expand,
    format_config,
    parse_config,
    parse_config_text,
    preset_config,
    preset_list,
    read_summary_csv,
    run_experiment,
    run_specs,
)
from xtkd.spectral import read_trace_csv

TINY = """
[experiment]
seeds = 0, 1
[data]
n_samples = 160
teacher_pool = 80
n_train = 30
latent_dim = 2
input_dim = 6
classes = 3
[student]
widths = 6, 8, 4, 8, 4
epochs = 6
lr = 0.01
[teacher]
widths = 6, 10, 8, 10, 4
epochs = 5
"""


def tiny(overlay: str = "") -> ExperimentConfig:
    return parse_config_text(TINY + overlay)


# -- parsing -------------------------------------------------------------------

def test_minimal_config_is_a_baseline():
    cfg = parse_config_text("[experiment]\nseeds = 3\n")
    assert cfg.teacher_kinds == ("none",) and cfg.methods == ()
    assert run_specs(cfg) == [RunSpec()]
    assert RunSpec().label == "baseline"


def test_table_style_config_expands_to_eight():
    cfg = tiny("[teacher]\nkind = random-frozen\n[distill]\nmethods = fitnets, at, pkt, ensemble\n")
    specs = expand(cfg)
    assert len(specs) == 8
    assert {s.direction for s in specs} == {"inverted", "traditional"}


@pytest.mark.parametrize("text, fragment", [
    ("[experiment]\nseeds =\n", "seeds"),
    ("[experiment]\nseeds = 1, 1\n", "distinct"),
    ("[experment]\nseeds = 1\n", "did you mean experiment"),
    ("[student]\nepoch = 3\n", "did you mean epochs"),
    ("seeds = 1\n", "outside any"),
    ("[student]\nepochs three\n", "key = value"),
    ("[student]\nepochs = three\n", "student.epochs"),
    ("[teacher]\nkind = random\n", "did you mean random-frozen"),
    ("[distill]\nmethods = fitnet\n", "did you mean fitnets"),
    ("[teacher]\nkind = random-frozen\n", "no distillation method"),
    ("[distill]\nmethods = fitnets\n", "need a teacher"),
    ("[spectral]\nr = 0\n", "1-based"),
    ("[spectral]\nr = 17\n", "feature width"),
    ("[student]\nwidths = 8, 4, 4, 4\nencoder_cut = 1\n", "input_dim"),
    ("[student]\ntask = class\n", "output width"),
    ("[student]\nepochs = 0\n", "at least one epoch"),
    ("[student]\nlr = 0\n", "positive"),
    ("[distill]\nprojector_decay = -1\n", "non-negative"),
    ("[experiment]\nmode = linear-map\n", "pretrained-task"),
    ("[data]\nn_samples = 2060\n", "validation"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config_text(text)


def test_error_names_file_and_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[student]\n\nepochz = 3\n")
    with pytest.raises(ConfigError, match=r"bad\.ini:3"):
        parse_config(path)
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "missing.ini")


def test_comments_and_later_assignments():
    cfg = parse_config_text("# header\n[student]\nepochs = 3  # first\nepochs = 9\n")
    assert cfg.epochs == 9


def test_format_round_trip(tmp_path):
    for name in ("table1-grid", "fig-spectra", "teacher-free-sweep", "linear-map"):
        cfg = preset_config(name)
        path = tmp_path / f"{name}.ini"
        path.write_text(format_config(cfg))
        assert parse_config(path) == cfg


# -- presets -------------------------------------------------------------------

def test_preset_names():
    assert preset_list() == ["table1-grid", "fig-spectra", "teacher-free-sweep", "linear-map", "bound-audit"]


def test_preset_shapes():
    sweep = preset_config("teacher-free-sweep")
    assert len(expand(sweep)) == 8 and run_specs(sweep)[0].is_baseline
    grid = preset_config("table1-grid")
    assert len(expand(grid)) == 16 and len(grid.seeds) >= 5
    assert max(grid.student_widths) <= 32 and max(grid.teacher_widths) == 64
    assert grid.n_samples == 3000
    assert len(expand(preset_config("fig-spectra"))) == 4
    assert expand(preset_config("linear-map")) == [RunSpec("pretrained-task-reg", "linear-map")]


def test_preset_errors():
    with pytest.raises(ConfigError, match="did you mean table1-grid"):
        preset_config("table-grid")
    with pytest.raises(ConfigError, match="bound-audit"):
        preset_config("bound-audit")


def test_preset_seed_override():
    assert preset_config("linear-map", seeds=[7, 8]).seeds == (7, 8)


# -- execution -----------------------------------------------------------------

def test_baseline_three_seeds(tmp_path):
    cfg = parse_config_text(TINY + "[experiment]\nseeds = 0,1,2\n")
    table = run_experiment(cfg, out_dir=tmp_path)
    assert len(list((tmp_path / "runs").glob("*.csv"))) == 3
    assert len(table.rows) == 1 and table.rows[0]["config"] == "baseline"
    assert not (tmp_path / "traces").exists()


@pytest.fixture(scope="module")
def cross_task(tmp_path_factory):
    out = tmp_path_factory.mktemp("cross")
    cfg = tiny("[experiment]\nbaseline = true\n[teacher]\nkind = pretrained-task-depth, random-frozen\n"
               "[distill]\nmethods = fitnets, pkt\nweight = 5\ntrack_every = 2\n")
    return cfg, out, run_experiment(cfg, out_dir=out)


def test_cross_task_summary(cross_task):
    cfg, out, table = cross_task
    assert [r["config"] for r in table.rows][0] == "baseline"
    assert len(table.rows) == 9
    for r in table.rows:
        assert r["task_loss_std"] >= 0
        if r["direction"]:
            assert r["sign_inv_minus_trad"] in (-1.0, 0.0, 1.0)
            assert np.sign(r["inv_minus_trad"]) == r["sign_inv_minus_trad"]
            assert r["delta_vs_baseline"] == pytest.approx(r["task_loss_mean"] - table.rows[0]["task_loss_mean"])
            assert r["eff_rank_mean"] >= 0


def test_summary_statistics_match_run_files(cross_task):
    cfg, out, table = cross_task
    for r in table.rows:
        finals = []
        for seed in cfg.seeds:
            with open(out / "runs" / f"{r['hash']}_{seed}.csv") as fh:
                finals.append(read_record_csv(fh).metrics[-1]["val_loss"])
        assert r["task_loss_mean"] == np.mean(finals)
        assert r["task_loss_std"] == pytest.approx(np.std(finals, ddof=1), abs=1e-15)


def test_outputs_round_trip(cross_task):
    cfg, out, table = cross_task
    with open(out / "summary.csv") as fh:
        back = read_summary_csv(fh)
    assert back.columns == table.columns
    for a, b in zip(back.rows, table.rows):
        assert {k: v for k, v in a.items() if v is not None} == {k: v for k, v in b.items() if v is not None}
    traces = sorted((out / "traces").glob("*.csv"))
    assert len(traces) == 8 * len(cfg.seeds)
    with open(traces[0]) as fh:
        assert read_trace_csv(fh).epochs == [2, 4, 6]
    assert parse_config(out / "config.ini") == cfg
    manifest = (out / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "config,hash,seed,status,detail"
    assert all(",ok," in line for line in manifest[1:])


def test_identical_invocations_are_byte_identical(cross_task, tmp_path):
    cfg, out, _ = cross_task
    run_experiment(cfg, out_dir=tmp_path)
    for path in sorted(out.rglob("*.csv")):
        assert (tmp_path / path.relative_to(out)).read_bytes() == path.read_bytes(), path


def test_parallel_matches_serial(tmp_path):
    cfg = tiny("[teacher]\nkind = random-frozen\n[distill]\nmethods = fitnets\n")
    run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, jobs=2, out_dir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_spectral_and_linear_map_modes(tmp_path):
    table = run_experiment(tiny("[spectral]\nr = 1, 2\n"), out_dir=tmp_path / "s")
    assert [r["config"] for r in table.rows] == ["spectral/r=1", "spectral/r=2"]
    lm = tiny("[experiment]\nmode = linear-map\n[teacher]\nkind = pretrained-task-reg\n")
    table = run_experiment(lm, out_dir=tmp_path / "l")
    assert table.rows[0]["config"] == "pretrained-task-reg/linear-map/"
    claims = harness.check_preset("linear-map", table, tmp_path / "l")
    assert claims[0].detail.endswith("/2")


def test_out_dir_priority(monkeypatch, tmp_path):
    cfg = tiny()
    monkeypatch.delenv("XTKD_OUT", raising=False)
    assert harness.resolve_out_dir(cfg) == harness.Path(harness.DEFAULT_OUT)
    monkeypatch.setenv("XTKD_OUT", str(tmp_path / "env"))
    assert harness.resolve_out_dir(cfg) == tmp_path / "env"
    assert harness.resolve_out_dir(cfg, str(tmp_path / "flag")) == tmp_path / "flag"


def test_failure_writes_partial_manifest(tmp_path, monkeypatch):
    cfg = tiny("[experiment]\nseeds = 0, 1, 2\n")
    real = harness.execute_run

    def flaky(cfg, spec, seed, *a):
        if seed == 1:
            raise harness.XtkdError("boom")
        return real(cfg, spec, seed, *a)

    monkeypatch.setattr(harness, "execute_run", flaky)
    with pytest.raises(harness.RunFailure, match="seed 1"):
        run_experiment(cfg, out_dir=tmp_path)
    status = [line.split(",")[3] for line in (tmp_path / "manifest.csv").read_text().splitlines()[1:]]
    assert status == ["ok", "failed", "not-run"]
    assert not (tmp_path / "summary.csv").exists()


def test_jobs_must_be_positive(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(tiny(), jobs=0, out_dir=tmp_path)


def test_claims_evaluate_on_synthetic_tables():
    cols = ["config", "task_loss_mean", "task_loss_std", "spectral_r"]
    table = harness.SummaryTable(cols, [
        {"config": "baseline", "task_loss_mean": 1.0, "task_loss_std": 0.1, "spectral_r": 0},
        {"config": "spectral/r=1", "task_loss_mean": 0.95, "task_loss_std": 0.1, "spectral_r": 1},
        {"config": "spectral/r=2", "task_loss_mean": 0.8, "task_loss_std": 0.1, "spectral_r": 2},
    ])
    (claim,) = harness.check_preset("teacher-free-sweep", table)
    assert claim.passed and "r=2" in claim.detail
    table.rows[2]["task_loss_mean"] = 0.95
    assert not harness.check_preset("teacher-free-sweep", table)[0].passed
