"""Configuration handling, the run-directory stages and the command line."""

import json

import numpy as np
import pytest

from rapm import config as C
from rapm import pipeline as P
from rapm.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from rapm.diffusion import MixtureOracle
from rapm.distill import REPORT_COLUMNS, NumericalAbort, read_report
from rapm.models import MlpDenoiser
from rapm.plotting import line_plot
from rapm.trajectories import store_read, store_size

FAST = ["--set", "teacher.steps=150", "--set", "teacher.batch=64", "--set", "model.hidden=32",
        "--set", "eval.count=128", "--set", "eval.every=20", "--set", "distill.iterations=40",
        "--set", "trajectories.count=12"]


# ----------------------------------------------------------------------------
# config

def test_defaults_resolve_and_hash_ignores_out():
    cfg = C.resolve()
    assert cfg["grid"] == {"N": 4, "M": 25, "delta": None}
    assert cfg["distill"]["iterations"] == 20000
    other = C.resolve({"out": "elsewhere"})
    assert C.config_hash(cfg) == C.config_hash(other)
    assert C.config_hash(cfg) != C.config_hash(C.resolve({"seed": 1}))


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"distill": {"nope": 1}},
    {"seed": "zero"},
    {"seed": -1},
    {"distill": {"method": "dmd"}},
    {"distill": {"relative": False, "absolute": False}},
    {"distill": {"weights": [1, 1]}},
    {"distill": {"iterations": True}},
    {"grid": {"delta": 5.0}},
    {"model": {"hidden": 8}, "distill": {"rank": 8}},
    {"eval": {"count": 4096}},
    {"data": 3},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(C.ConfigError):
        C.resolve(doc)


def test_relative_only_differs_in_one_field():
    full = C.resolve()
    rel = C.resolve(overrides={"distill.absolute": False})
    diff = [(s, k) for s in full if isinstance(full[s], dict)
            for k in full[s] if full[s][k] != rel[s][k]]
    assert diff == [("distill", "absolute")]


def test_sfd_method_disables_relative_and_adversarial_terms():
    d = C.distill_from(C.resolve({"distill": {"method": "sfd"}}))
    assert not d.relative and d.absolute and d.adv_weight == 0.0


# ----------------------------------------------------------------------------
# teacher training

def test_teacher_training_halves_heldout_loss(mixture):
    model = MlpDenoiser(2, 2, hidden=64, seed=0)
    rows = P.train_teacher(model, mixture, steps=600, batch=128, lr=2e-3, seed=0, log_every=100)
    first, last = rows[0][2], rows[-1][2]
    assert last <= 0.5 * first
    assert [r[0] for r in rows] == [0, 100, 200, 300, 400, 500, 600]


# ----------------------------------------------------------------------------
# command line

def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path), *FAST])


def test_full_pipeline_and_idempotence(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(out, "teacher-train") == EXIT_OK
        assert _run(out, "traj-gen") == EXIT_OK
        assert _run(out, "distill") == EXIT_OK
        assert _run(out, "sample") == EXIT_OK
        assert _run(out, "eval") == EXIT_OK
        assert _run(out, "report") == EXIT_OK
    for name in ("teacher.ckpt", "teacher_loss.csv", "trajectories.bin", "student.ckpt",
                 "report.csv", "samples.csv", "metrics.json", "w2.svg", "huber_abs.svg",
                 "teacher_loss.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "trajectories.bin").stat().st_size == store_size(4, 2, 12)
    rep = read_report(a / "report.csv")
    assert len(rep.rows) == 40 and [c[0] for c in rep.checkpoints()] == [0, 20, 39]
    summary = json.loads((a / "summary.json").read_text())
    cfg = json.loads((a / "config.json").read_text())
    assert summary["config_hash"] == C.config_hash(cfg)
    assert {"student_w2", "teacher_M25_w2", "student_mmd"} <= set(summary["final_metrics"])
    svgs = sorted(p.name for p in a.glob("*.svg"))
    assert svgs == sorted([c + ".svg" for c in REPORT_COLUMNS[1:-1]] + ["w2.svg", "teacher_loss.svg"])


def test_sfd_report_has_zero_adversarial_columns(tmp_path):
    assert _run(tmp_path, "teacher-train") == EXIT_OK
    assert _run(tmp_path, "traj-gen") == EXIT_OK
    assert _run(tmp_path, "distill", "--method", "sfd") == EXIT_OK
    rep = read_report(tmp_path / "report.csv")
    for c in ("adv_rel", "adv_abs", "disc1", "disc2", "huber_rel"):
        assert np.all(rep.column(c) == 0.0)


def test_overlay_report(tmp_path):
    runs = {}
    for method in ("rapm", "pcm"):
        out = tmp_path / method
        runs[method] = out
        assert _run(out, "teacher-train") == EXIT_OK
        if method == "rapm":
            assert _run(out, "traj-gen") == EXIT_OK
        assert _run(out, "distill", "--method", method) == EXIT_OK
    assert main(["report", "--out", str(runs["rapm"]), "--overlay", str(runs["pcm"])]) == EXIT_OK
    svg = (runs["rapm"] / "overlay_w2.svg").read_text()
    assert svg.count("<polyline") == 2 and "pcm seed 0" in svg


def test_oracle_teacher_and_single_trajectory(tmp_path):
    assert _run(tmp_path, "teacher-train", "--oracle") == EXIT_OK
    assert not (tmp_path / "teacher.ckpt").exists()
    cfg = C.resolve(C.load(tmp_path / "config.json"))
    assert isinstance(P.load_teacher(cfg), MixtureOracle)
    assert main(["traj-gen", "--out", str(tmp_path), "--count", "1"]) == EXIT_OK
    assert len(store_read(tmp_path / "trajectories.bin")) == 1
    assert main(["distill", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_error_exit_codes(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "missing")]) == EXIT_CONFIG
    assert main(["eval", "--out", str(tmp_path), "--set", "nope=1"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["teacher-train", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["distill", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["distill", "--relative-only", "--absolute-only"])
    assert exc.value.code == 2


def test_numerical_abort_exit_code(tmp_path, monkeypatch):
    def boom(cfg, on_row=None):
        raise NumericalAbort({c: float("nan") for c in REPORT_COLUMNS} | {"iter": 3})
    monkeypatch.setattr(P, "stage_distill", boom)
    assert main(["distill", "--out", str(tmp_path)]) == EXIT_NUMERIC


def test_config_file_and_flag_precedence(tmp_path):
    doc = tmp_path / "c.json"
    doc.write_text(json.dumps({"seed": 4, "distill": {"method": "pcm"}}))
    out = tmp_path / "run"
    assert main(["teacher-train", "--config", str(doc), "--out", str(out), "--seed", "9",
                 "--oracle"]) == EXIT_OK
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 9 and cfg["distill"]["method"] == "pcm" and cfg["teacher"]["oracle"]


def test_svg_has_fixed_viewbox_and_no_timestamp():
    svg = line_plot({"a": ([0, 1, 2], [1.0, 0.5, np.nan])}, "t", "x", "y", logy=True)
    assert 'viewBox="0 0 640 400"' in svg and svg.count("<polyline") == 1
    assert line_plot({"a": ([0, 1], [1, 2])}, "t", "x", "y") == line_plot(
        {"a": ([0, 1], [1, 2])}, "t", "x", "y")
    assert "no data" in line_plot({}, "t", "x", "y")
