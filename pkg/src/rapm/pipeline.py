"""Teacher pretraining and the file-level stages chained by the command line.

A run directory holds everything one configuration produces::

    config.json        resolved configuration
    teacher.ckpt       trained denoiser (absent when the exact oracle is used)
    teacher_loss.csv   step, train_loss, heldout_loss
    trajectories.bin   stored teacher trajectories
    student.ckpt       distilled student
    report.csv         per-iteration training report
    samples.csv        generated points
    metrics.json       evaluation results
    summary.json       run id, config hash, final metrics
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import config as C
from .autodiff import AdamState, Tape, adam_step, backward, no_grad
from .diffusion import DEFAULT_SCHEDULE, MixtureOracle, NoiseSchedule, dsm_loss
from .distill import DistillState, TrainReport, read_report, train
from .eval import (MetricResult, mmd_rbf, sample_data, sample_student, sample_teacher,
                   w2_evaluator, wasserstein2)
from .models import MlpDenoiser, load_checkpoint, save_checkpoint
from .trajectories import generate_store, store_read, store_write

TEACHER_FILE = "teacher.ckpt"
TEACHER_LOSS_FILE = "teacher_loss.csv"
STORE_FILE = "trajectories.bin"
STUDENT_FILE = "student.ckpt"
REPORT_FILE = "report.csv"
SAMPLES_FILE = "samples.csv"
METRICS_FILE = "metrics.json"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.json"

HELDOUT_BATCH = 2048


class StageError(RuntimeError):
    """A stage is missing an input produced by an earlier stage."""


def _dsm_batch(gm, rng, batch: int, schedule: NoiseSchedule):
    cond = rng.integers(gm.n_labels, size=batch)
    x = gm.sample(batch, rng, cond)
    t = rng.uniform(schedule.t_min, schedule.T, batch)
    noise = rng.standard_normal((batch, gm.dim))
    return x, t, noise, cond


def train_teacher(model: MlpDenoiser, gm, steps: int, batch: int = 256, lr: float = 1e-3,
                  seed: int = 0, log_every: int = 100,
                  schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> list:
    """Fit ``model`` by denoising score matching with Adam.

    Returns rows (step, mean train loss over the window, loss on a fixed
    held-out batch).  The held-out batch never changes, so its loss is the
    curve to compare across steps.
    """
    rng = np.random.default_rng([seed, 0])
    held = _dsm_batch(gm, np.random.default_rng([seed, 1]), HELDOUT_BATCH, schedule)
    params = model.parameters()
    opt = AdamState(lr=lr)

    def heldout_loss() -> float:
        with no_grad():
            return float(dsm_loss(model, *held[:3], held[3], schedule).data)

    rows = [(0, float("nan"), heldout_loss())]
    window = []
    for step in range(1, steps + 1):
        x, t, noise, cond = _dsm_batch(gm, rng, batch, schedule)
        with Tape():
            loss = dsm_loss(model, x, t, noise, cond, schedule)
            grads = backward(loss)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"teacher loss went non-finite at step {step}")
        adam_step(params, [grads.get(p) for p in params], opt)
        window.append(float(loss.data))
        if step % log_every == 0 or step == steps:
            rows.append((step, float(np.mean(window)), heldout_loss()))
            window = []
    return rows


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "train_loss", "heldout_loss"))
        for step, tr, ho in rows:
            w.writerow((step, "" if np.isnan(tr) else format(tr, ".17g"), format(ho, ".17g")))


def read_loss_csv(path) -> dict:
    cols = {"step": [], "train_loss": [], "heldout_loss": []}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            for k in cols:
                cols[k].append(float(rec[k]) if rec[k] != "" else np.nan)
    return {k: np.array(v) for k, v in cols.items()}


# ----------------------------------------------------------------------------
# stages

def prepare_run(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(C.dumps(cfg))
    return out


def stage_teacher(cfg: dict) -> Path | None:
    """Train and save the teacher; with the oracle option nothing is trained."""
    out = prepare_run(cfg)
    if cfg["teacher"]["oracle"]:
        (out / TEACHER_FILE).unlink(missing_ok=True)
        return None
    m, t = cfg["model"], cfg["teacher"]
    gm = C.mixture_from(cfg)
    model = MlpDenoiser(gm.dim, gm.n_labels, m["hidden"], m["depth"], m["n_freq"], seed=cfg["seed"])
    rows = train_teacher(model, gm, t["steps"], t["batch"], t["lr"], cfg["seed"],
                         t["log_every"], C.schedule_from(cfg))
    write_loss_csv(out / TEACHER_LOSS_FILE, rows)
    save_checkpoint(out / TEACHER_FILE, model)
    return out / TEACHER_FILE


def load_teacher(cfg: dict):
    """The trained teacher of the run, or the exact mixture denoiser."""
    if cfg["teacher"]["oracle"]:
        return MixtureOracle(C.mixture_from(cfg), C.schedule_from(cfg))
    path = Path(cfg["out"]) / TEACHER_FILE
    if not path.exists():
        raise StageError(f"{path} missing; run teacher-train first")
    return load_checkpoint(path).freeze()


def stage_trajectories(cfg: dict, count: int | None = None) -> Path:
    out = prepare_run(cfg)
    teacher = load_teacher(cfg)
    count = cfg["trajectories"]["count"] if count is None else count
    store = generate_store(teacher, C.grid_from(cfg), count, cfg["seed"],
                           cfg["data"]["n_labels"], C.schedule_from(cfg))
    store_write(out / STORE_FILE, store)
    return out / STORE_FILE


def heldout_data(cfg: dict):
    e = cfg["eval"]
    return sample_data(C.mixture_from(cfg), e["count"], e["seed"])


def stage_distill(cfg: dict, on_row=None) -> TrainReport:
    """Distil a student; the report is written even when training aborts."""
    out = prepare_run(cfg)
    if cfg["teacher"]["oracle"]:
        raise C.ConfigError("the exact oracle has no weights to adapt; "
                            "distillation needs a trained teacher")
    teacher = load_teacher(cfg)
    method = cfg["distill"]["method"]
    dcfg = C.distill_from(cfg)
    sched = C.schedule_from(cfg)
    store = None
    if method != "pcm":
        path = out / STORE_FILE
        if not path.exists():
            raise StageError(f"{path} missing; run traj-gen first")
        store = store_read(path, dcfg.grid.delta)
        if not store.grid.same_as(dcfg.grid):
            raise C.ConfigError("stored trajectories were made on a different grid")
    state = DistillState.create(teacher, dcfg, discriminators=method != "sfd", schedule=sched)
    evaluator = w2_evaluator(dcfg.grid, heldout_data(cfg), cfg["eval"]["seed"] + 1, sched)
    rows = []

    def keep(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)
    try:
        report = train(method, state, dcfg, store=store, mixture=C.mixture_from(cfg),
                       evaluator=evaluator, eval_every=cfg["eval"]["every"], on_row=keep)
    finally:
        TrainReport(rows).write_csv(out / REPORT_FILE)
    save_checkpoint(out / STUDENT_FILE, state.student)
    return report


def load_student(cfg: dict):
    path = Path(cfg["out"]) / STUDENT_FILE
    if not path.exists():
        raise StageError(f"{path} missing; run distill first")
    return load_checkpoint(path)


def draw_samples(cfg: dict, which: str = "student", M: int | None = None):
    grid, sched = C.grid_from(cfg), C.schedule_from(cfg)
    e = cfg["eval"]
    if which == "student":
        return sample_student(load_student(cfg), grid, e["count"], e["seed"] + 1, sched)
    if which == "teacher":
        return sample_teacher(load_teacher(cfg), grid, e["count"], e["seed"] + 1, M, sched)
    if which == "data":
        return sample_data(C.mixture_from(cfg), e["count"], e["seed"] + 2)
    raise ValueError(f"unknown sample source {which!r}")


def stage_sample(cfg: dict, which: str = "student", M: int | None = None) -> Path:
    out = prepare_run(cfg)
    s = draw_samples(cfg, which, M)
    np.savetxt(out / SAMPLES_FILE, s.points, fmt="%.17g", delimiter=",", header="x,y",
               comments="")
    return out / SAMPLES_FILE


def _metric_dict(r: MetricResult) -> dict:
    return {"name": r.name, "value": r.value, "n": r.n, "seed": r.seed}


def stage_eval(cfg: dict) -> dict:
    """w2 and MMD of student and teacher samples against held-out data."""
    out = prepare_run(cfg)
    held = heldout_data(cfg)
    sources = {"teacher_M%d" % cfg["grid"]["M"]: draw_samples(cfg, "teacher"),
               "teacher_M1": draw_samples(cfg, "teacher", 1),
               "data": draw_samples(cfg, "data")}
    if (out / STUDENT_FILE).exists():
        sources = {"student": draw_samples(cfg, "student"), **sources}
    metrics = {name: {"w2": _metric_dict(wasserstein2(s, held)),
                      "mmd": _metric_dict(mmd_rbf(s, held))}
               for name, s in sources.items()}
    (out / METRICS_FILE).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_summary(cfg, metrics)
    return metrics


def write_summary(cfg: dict, metrics: dict | None = None) -> dict:
    out = Path(cfg["out"])
    final = {}
    if (out / REPORT_FILE).exists():
        rep = read_report(out / REPORT_FILE)
        cps = rep.checkpoints()
        if cps:
            final["train_w2_final"] = cps[-1][1]
        final["iterations"] = len(rep.rows)
    for name, vals in (metrics or {}).items():
        for metric, r in vals.items():
            final[f"{name}_{metric}"] = r["value"]
    summary = {"run_id": C.run_id(cfg), "config_hash": C.config_hash(cfg),
               "method": cfg["distill"]["method"], "seed": cfg["seed"],
               "final_metrics": final}
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_run_config(run_dir) -> dict:
    path = Path(run_dir) / CONFIG_FILE
    if not path.exists():
        raise StageError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    return C.resolve(C.load(path))
