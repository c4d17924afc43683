"""Command line: chain teacher training, trajectory generation, distillation,
sampling, evaluation and reporting over one run directory.

    rapm teacher-train --out runs/a
    rapm traj-gen --out runs/a
    rapm distill --out runs/a --method rapm
    rapm eval --out runs/a
    rapm report --out runs/a --overlay runs/b

Later stages pick up ``config.json`` from the run directory, so only the
first command needs ``--config``.  Exit status: 0 ok, 2 bad configuration or
missing inputs, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import pipeline as P
from .distill import REPORT_COLUMNS, NumericalAbort, read_report
from .models import CheckpointError
from .plotting import save_plot
from .trajectories import StoreError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MAX_PLOT_POINTS = 500

# report columns drawn on a log axis (all others are signed)
_LOG_COLUMNS = {"huber_rel", "huber_abs", "eval_metric"}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON configuration document")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="run directory (defaults to the config's out)")
    p.add_argument("--method", choices=C.METHODS, help="distillation trainer")
    p.add_argument("--oracle", action="store_true",
                   help="use the exact mixture denoiser as the teacher")
    abl = p.add_mutually_exclusive_group()
    abl.add_argument("--relative-only", action="store_true", help="drop the absolute-position terms")
    abl.add_argument("--absolute-only", action="store_true", help="drop the relative-position terms")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. distill.iterations=2000 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rapm", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("teacher-train", help="fit the teacher by denoising score matching")
    p = sub.add_parser("traj-gen", help="pre-compute teacher trajectories")
    p.add_argument("--count", type=int, help="number of trajectories (default from config)")
    sub.add_parser("distill", help="distil a few-step student")
    p = sub.add_parser("sample", help="write generated points to samples.csv")
    p.add_argument("--which", choices=("student", "teacher", "data"), default="student")
    p.add_argument("--M", type=int, help="teacher sub-steps per slot")
    sub.add_parser("eval", help="w2 / MMD against held-out data")
    p = sub.add_parser("report", help="SVG plots of the training report")
    p.add_argument("--overlay", nargs="+", default=[], metavar="RUN_DIR",
                   help="other runs whose eval curves share one plot with this one")
    for p in sub.choices.values():
        _common(p)
    return ap


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key] = C._parse_scalar(value)
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.method is not None:
        over["distill.method"] = args.method
    if args.oracle:
        over["teacher.oracle"] = True
    if args.relative_only:
        over["distill.absolute"] = False
    if args.absolute_only:
        over["distill.relative"] = False
    return over


def resolve_config(args) -> dict:
    if args.config:
        doc = C.load(args.config)
    elif args.out and (Path(args.out) / P.CONFIG_FILE).exists():
        doc = C.load(Path(args.out) / P.CONFIG_FILE)
    else:
        doc = {}
    return C.resolve(doc, _overrides(args))


# ----------------------------------------------------------------------------

def _thin(x: np.ndarray, y: np.ndarray):
    """Window means so long reports stay small on disk."""
    w = max(1, int(np.ceil(len(x) / MAX_PLOT_POINTS)))
    if w == 1:
        return x, y
    n = len(x) // w * w
    return x[:n].reshape(-1, w).mean(1), np.nanmean(y[:n].reshape(-1, w), 1)


def make_report(cfg: dict, overlay=()) -> list:
    out = Path(cfg["out"])
    if not out.is_dir():
        raise P.StageError(f"run directory {out} does not exist")
    written = []
    if (out / P.REPORT_FILE).exists():
        rep = read_report(out / P.REPORT_FILE)
        it = rep.column("iter")
        for col in REPORT_COLUMNS[1:]:
            y = rep.column(col)
            if col == "eval_metric":
                keep = ~np.isnan(y)
                x, y, name = it[keep], y[keep], "w2"
            else:
                (x, y), name = _thin(it, y), col
            path = out / f"{name}.svg"
            save_plot(path, {cfg["distill"]["method"]: (x, y)}, f"{name} vs iteration",
                      "iteration", name, logy=col in _LOG_COLUMNS)
            written.append(path)
    if (out / P.TEACHER_LOSS_FILE).exists():
        loss = P.read_loss_csv(out / P.TEACHER_LOSS_FILE)
        path = out / "teacher_loss.svg"
        save_plot(path, {"train": (loss["step"], loss["train_loss"]),
                         "held-out": (loss["step"], loss["heldout_loss"])},
                  "teacher DSM loss", "step", "loss", logy=True)
        written.append(path)
    if overlay:
        series = {}
        for run in (out, *map(Path, overlay)):
            rcfg = P.load_run_config(run)
            if not (run / P.REPORT_FILE).exists():
                raise P.StageError(f"{run} has no {P.REPORT_FILE}")
            cps = read_report(run / P.REPORT_FILE).checkpoints()
            label = f"{rcfg['distill']['method']} seed {rcfg['seed']} ({run.name})"
            series[label] = ([c[0] for c in cps], [c[1] for c in cps])
        path = out / "overlay_w2.svg"
        save_plot(path, series, "w2 to held-out data vs iteration", "iteration", "w2", logy=True)
        written.append(path)
    P.write_summary(cfg, _read_metrics(out))
    return written


def _read_metrics(out: Path):
    path = out / P.METRICS_FILE
    return json.loads(path.read_text()) if path.exists() else None


def _progress(every: int):
    def show(row):
        if row["iter"] % every == 0 and not np.isnan(row["eval_metric"]):
            print(f"iter {row['iter']:6d}  w2 {row['eval_metric']:.4f}  "
                  f"huber_rel {row['huber_rel']:.4g}  huber_abs {row['huber_abs']:.4g}",
                  flush=True)
    return show


def run(args) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "teacher-train":
        path = P.stage_teacher(cfg)
        print("oracle teacher selected; nothing trained" if path is None else f"wrote {path}")
    elif cmd == "traj-gen":
        if args.count is not None and args.count < 1:
            raise C.ConfigError("--count must be at least 1")
        print(f"wrote {P.stage_trajectories(cfg, args.count)}")
    elif cmd == "distill":
        rep = P.stage_distill(cfg, on_row=_progress(cfg["eval"]["every"]))
        P.write_summary(cfg)
        print(f"wrote {Path(cfg['out']) / P.STUDENT_FILE} ({len(rep.rows)} iterations)")
    elif cmd == "sample":
        print(f"wrote {P.stage_sample(cfg, args.which, args.M)}")
    elif cmd == "eval":
        metrics = P.stage_eval(cfg)
        for name, vals in metrics.items():
            print(f"{name:12s} w2 {vals['w2']['value']:.4f}  mmd {vals['mmd']['value']:.3e}")
    elif cmd == "report":
        for path in make_report(cfg, args.overlay):
            print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, P.StageError, StoreError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
