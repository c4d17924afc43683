"""Run configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .diffusion import NoiseSchedule, eight_gaussians
from .distill import DistillConfig
from .trajectories import CoarseGrid

METHODS = ("rapm", "pcm", "sfd")

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "data": {"radius": 2.0, "std": 0.1, "n_labels": 2},
    "schedule": {"t_min": 1e-3, "T": 1.0, "alpha_end": 0.02},
    "model": {"hidden": 128, "depth": 3, "n_freq": 16},
    "teacher": {"oracle": False, "steps": 6000, "batch": 256, "lr": 1e-3, "log_every": 100},
    "grid": {"N": 4, "M": 25, "delta": None},
    "trajectories": {"count": 1000},
    "distill": {
        "method": "rapm",
        "iterations": 20000,
        "rank": 8,
        "disc_rank": 4,
        "lr_student": 1e-3,
        "lr_disc": 1e-3,
        "lr_floor": 0.1,
        "huber_delta": 0.1,
        "adv_weight": 0.05,
        "adv_warmup": 0.1,
        "relative": True,
        "absolute": True,
        "weights": None,
    },
    "eval": {"every": 500, "count": 1024, "seed": 12345},
}

# keys whose value may be null in addition to their default's type
_NULLABLE = {("grid", "delta"), ("distill", "weights")}
_LIST_KEYS = {("distill", "weights")}


class ConfigError(ValueError):
    pass


def _check_type(path: tuple, value, default):
    name = ".".join(path)
    if value is None:
        if path in _NULLABLE:
            return
        raise ConfigError(f"{name} may not be null")
    if path in _LIST_KEYS:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of numbers")
        return
    if path in _NULLABLE:
        default = 0.0
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{name} must be {type(default).__name__}, got {value!r}")


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(here)} must be an object")
            out[key] = _merge(base[key], value, here)
        else:
            _check_type(here, value, base[key])
            out[key] = value
    return out


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, dotted: str, value) -> dict:
    """Set ``a.b.c`` in a config document (returns a validated copy)."""
    over: dict = {}
    keys = dotted.split(".")
    node = over
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value
    return _merge(doc, over)


def resolve(doc: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- document <- dotted overrides, then semantic checks."""
    cfg = _merge(DEFAULTS, doc or {})
    for dotted, value in (overrides or {}).items():
        cfg = apply_override(cfg, dotted, value)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    d = cfg["data"]
    if d["radius"] <= 0 or d["std"] < 0 or not 1 <= d["n_labels"] <= 8:
        raise ConfigError("data needs radius > 0, std >= 0 and 1 <= n_labels <= 8")
    s = cfg["schedule"]
    if not 0 < s["t_min"] < s["T"] or not 0 < s["alpha_end"] < 1:
        raise ConfigError("schedule needs 0 < t_min < T and 0 < alpha_end < 1")
    m = cfg["model"]
    if m["hidden"] < 2 or m["depth"] < 1 or m["n_freq"] < 1:
        raise ConfigError("model sizes must be positive")
    t = cfg["teacher"]
    if t["steps"] < 1 or t["batch"] < 1 or t["lr"] <= 0 or t["log_every"] < 1:
        raise ConfigError("teacher.steps, batch, log_every and lr must be positive")
    g = cfg["grid"]
    if g["N"] < 1 or g["M"] < 1:
        raise ConfigError("grid.N and grid.M must be at least 1")
    if cfg["trajectories"]["count"] < 1:
        raise ConfigError("trajectories.count must be at least 1")
    ds = cfg["distill"]
    if ds["method"] not in METHODS:
        raise ConfigError(f"distill.method must be one of {METHODS}")
    if ds["iterations"] < 1:
        raise ConfigError("distill.iterations must be at least 1")
    if not 1 <= ds["rank"] < m["hidden"] or not 1 <= ds["disc_rank"] < m["hidden"]:
        raise ConfigError("adapter ranks must lie in [1, model.hidden)")
    if ds["lr_student"] <= 0 or ds["lr_disc"] <= 0:
        raise ConfigError("learning rates must be positive")
    if not 0 < ds["lr_floor"] <= 1:
        raise ConfigError("distill.lr_floor must lie in (0, 1]")
    e = cfg["eval"]
    if e["every"] < 1 or not 2 <= e["count"] <= 2048:
        raise ConfigError("eval.every >= 1 and 2 <= eval.count <= 2048")
    # the typed objects carry their own checks; surface them as config errors
    try:
        grid_from(cfg)
        distill_from(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> dict:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return doc


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical document, ignoring where outputs are written."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def run_id(cfg: dict) -> str:
    return f"{cfg['distill']['method']}-s{cfg['seed']}-{config_hash(cfg)[:10]}"


# ----------------------------------------------------------------------------
# typed views

def schedule_from(cfg: dict) -> NoiseSchedule:
    return NoiseSchedule(**cfg["schedule"])


def mixture_from(cfg: dict):
    d = cfg["data"]
    return eight_gaussians(d["radius"], d["std"], d["n_labels"])


def grid_from(cfg: dict) -> CoarseGrid:
    g = cfg["grid"]
    return CoarseGrid.uniform(g["N"], g["M"], schedule_from(cfg), g["delta"])


def distill_from(cfg: dict) -> DistillConfig:
    ds = cfg["distill"]
    keys = ("iterations", "rank", "disc_rank", "lr_student", "lr_disc", "lr_floor",
            "huber_delta", "adv_weight", "adv_warmup", "relative", "absolute", "weights")
    kw = {k: ds[k] for k in keys}
    if ds["method"] == "sfd":
        kw.update(relative=False, absolute=True, adv_weight=0.0)
    return DistillConfig(grid_from(cfg), seed=cfg["seed"], **kw)
