"""Trajectory-matching distillation: RAPM, plus the PCM and SFD baselines.

Every trainer consumes one trajectory (or one data sample) per iteration.
Adversarial terms use role-split hinge losses; RAPM and PCM keep the
even/odd alternation between discriminator and student updates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (AdamState, Tape, Value, adam_step, add, backward, detach, mean,
                       no_grad, relu, scale, shift, sqrt, square, sub, total)
from .diffusion import DEFAULT_SCHEDULE, NoiseSchedule, ddim_step
from .models import Discriminator, MlpDenoiser, student_from_teacher
from .trajectories import CoarseGrid, TeacherTrajectory

REPORT_COLUMNS = ("iter", "huber_rel", "adv_rel", "huber_abs", "adv_abs",
                  "disc1", "disc2", "eval_metric")


class NumericalAbort(RuntimeError):
    """A loss went non-finite; ``row`` holds the offending report row."""

    def __init__(self, row: dict):
        super().__init__(f"non-finite loss at iteration {row.get('iter')}: "
                         + ", ".join(f"{k}={row[k]}" for k in REPORT_COLUMNS[1:-1]))
        self.row = row


@dataclass
class DistillConfig:
    grid: CoarseGrid
    weights: tuple | None = None       # w_n per slot, index n; default all ones
    huber_delta: float = 0.1
    adv_weight: float = 0.05
    adv_warmup: float = 0.1            # fraction of iterations for the linear ramp
    relative: bool = True
    absolute: bool = True
    lr_student: float = 1e-3
    lr_disc: float = 1e-3
    lr_floor: float = 0.1              # final lr as a fraction of the initial (cosine decay)
    iterations: int = 20000
    seed: int = 0
    rank: int = 8
    disc_rank: int = 4
    per_slot_updates: bool = True      # SFD only
    # ablation knobs for the two stop-gradients
    detach_relative: bool = True
    detach_slots: bool = True

    def __post_init__(self):
        if not (self.relative or self.absolute):
            raise ValueError("enable at least one of the relative / absolute terms")
        if self.weights is None:
            self.weights = (1.0,) * self.grid.N
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != self.grid.N or min(self.weights) < 0:
            raise ValueError("need one non-negative weight per slot")
        if not 0 < self.lr_floor <= 1:
            raise ValueError("lr_floor must lie in (0, 1]")
        if self.huber_delta <= 0 or self.adv_weight < 0:
            raise ValueError("huber_delta must be positive and adv_weight non-negative")

    def adv_scale(self, k: int) -> float:
        ramp = self.adv_warmup * self.iterations
        if ramp <= 0:
            return self.adv_weight
        return self.adv_weight * min(1.0, (k + 1) / ramp)

    def lr_factor(self, k: int) -> float:
        """Cosine decay from 1 at k=0 to ``lr_floor`` at the last iteration."""
        if self.lr_floor == 1.0 or self.iterations < 2:
            return 1.0
        c = 0.5 * (1 + np.cos(np.pi * k / (self.iterations - 1)))
        return self.lr_floor + (1 - self.lr_floor) * c


@dataclass
class DistillState:
    """Models and optimiser state owned by one training run."""

    teacher: object
    student: object
    d1: Discriminator | None
    d2: Discriminator | None
    opt_student: AdamState
    opt_disc: AdamState
    schedule: NoiseSchedule = DEFAULT_SCHEDULE

    @classmethod
    def create(cls, teacher: MlpDenoiser, cfg: DistillConfig, discriminators: bool = True,
               schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> "DistillState":
        teacher.freeze()
        student = student_from_teacher(teacher, cfg.rank, seed=cfg.seed)
        d1 = d2 = None
        if discriminators:
            d1 = Discriminator(teacher, cfg.disc_rank, seed=cfg.seed + 1)
            d2 = Discriminator(teacher, cfg.disc_rank, seed=cfg.seed + 2)
        return cls(teacher, student, d1, d2, AdamState(lr=cfg.lr_student),
                   AdamState(lr=cfg.lr_disc), schedule)

    def disc_parameters(self) -> list:
        return [p for d in (self.d1, self.d2) if d is not None for p in d.parameters()]


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def append(self, row: dict):
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def checkpoints(self) -> list:
        return [(r["iter"], r["eval_metric"]) for r in self.rows if not math.isnan(r["eval_metric"])]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            write_rows(fh, self.rows, header=True)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if math.isnan(v) else format(float(v), ".17g")


def write_rows(fh, rows, header: bool = False):
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])


def read_report(path) -> TrainReport:
    rep = TrainReport()
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rep.append({c: (int(rec[c]) if c == "iter" else
                            (float(rec[c]) if rec[c] != "" else math.nan))
                        for c in REPORT_COLUMNS})
    return rep


# ----------------------------------------------------------------------------
# losses

def huber(a, b, delta: float) -> Value:
    """Pseudo-Huber distance delta^2 (sqrt(1 + |a-b|^2 / delta^2) - 1)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d2 = total(square(sub(a, b)))
    return scale(shift(sqrt(shift(scale(d2, 1.0 / delta**2), 1.0)), -1.0), delta**2)


def _hinge(real_score: Value, fake_score: Value) -> Value:
    return add(relu(shift(scale(real_score, -1.0), 1.0)), relu(shift(fake_score, 1.0)))


def adversarial_losses(D: Discriminator, fake, real, t_n: float, cond=None) -> tuple:
    """Hinge losses (disc_loss, gen_loss); the fake is detached for the critic."""
    real = detach(real) if isinstance(real, Value) else Value(real)
    d_real = mean(D.score(real, t_n, cond))
    d_fake_const = mean(D.score(detach(fake) if isinstance(fake, Value) else fake, t_n, cond))
    disc_loss = _hinge(d_real, d_fake_const)
    gen_loss = scale(mean(D.score(fake, t_n, cond)), -1.0)
    return disc_loss, gen_loss


def _adv_for_role(D, fake: Value, real: Value, t_n, cond, train_disc: bool, need_gen_graph: bool):
    """Adversarial terms computing only the graph the current update needs.

    Returns (disc_loss, gen_loss); the one not needed for the update is a
    constant with the same value.
    """
    if train_disc:
        d_real = mean(D.score(real, t_n, cond))
        d_fake = mean(D.score(detach(fake), t_n, cond))
        return _hinge(d_real, d_fake), Value(-d_fake.data)
    if need_gen_graph:
        d_fake = mean(D.score(fake, t_n, cond))
    else:
        with no_grad():
            d_fake = mean(D.score(fake, t_n, cond))
    with no_grad():
        d_real = mean(D.score(real, t_n, cond))
        disc = _hinge(d_real, Value(d_fake.data))
    return disc, scale(d_fake, -1.0)


def _row(k: int, **vals) -> dict:
    row = {c: 0.0 for c in REPORT_COLUMNS}
    row["iter"] = k
    row["eval_metric"] = math.nan
    row.update(vals)
    return row


def _check_finite(row: dict):
    if not all(math.isfinite(row[c]) for c in REPORT_COLUMNS[1:-1]):
        raise NumericalAbort(row)


def _as_row(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(1, -1)


def _update(loss: Value, params: list, opt: AdamState):
    grads = backward(loss)
    adam_step(params, [grads.get(p) for p in params], opt)


# ----------------------------------------------------------------------------
# RAPM

@dataclass
class RapmPass:
    """Graph of one RAPM forward pass (kept for gradient inspection)."""

    student_loss: Value
    disc_loss: Value
    slot_losses: list          # per-slot student loss, slot order N-1..0
    relative_raw: list         # pre-detach relative targets
    row: dict


@dataclass
class SlotPass:
    """One slot of a RAPM pass: the student position and the slot's losses."""

    z_phi: Value
    student_loss: Value
    disc_terms: list
    relative_raw: Value | None
    stats: dict


def rapm_slot(state: DistillState, traj: TeacherTrajectory, cfg: DistillConfig, n: int,
              z: Value, train_disc: bool, lam: float) -> SlotPass:
    """Losses of slot n given the incoming student position ``z`` at t_{n+1}."""
    grid, sched = cfg.grid, state.schedule
    student, teacher = state.student, state.teacher
    cond = traj.condition
    hi, lo = grid.slot(n)
    w = cfg.weights[n]
    stats = dict(huber_rel=0.0, adv_rel=0.0, huber_abs=0.0, adv_abs=0.0, disc1=0.0, disc2=0.0)
    if train_disc:
        with no_grad():
            z_phi = ddim_step(student, z, hi, lo, cond, sched)
    else:
        z_phi = ddim_step(student, z, hi, lo, cond, sched)
    terms, disc_terms, raw = [], [], None
    if cfg.relative:
        mid = grid.offset_time(n)
        z_delta = ddim_step(teacher, _as_row(traj.positions[n + 1]), hi, mid, cond, sched)
        if train_disc:
            with no_grad():
                raw = ddim_step(student, z_delta, mid, lo, cond, sched)
        else:
            raw = ddim_step(student, z_delta, mid, lo, cond, sched)
        z_hat = detach(raw) if cfg.detach_relative else raw
        hr = huber(z_phi, z_hat, cfg.huber_delta)
        terms.append(hr)
        if state.d1 is not None:
            dl, gl = _adv_for_role(state.d1, z_phi, detach(z_hat), lo, cond, train_disc, lam > 0)
            disc_terms.append(dl)
            if lam > 0 and not train_disc:
                terms.append(scale(gl, lam))
            stats["adv_rel"] = float(gl.data)
            stats["disc1"] = float(dl.data)
        stats["huber_rel"] = float(hr.data)
    if cfg.absolute:
        z_abs = Value(_as_row(traj.positions[n]))
        ha = huber(z_phi, z_abs, cfg.huber_delta)
        abs_terms = [ha]
        if state.d2 is not None:
            dl, gl = _adv_for_role(state.d2, z_phi, z_abs, lo, cond, train_disc, lam > 0)
            disc_terms.append(scale(dl, w))
            if lam > 0 and not train_disc:
                abs_terms.append(scale(gl, lam))
            stats["adv_abs"] = w * float(gl.data)
            stats["disc2"] = w * float(dl.data)
        terms.append(scale(_sum(abs_terms), w))
        stats["huber_abs"] = float(ha.data)
    return SlotPass(z_phi, _sum(terms), disc_terms, raw, stats)


def rapm_forward(state: DistillState, traj: TeacherTrajectory, cfg: DistillConfig, k: int,
                 train_disc: bool | None = None) -> RapmPass:
    """Forward pass of one RAPM iteration; must run inside an active Tape.

    Slots run from n = N-1 down to 0.  Each slot starts from the previous
    student position, detached so that slots do not share gradients.
    """
    grid = cfg.grid
    if not traj.grid.same_as(grid) or traj.grid.times != grid.times:
        raise ValueError("trajectory grid differs from the configured grid")
    train_disc = (k % 2 == 0) if train_disc is None else train_disc
    lam = cfg.adv_scale(k)
    z = Value(_as_row(traj.positions[grid.N]))
    slots = []
    for n in range(grid.N - 1, -1, -1):
        sp = rapm_slot(state, traj, cfg, n, z, train_disc, lam)
        slots.append(sp)
        z = detach(sp.z_phi) if cfg.detach_slots else sp.z_phi

    disc_terms = [t for sp in slots for t in sp.disc_terms]
    totals = {c: sum(sp.stats[c] for sp in slots) for c in slots[0].stats}
    totals["huber_abs"] = sum(w * sp.stats["huber_abs"]
                              for w, sp in zip(reversed(cfg.weights), slots))
    row = _row(k, **totals)
    row["slot_huber_rel"] = [sp.stats["huber_rel"] for sp in slots] if cfg.relative else []
    row["slot_huber_abs"] = [sp.stats["huber_abs"] for sp in slots] if cfg.absolute else []
    return RapmPass(_sum([sp.student_loss for sp in slots]),
                    _sum(disc_terms) if disc_terms else Value(0.0),
                    [sp.student_loss for sp in slots],
                    [sp.relative_raw for sp in slots if sp.relative_raw is not None],
                    row)


def _sum(terms: list) -> Value:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def rapm_iteration(state: DistillState, traj: TeacherTrajectory, cfg: DistillConfig, k: int) -> dict:
    """One RAPM iteration: even k updates both critics, odd k the student."""
    with Tape():
        p = rapm_forward(state, traj, cfg, k)
        _check_finite(p.row)
        if k % 2 == 0:
            params = state.disc_parameters()
            if params:
                _update(p.disc_loss, params, state.opt_disc)
        else:
            _update(p.student_loss, state.student.parameters(), state.opt_student)
    return p.row


# ----------------------------------------------------------------------------
# PCM

def pcm_slot(grid: CoarseGrid, t: float) -> tuple:
    """Slot n with t_{n+1} > t - delta >= t_n and the (clamped) offset time."""
    mid = t - grid.delta
    if mid < grid.times[0]:
        return 0, grid.times[0]
    n = int(np.searchsorted(grid.times, mid, side="right")) - 1
    return min(n, grid.N - 1), mid


def pcm_iteration(state: DistillState, x, cond, t: float, noise, cfg: DistillConfig, k: int) -> dict:
    """One PCM iteration from a noised data sample (x, t, noise)."""
    sched = state.schedule
    grid = cfg.grid
    n, mid = pcm_slot(grid, t)
    lo = grid.times[n]
    train_disc = k % 2 == 0
    lam = cfg.adv_scale(k)
    z_t = Value(_as_row(sched.alpha(t) * np.asarray(x) + sched.sigma(t) * np.asarray(noise)))
    with Tape():
        z_delta = ddim_step(state.teacher, z_t, t, mid, cond, sched)
        z_hat = detach(ddim_step(state.student, z_delta, mid, lo, cond, sched))
        if train_disc:
            with no_grad():
                z_phi = ddim_step(state.student, z_t, t, lo, cond, sched)
        else:
            z_phi = ddim_step(state.student, z_t, t, lo, cond, sched)
        h = huber(z_phi, z_hat, cfg.huber_delta)
        terms = [h]
        a = c = 0.0
        disc_loss = None
        if state.d1 is not None:
            disc_loss, gl = _adv_for_role(state.d1, z_phi, z_hat, lo, cond, train_disc, lam > 0)
            if lam > 0 and not train_disc:
                terms.append(scale(gl, lam))
            a, c = float(gl.data), float(disc_loss.data)
        row = _row(k, huber_rel=float(h.data), adv_rel=a, disc1=c)
        row["slot"] = n
        _check_finite(row)
        if train_disc:
            if disc_loss is not None:
                _update(disc_loss, state.d1.parameters(), state.opt_disc)
        else:
            _update(_sum(terms), state.student.parameters(), state.opt_student)
    return row


# ----------------------------------------------------------------------------
# SFD

def sfd_iteration(state: DistillState, traj: TeacherTrajectory, cfg: DistillConfig, k: int = 0) -> dict:
    """Absolute-position matching slot by slot, student updated after each slot
    (or once per trajectory with ``per_slot_updates=False``)."""
    grid, sched = cfg.grid, state.schedule
    cond = traj.condition
    params = state.student.parameters()
    z = Value(_as_row(traj.positions[grid.N]))
    slot_vals, pending = [], []
    with Tape():
        for n in range(grid.N - 1, -1, -1):
            hi, lo = grid.slot(n)
            z_phi = ddim_step(state.student, z, hi, lo, cond, sched)
            h = huber(z_phi, Value(_as_row(traj.positions[n])), cfg.huber_delta)
            slot_vals.append(float(h.data))
            if not math.isfinite(slot_vals[-1]):
                raise NumericalAbort(_row(k, huber_abs=slot_vals[-1]))
            if cfg.per_slot_updates:
                _update(h, params, state.opt_student)
            else:
                pending.append(h)
            z = detach(z_phi)
        if pending:
            _update(_sum(pending), params, state.opt_student)
    row = _row(k, huber_abs=float(sum(slot_vals)))
    row["slot_huber_abs"] = slot_vals
    return row


# ----------------------------------------------------------------------------
# training loops

def train(method: str, state: DistillState, cfg: DistillConfig, *, store=None, mixture=None,
          evaluator=None, eval_every: int = 500, on_row=None) -> TrainReport:
    """Run ``cfg.iterations`` iterations of ``method`` in {rapm, pcm, sfd}.

    RAPM/SFD draw one stored trajectory per iteration; PCM draws one data
    sample.  ``evaluator(student) -> float`` is called at iteration 0, every
    ``eval_every`` iterations and at the last iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    sched = state.schedule
    report = TrainReport()
    K = cfg.iterations
    for k in range(K):
        f = cfg.lr_factor(k)
        state.opt_student.lr = cfg.lr_student * f
        state.opt_disc.lr = cfg.lr_disc * f
        if method == "rapm":
            row = rapm_iteration(state, store[int(rng.integers(len(store)))], cfg, k)
        elif method == "sfd":
            row = sfd_iteration(state, store[int(rng.integers(len(store)))], cfg, k)
        elif method == "pcm":
            n_labels = mixture.n_labels
            cond = int(rng.integers(n_labels))
            x = mixture.sample(1, rng, cond)[0]
            t = float(rng.uniform(sched.t_min, sched.T))
            noise = rng.standard_normal(mixture.dim)
            row = pcm_iteration(state, x, cond, t, noise, cfg, k)
        else:
            raise ValueError(f"unknown method {method!r}")
        if evaluator is not None and (k % eval_every == 0 or k == K - 1):
            row["eval_metric"] = float(evaluator(state.student))
        report.append(row)
        if on_row is not None:
            on_row(row)
    return report


def sfd_config(cfg: DistillConfig) -> DistillConfig:
    """The RAPM configuration that only matches absolute positions without critics."""
    return replace(cfg, relative=False, absolute=True, adv_weight=0.0)
