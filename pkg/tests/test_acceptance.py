"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-9 share one set of distillation runs (3 seeds x {RAPM,
relative-only RAPM, PCM}) at the shipped default configuration; that
fixture dominates the runtime of the suite.
"""

import time

import numpy as np
import pytest
import sympy as sp

from conftest import record, same, snapshot
import rapm.distill as D
from rapm import config as C
from rapm.autodiff import Tape, Value, backward, linear, mean, silu, square, sub
from rapm.diffusion import (DEFAULT_SCHEDULE, GaussianMixture, MixtureOracle, ddim_multi,
                            eight_gaussians)
from rapm.distill import (DistillConfig, DistillState, rapm_forward, rapm_iteration, rapm_slot,
                          sfd_iteration, train)
from rapm.eval import sample_data, sample_teacher, w2_evaluator, wasserstein2
from rapm.models import (MlpDenoiser, checkpoint_bytes, checkpoint_from_bytes,
                         student_from_teacher)
from rapm.pipeline import train_teacher
from rapm.trajectories import (CoarseGrid, draw_initial, generate_store, generate_trajectory,
                               store_read, store_size, store_write)

S = DEFAULT_SCHEDULE
SEEDS = (0, 1, 2)


def _perturb(params, seed, size=0.1):
    rng = np.random.default_rng(seed)
    for p in params:
        p.data = p.data + size * rng.standard_normal(p.data.shape)


def _f64_trajectories(teacher, grid, count, seed=0):
    return [generate_trajectory(teacher, grid, *draw_initial(seed, i, teacher.dim,
                                                             teacher.n_labels))
            for i in range(count)]


# ----------------------------------------------------------------------------
# shared trained teacher and distillation runs

@pytest.fixture(scope="module")
def defaults():
    return C.resolve()


@pytest.fixture(scope="module")
def trained(defaults):
    """Teacher trained with the default settings plus its trajectory store."""
    cfg = defaults
    cpu0 = time.process_time()
    gm = C.mixture_from(cfg)
    m, t = cfg["model"], cfg["teacher"]
    teacher = MlpDenoiser(gm.dim, gm.n_labels, m["hidden"], m["depth"], m["n_freq"],
                          seed=cfg["seed"])
    train_teacher(teacher, gm, t["steps"], t["batch"], t["lr"], cfg["seed"], t["log_every"])
    teacher.freeze()
    cpu_teacher = time.process_time() - cpu0
    grid = C.grid_from(cfg)
    cpu0 = time.process_time()
    store = generate_store(teacher, grid, cfg["trajectories"]["count"], cfg["seed"],
                           gm.n_labels)
    cpu_store = time.process_time() - cpu0
    held = sample_data(gm, cfg["eval"]["count"], cfg["eval"]["seed"])
    return dict(teacher=teacher, store=store, grid=grid, gm=gm, held=held,
                cpu_teacher=cpu_teacher, cpu_store=cpu_store)


@pytest.fixture(scope="module")
def runs(defaults, trained):
    """Final and checkpoint w2 for every (variant, seed) at the default budget."""
    variants = {"rapm": ("rapm", {}), "relative_only": ("rapm", {"distill.absolute": False}),
                "pcm": ("pcm", {"distill.method": "pcm"})}
    out = {}
    for name, (method, over) in variants.items():
        for seed in SEEDS:
            cfg = C.resolve(defaults, {**over, "seed": seed})
            dcfg = C.distill_from(cfg)
            state = DistillState.create(trained["teacher"], dcfg)
            evaluator = w2_evaluator(dcfg.grid, trained["held"], cfg["eval"]["seed"] + 1)
            cpu0 = time.process_time()
            rep = train(method, state, dcfg, store=trained["store"], mixture=trained["gm"],
                        evaluator=evaluator, eval_every=cfg["eval"]["every"])
            cps = rep.checkpoints()
            out[name, seed] = dict(checkpoints=cps, final=cps[-1][1],
                                   cpu=time.process_time() - cpu0)
            print(f"{name} seed {seed}: final w2 {cps[-1][1]:.4f} "
                  f"({out[name, seed]['cpu']:.0f} s CPU)")
    return out


# ----------------------------------------------------------------------------
# 1

def _mlp_loss(params, x, y):
    w1, b1, w2, b2, w3, b3 = params
    h = silu(linear(x, w1, b1))
    h = silu(linear(h, w2, b2))
    return mean(square(sub(linear(h, w3, b3), y)))


def test_criterion_01_autodiff_matches_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n, d_in, h1, h2, d_out = rng.integers(1, 7, size=5)
        shapes = [(h1, d_in), (h1,), (h2, h1), (h2,), (d_out, h2), (d_out,)]
        arrs = [rng.standard_normal(s) for s in shapes]
        x, y = Value(rng.standard_normal((n, d_in))), Value(rng.standard_normal((n, d_out)))
        params = [Value(a, requires_grad=True) for a in arrs]
        with Tape():
            grads = backward(_mlp_loss(params, x, y))
        for k, p in enumerate(params):
            fd = np.zeros_like(arrs[k])
            for i in np.ndindex(arrs[k].shape):
                vals = []
                for sgn in (1, -1):
                    ps = [Value(a) for a in arrs]
                    ps[k] = Value(arrs[k].copy())
                    ps[k].data[i] += sgn * 1e-6
                    vals.append(float(_mlp_loss(ps, x, y).data))
                fd[i] = (vals[0] - vals[1]) / 2e-6
            err = np.max(np.abs(grads[p] - fd)) / max(1e-8, np.max(np.abs(fd)))
            worst = max(worst, err)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record(1, "autodiff vs central differences", ok,
           f"worst relative error {worst:.2e} (< 1e-5) over 100 MLPs in {elapsed:.1f} s (< 60 s)")
    assert ok


# ----------------------------------------------------------------------------
# 2 and 3

@pytest.fixture(scope="module")
def graph_setup(trained):
    teacher = trained["teacher"]
    grid = CoarseGrid.uniform(4, 25)
    cfg = DistillConfig(grid, iterations=100, seed=5)
    state = DistillState.create(teacher, cfg)
    _perturb(state.student.parameters(), 1, 0.3)
    _perturb(state.disc_parameters(), 2, 0.3)
    traj = _f64_trajectories(teacher, grid, 1, seed=9)[0]
    return state, cfg, traj


def _student_grads(state, traj, cfg, k=51):
    with Tape():
        p = rapm_forward(state, traj, cfg, k)
        g = backward(p.student_loss, wrt=p.relative_raw)
    params = state.student.parameters()
    return [g[p_] for p_ in params], [g[r] for r in p.relative_raw]


def test_criterion_02_relative_target_is_constant(graph_setup, monkeypatch):
    state, cfg, traj = graph_setup
    base, at_raw = _student_grads(state, traj, cfg)
    zero_at_target = all(np.all(g == 0.0) for g in at_raw)
    # extra stop-gradients around every detach must not change anything
    once = D.detach
    monkeypatch.setattr(D, "detach", lambda v: once(once(once(v))))
    wrapped, _ = _student_grads(state, traj, cfg)
    monkeypatch.setattr(D, "detach", once)
    identical = same(base, wrapped)
    # control: letting gradients through the target changes them
    leaky, _ = _student_grads(state, traj, DistillConfig(cfg.grid, iterations=100, seed=5,
                                                         detach_relative=False))
    sensitive = not same(base, leaky)
    ok = zero_at_target and identical and sensitive
    record(2, "first detach: no gradient through the relative target", ok,
           f"grad at target exactly 0: {zero_at_target}; extra detaches bit-identical: "
           f"{identical}; control without detach differs: {sensitive}")
    assert ok


def test_criterion_03_slots_are_gradient_isolated(graph_setup):
    state, cfg, traj = graph_setup
    params = state.student.parameters()
    k, lam = 51, cfg.adv_scale(51)

    def slot_grads(config):
        """Per-slot gradients inside the full rollout and from an isolated slot."""
        with Tape():
            full = rapm_forward(state, traj, config, k)
            inside = []
            for slot_loss in full.slot_losses:
                g = backward(slot_loss)
                inside.append([g.get(p) for p in params])
        isolated = []
        z = Value(traj.positions[cfg.grid.N][None, :])
        with Tape():
            for n in range(cfg.grid.N - 1, -1, -1):
                sp_ = rapm_slot(state, traj, config, n, Value(z.data.copy()), False, lam)
                g = backward(sp_.student_loss)
                isolated.append([g.get(p) for p in params])
                z = sp_.z_phi
        return inside, isolated

    inside, isolated = slot_grads(cfg)
    bit_identical = all(same(a, b) for a, b in zip(inside, isolated))
    leaky_cfg = DistillConfig(cfg.grid, iterations=100, seed=5, detach_slots=False)
    l_inside, l_isolated = slot_grads(leaky_cfg)
    # slot N-1 starts from the noise either way; later slots must differ without the detach
    sensitive = same(l_inside[0], l_isolated[0]) and not all(
        same(a, b) for a, b in zip(l_inside[1:], l_isolated[1:]))
    ok = bit_identical and sensitive
    record(3, "second detach: per-slot gradient isolation", ok,
           f"slot gradients in rollout == isolated slot, bitwise: {bit_identical}; "
           f"control without detach differs: {sensitive}")
    assert ok


# ----------------------------------------------------------------------------
# 4

def test_criterion_04_ddim_first_order():
    gm = eight_gaussians()
    orc = MixtureOracle(gm)
    rng = np.random.default_rng(4)
    z = S.sigma(S.T) * rng.standard_normal((64, 2))
    cond = rng.integers(2, size=64)
    ref = ddim_multi(orc, z, S.T, S.t_min, 400, cond).data
    e25 = np.linalg.norm(ddim_multi(orc, z, S.T, S.t_min, 25, cond).data - ref, axis=1)
    e50 = np.linalg.norm(ddim_multi(orc, z, S.T, S.t_min, 50, cond).data - ref, axis=1)
    ratio = float(np.median(e25 / e50))
    ok = 1.7 <= ratio <= 2.3
    record(4, "DDIM first order on the exact mixture teacher", ok,
           f"median error ratio M=25/M=50 vs M=400 = {ratio:.3f} (in [1.7, 2.3])")
    assert ok


# ----------------------------------------------------------------------------
# 5

def _ddim_affine_map():
    """Symbolic DDIM step for N(mu, s^2 I) data with the exact noise prediction."""
    z, mu, s, tf, tt, th = sp.symbols("z mu s t_f t_t theta", real=True)
    a_f, s_f, a_t, s_t = sp.cos(th * tf), sp.sin(th * tf), sp.cos(th * tt), sp.sin(th * tt)
    eps = s_f * (z - a_f * mu) / (a_f**2 * s**2 + s_f**2)
    step = sp.expand(a_t * (z - s_f * eps) / a_f + s_t * eps)
    slope = sp.simplify(sp.diff(step, z))
    offset = sp.simplify(step.subs(z, 0))
    return sp.lambdify((mu, s, tf, tt, th), slope), sp.lambdify((mu, s, tf, tt, th), offset)


def test_criterion_05_oracle_trajectory_is_closed_form():
    slope, offset = _ddim_affine_map()
    mu, s = np.array([0.6, -1.1]), 0.5
    gm = GaussianMixture([1.0], [mu], s)
    grid = CoarseGrid.uniform(4, 25)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(16):
        zN = S.sigma(S.T) * rng.standard_normal(2)
        tr = generate_trajectory(MixtureOracle(gm), grid, zN)
        z = zN.copy()
        for n in range(grid.N - 1, -1, -1):
            ts = np.linspace(*grid.slot(n), grid.M + 1)
            for a, b in zip(ts[:-1], ts[1:]):
                z = slope(mu, s, a, b, S.theta) * z + offset(mu, s, a, b, S.theta)
            worst = max(worst, float(np.max(np.abs(tr.positions[n] - z))))
    ok = worst <= 1e-6
    record(5, "exact-oracle trajectory equals the closed-form affine map", ok,
           f"max coordinate deviation {worst:.2e} (<= 1e-6) over 16 trajectories x 5 positions")
    assert ok


# ----------------------------------------------------------------------------
# 6

def test_criterion_06_zero_init_identity(trained):
    teacher = trained["teacher"]
    student = student_from_teacher(teacher, 8, seed=3)
    rng = np.random.default_rng(6)
    z = rng.standard_normal((256, 2))
    t = rng.uniform(S.t_min, S.T, 256)
    c = rng.integers(2, size=256)
    predict_equal = np.array_equal(student.eps(z, t, c), teacher.eps(z, t, c))
    grid = CoarseGrid.uniform(4, 1)
    cfg = DistillConfig(grid, iterations=100, seed=3)
    state = DistillState.create(teacher, cfg)
    values = []
    for traj in _f64_trajectories(teacher, grid, 32, seed=6):
        for k in (0, 1):        # critic branch and student branch at iteration 0/1
            with Tape():
                row = rapm_forward(state, traj, cfg, k).row
            values += row["slot_huber_rel"] + row["slot_huber_abs"]
    all_zero = all(v == 0.0 for v in values)
    ok = predict_equal and all_zero
    record(6, "zero-init student equals teacher; M=1 Huber terms vanish", ok,
           f"predictions bit-identical: {predict_equal}; "
           f"{len(values)} slot Huber values all exactly 0: {all_zero}")
    assert ok


# ----------------------------------------------------------------------------
# 7, 8, 9

def test_criterion_07_distillation_quality(defaults, trained, runs):
    grid = trained["grid"]
    teacher_w2 = [wasserstein2(sample_teacher(trained["teacher"], grid, 1024, 100 + s),
                               trained["held"]).value for s in SEEDS]
    student = [runs["rapm", s]["final"] for s in SEEDS]
    med_t, med_s = float(np.median(teacher_w2)), float(np.median(student))
    cpu = trained["cpu_teacher"] + trained["cpu_store"] + max(runs["rapm", s]["cpu"] for s in SEEDS)
    ok = med_s <= 1.5 * med_t and cpu < 30 * 60
    record(7, "RAPM N=4 student quality vs teacher M=25", ok,
           f"median student w2 {med_s:.4f} <= 1.5 x teacher {med_t:.4f} = {1.5 * med_t:.4f}; "
           f"seeds {[round(v, 4) for v in student]}; full run {cpu / 60:.1f} CPU-min (< 30)")
    assert ok


def test_criterion_08_absolute_terms_help(runs):
    both = [runs["rapm", s]["final"] for s in SEEDS]
    rel = [runs["relative_only", s]["final"] for s in SEEDS]
    ok = np.median(both) <= np.median(rel)
    record(8, "relative+absolute beats relative-only", ok,
           f"median final w2 {np.median(both):.4f} <= {np.median(rel):.4f}; "
           f"both {[round(v, 4) for v in both]}, relative-only {[round(v, 4) for v in rel]}")
    assert ok


def test_criterion_09_stability(runs):
    lines, per_seed = [], []
    for s in SEEDS:
        vals = np.array([v for _, v in runs["rapm", s]["checkpoints"]])
        q = max(1, len(vals) // 4)
        first, last = float(np.median(vals[:q])), float(np.median(vals[-q:]))
        per_seed.append(last <= first)
        lines.append(f"seed {s}: {last:.3f} <= {first:.3f}")
    rapm = float(np.median([runs["rapm", s]["final"] for s in SEEDS]))
    pcm = float(np.median([runs["pcm", s]["final"] for s in SEEDS]))
    ok = all(per_seed) and rapm <= pcm
    record(9, "RAPM curve improves and beats PCM", ok,
           f"final-quarter <= first-quarter median ({'; '.join(lines)}); "
           f"median final w2 RAPM {rapm:.4f} <= PCM {pcm:.4f}")
    assert ok


# ----------------------------------------------------------------------------
# 10

def test_criterion_10_sfd_equivalence(trained):
    teacher = trained["teacher"]
    grid = CoarseGrid.uniform(4, 25)
    trajs = [trained["store"][i] for i in range(40)]
    rapm_cfg = DistillConfig(grid, relative=False, adv_weight=0.0, iterations=80, seed=7,
                             lr_floor=1.0)
    sfd_cfg = DistillConfig(grid, relative=False, adv_weight=0.0, iterations=40, seed=7,
                            lr_floor=1.0, per_slot_updates=False)
    r_state = DistillState.create(teacher, rapm_cfg)
    s_state = DistillState.create(teacher, sfd_cfg, discriminators=False)
    worst, compared = 0.0, 0
    for i, traj in enumerate(trajs):
        rapm_iteration(r_state, traj, rapm_cfg, 2 * i)            # critic-only step
        r = rapm_iteration(r_state, traj, rapm_cfg, 2 * i + 1)    # student step
        s = sfd_iteration(s_state, traj, sfd_cfg, i)
        diff = np.abs(np.array(r["slot_huber_abs"]) - np.array(s["slot_huber_abs"]))
        worst = max(worst, float(diff.max()))
        compared += len(diff)
    params_equal = same(snapshot(r_state.student.parameters()),
                        snapshot(s_state.student.parameters()))
    ok = worst <= 1e-12
    record(10, "RAPM (absolute only, no critic weight) equals SFD", ok,
           f"{compared} per-slot Huber values, max difference {worst:.1e} (<= 1e-12); "
           f"student parameters bit-identical after 40 updates: {params_equal}")
    assert ok


# ----------------------------------------------------------------------------
# 11

def test_criterion_11_persistence(trained, tmp_path):
    store = trained["store"]
    path = tmp_path / "trajectories.bin"
    store_write(path, store)
    back = store_read(path)
    store_ok = (np.array_equal(back.positions, store.positions)
                and np.array_equal(back.conditions, store.conditions)
                and back.grid.times == store.grid.times)
    store_write(tmp_path / "again.bin", back)
    bytes_ok = (tmp_path / "again.bin").read_bytes() == path.read_bytes()
    size = path.stat().st_size
    expected = 32 + 8 * (4 + 1) + len(store) * (4 + 5 * 2 * 4)
    size_ok = size == expected == store_size(4, 2, len(store))
    student = student_from_teacher(trained["teacher"], 8, seed=1)
    _perturb(student.parameters(), 11)
    ckpt_ok = True
    for model in (trained["teacher"], student):
        buf = checkpoint_bytes(model)
        again = checkpoint_from_bytes(buf)
        ckpt_ok &= checkpoint_bytes(again) == buf and all(
            np.array_equal(a.data, b.data) for a, b in zip(model.parameters(), again.parameters()))
    ok = store_ok and bytes_ok and size_ok and ckpt_ok
    record(11, "store and checkpoint round trips", ok,
           f"store bit-exact: {store_ok and bytes_ok}; size {size} == {expected}: {size_ok}; "
           f"teacher and student checkpoints bit-exact: {ckpt_ok}")
    assert ok


# ----------------------------------------------------------------------------
# 12

def test_criterion_12_alternation(trained):
    teacher = trained["teacher"]
    cfg = DistillConfig(trained["grid"], iterations=100, seed=12)
    state = DistillState.create(teacher, cfg)
    rng = np.random.default_rng(12)
    teacher_before = snapshot(teacher.parameters())
    violations = []
    for k in range(100):
        s0, d0 = snapshot(state.student.parameters()), snapshot(state.disc_parameters())
        rapm_iteration(state, trained["store"][int(rng.integers(len(trained["store"])))], cfg, k)
        s_changed = not same(s0, snapshot(state.student.parameters()))
        d_changed = not same(d0, snapshot(state.disc_parameters()))
        if (d_changed, s_changed) != (k % 2 == 0, k % 2 == 1):
            violations.append(k)
    frozen = same(teacher_before, snapshot(teacher.parameters()))
    ok = not violations and frozen
    record(12, "even steps move only critics, odd steps only the student", ok,
           f"violations in 100 iterations: {violations or 'none'}; teacher unchanged: {frozen}")
    assert ok
