"""The two stop-gradients in one RAPM pass, made visible.

1. The relative target is a function of the student, but no gradient flows
   into it.
2. Each slot starts from the previous student position with its ancestry cut,
   so the gradient of slot n equals that of slot n run in isolation.

    python demos/04_detach_semantics.py
"""

import numpy as np

from rapm.autodiff import Tape, Value, backward
from rapm.distill import DistillConfig, DistillState, rapm_forward, rapm_slot
from rapm.models import MlpDenoiser
from rapm.trajectories import CoarseGrid, draw_initial, generate_trajectory

teacher = MlpDenoiser(2, 2, hidden=64, seed=0).freeze()
grid = CoarseGrid.uniform(4, 25)
traj = generate_trajectory(teacher, grid, *draw_initial(0, 0, 2, 2))


def fresh(**kw):
    cfg = DistillConfig(grid, iterations=100, **kw)
    state = DistillState.create(teacher, cfg)
    rng = np.random.default_rng(1)
    for p in state.student.parameters():        # move away from the zero-init point
        p.data = p.data + 0.3 * rng.standard_normal(p.data.shape)
    return state, cfg


def grad_norms(state, cfg):
    with Tape():
        p = rapm_forward(state, traj, cfg, k=51)
        g = backward(p.student_loss, wrt=p.relative_raw)
    at_target = [float(np.abs(g[r]).max()) for r in p.relative_raw]
    total = float(np.sqrt(sum((g[q] ** 2).sum() for q in state.student.parameters())))
    return at_target, total


# %% 1. gradient at the relative target
for flag in (True, False):
    state, cfg = fresh(detach_relative=flag)
    at_target, total = grad_norms(state, cfg)
    print(f"detach relative target={flag!s:5}: |grad| at targets {np.round(at_target, 6)}, "
          f"|grad phi| {total:.6f}")

# %% 2. slot isolation
for flag in (True, False):
    state, cfg = fresh(detach_slots=flag)
    params = state.student.parameters()
    with Tape():
        full = rapm_forward(state, traj, cfg, k=51)
        g_full = backward(full.slot_losses[-1])          # slot 0
    # replay slot 0 alone, from the same incoming position as a constant
    with Tape():
        z = Value(traj.positions[grid.N][None, :])
        for n in range(grid.N - 1, 0, -1):
            z = Value(rapm_slot(state, traj, cfg, n, z, False, cfg.adv_scale(51)).z_phi.data)
        alone = rapm_slot(state, traj, cfg, 0, z, False, cfg.adv_scale(51))
        g_alone = backward(alone.student_loss)
    diff = max(float(np.abs(g_full.get(q, 0) - g_alone.get(q, 0)).max()) for q in params)
    print(f"detach between slots={flag!s:5}: slot-0 gradient, rollout vs isolated, "
          f"max difference {diff:.3e}")
