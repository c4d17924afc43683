"""What the student is asked to match, slot by slot.

For one stored teacher trajectory, prints the absolute targets (the stored
teacher positions) and the relative targets (one small teacher step, then
the frozen student finishing the slot), for a fresh student.

    python demos/02_position_matching_targets.py
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from rapm.autodiff import Tape
from rapm.diffusion import eight_gaussians
from rapm.distill import DistillConfig, DistillState, rapm_forward
from rapm.models import MlpDenoiser
from rapm.pipeline import train_teacher
from rapm.trajectories import CoarseGrid, generate_store, store_read, store_size, store_write

ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
ap.add_argument("--steps", type=int, default=1500, help="teacher training steps")
args = ap.parse_args()

gm = eight_gaussians()
teacher = MlpDenoiser(2, 2, seed=0)
train_teacher(teacher, gm, args.steps, log_every=args.steps)
teacher.freeze()

# %% pre-computed trajectories: 5 positions each for N=4, M=25
grid = CoarseGrid.uniform(4, 25)
store = generate_store(teacher, grid, 100, seed=7, n_labels=2)
path = Path(tempfile.mkdtemp()) / "trajectories.bin"
store_write(path, store)
print(f"store: {len(store)} trajectories, {path.stat().st_size} bytes "
      f"(format arithmetic says {store_size(4, 2, 100)})")
store = store_read(path, grid.delta)

# %% one RAPM forward pass on trajectory 0
traj = store[0]
cfg = DistillConfig(grid, iterations=1)
state = DistillState.create(teacher, cfg)
with Tape():
    p = rapm_forward(state, traj, cfg, k=1)
print(f"\ncondition {traj.condition}; times t_n = {np.round(grid.times, 3)}")
for i, n in enumerate(range(grid.N - 1, -1, -1)):
    rel = p.relative_raw[i].data[0]
    print(f"slot {n}: absolute target {np.round(traj.positions[n], 3)}"
          f"  relative target {np.round(rel, 3)}"
          f"  huber_abs {p.row['slot_huber_abs'][i]:.4f}"
          f"  huber_rel {p.row['slot_huber_rel'][i]:.5f}")
# The relative target starts from the teacher position, so early in training it
# is close to where the student itself lands; the absolute target is where the
# 25-step teacher actually went.  The student must bridge that gap.
