"""Teacher, exact oracle and the DDIM sampler on the 8-Gaussian ring.

Trains a small teacher by denoising score matching, then compares how many
DDIM steps it needs against the closed-form mixture denoiser.

    python demos/01_teacher_and_sampler.py --steps 3000
"""

import argparse

import numpy as np

from rapm.diffusion import MixtureOracle, eight_gaussians
from rapm.eval import sample_data, sample_teacher, wasserstein2
from rapm.models import MlpDenoiser, save_checkpoint
from rapm.pipeline import train_teacher
from rapm.trajectories import CoarseGrid

ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
ap.add_argument("--steps", type=int, default=3000)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--save", help="write the teacher checkpoint here")
args = ap.parse_args()

# %% data: eight components on a circle of radius 2, two label families
gm = eight_gaussians(radius=2.0, std=0.1, n_labels=2)
held = sample_data(gm, 1024, seed=1000)
print("data vs data (noise floor of the metric): w2 = %.3f"
      % wasserstein2(sample_data(gm, 1024, seed=1), held).value)

# %% teacher: 3 x 128 MLP trained with Adam on the DSM loss
teacher = MlpDenoiser(2, gm.n_labels, seed=args.seed)
rows = train_teacher(teacher, gm, args.steps, seed=args.seed, log_every=max(1, args.steps // 10))
for step, train_loss, held_loss in rows:
    print(f"step {step:6d}  held-out DSM loss {held_loss:.4f}")
teacher.freeze()
if args.save:
    save_checkpoint(args.save, teacher)

# %% sampling quality vs number of DDIM steps per coarse slot (4 slots)
grid = CoarseGrid.uniform(4, 25)
oracle = MixtureOracle(gm)
print("\nsteps/slot   teacher w2   oracle w2")
for M in (1, 2, 5, 25):
    t = np.median([wasserstein2(sample_teacher(teacher, grid, 1024, s, M), held).value
                   for s in range(3)])
    o = np.median([wasserstein2(sample_teacher(oracle, grid, 1024, s, M), held).value
                   for s in range(3)])
    print(f"{M:10d}   {t:10.3f}   {o:9.3f}")
# The exact denoiser is nearly step-insensitive because it always points at a
# mixture component.  The learned teacher is not: with one step per slot its
# samples smear between components.  Distillation aims for M=25 quality from 4
# student evaluations.
