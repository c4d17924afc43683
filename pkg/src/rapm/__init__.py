"""Few-step distillation of a diffusion teacher by matching relative and
absolute positions along its sampling trajectories, with PCM- and SFD-style
baselines, all on a small numpy autodiff engine."""

from .autodiff import Tape, Value, backward, detach, no_grad
from .diffusion import (DEFAULT_SCHEDULE, GaussianMixture, MixtureOracle, NoiseSchedule,
                        ddim_multi, ddim_step, eight_gaussians)
from .distill import DistillConfig, DistillState, TrainReport, train
from .eval import sample_data, sample_student, sample_teacher, wasserstein2, mmd_rbf
from .models import Discriminator, LoraDenoiser, MlpDenoiser, student_from_teacher
from .trajectories import CoarseGrid, TrajectoryStore, generate_store, store_read, store_write

__version__ = "0.1.0"
