"""Sampling and two-sample distances used as the quality metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist

from .diffusion import DEFAULT_SCHEDULE, GaussianMixture, NoiseSchedule, ddim_multi, ddim_step
from .trajectories import CoarseGrid

MAX_W2_POINTS = 2048


@dataclass
class SampleSet:
    points: np.ndarray
    source: str
    seed: int | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"non-finite samples from {self.source}")

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass
class MetricResult:
    name: str
    value: float
    n: int
    seed: int | None = None


def _initial(count: int, dim: int, n_labels: int, seed: int, schedule: NoiseSchedule):
    rng = np.random.default_rng(seed)
    z = float(schedule.sigma(schedule.T)) * rng.standard_normal((count, dim))
    cond = rng.integers(max(n_labels, 1), size=count) if n_labels else None
    return z, cond


def sample_student(student, grid: CoarseGrid, count: int, seed: int,
                   schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> SampleSet:
    """N one-step DDIM moves over the coarse grid from fresh noise."""
    if count < 1:
        raise ValueError("count must be positive")
    z, cond = _initial(count, student.dim, student.n_labels, seed, schedule)
    for n in range(grid.N - 1, -1, -1):
        hi, lo = grid.slot(n)
        z = ddim_step(student, z, hi, lo, cond, schedule).data
    return SampleSet(z, f"student-{grid.N}steps", seed)


def sample_teacher(teacher, grid: CoarseGrid, count: int, seed: int, M: int | None = None,
                   schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> SampleSet:
    """M DDIM sub-steps per coarse slot (grid.M by default)."""
    M = grid.M if M is None else M
    z, cond = _initial(count, teacher.dim, teacher.n_labels, seed, schedule)
    for n in range(grid.N - 1, -1, -1):
        hi, lo = grid.slot(n)
        z = ddim_multi(teacher, z, hi, lo, M, cond, schedule).data
    return SampleSet(z, f"teacher-{M}steps", seed)


def sample_data(gm: GaussianMixture, count: int, seed: int, n_labels: int | None = None) -> SampleSet:
    """Data points with uniformly drawn labels (the evaluation distribution)."""
    rng = np.random.default_rng(seed)
    n_labels = gm.n_labels if n_labels is None else n_labels
    cond = rng.integers(n_labels, size=count)
    return SampleSet(gm.sample(count, rng, cond), "data", seed)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, SampleSet) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def wasserstein2(a, b) -> MetricResult:
    """Exact W2 between two equal-size point clouds via optimal assignment."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise ValueError(f"wasserstein2 needs equal counts, got {len(pa)} and {len(pb)}")
    if len(pa) > MAX_W2_POINTS:
        raise ValueError(f"at most {MAX_W2_POINTS} points per set")
    cost = cdist(pa, pb, "sqeuclidean")
    r, c = linear_sum_assignment(cost)
    val = float(np.sqrt(max(cost[r, c].mean(), 0.0)))
    return MetricResult("w2", val, len(pa), getattr(a, "seed", None))


def median_bandwidth(a, b) -> float:
    pooled = np.concatenate([_points(a), _points(b)])
    d = pdist(pooled)
    return float(np.median(d[d > 0]))


def mmd2_unbiased(pa: np.ndarray, pb: np.ndarray, bandwidth: float) -> float:
    g = -0.5 / bandwidth**2
    kxx = np.exp(g * cdist(pa, pa, "sqeuclidean"))
    kyy = np.exp(g * cdist(pb, pb, "sqeuclidean"))
    kxy = np.exp(g * cdist(pa, pb, "sqeuclidean"))
    m, n = len(pa), len(pb)
    return ((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
            + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
            - 2.0 * kxy.mean())


def mmd_rbf(a, b, bandwidth: float | None = None) -> MetricResult:
    """Unbiased RBF-kernel MMD^2, clamped at zero; median heuristic bandwidth."""
    pa, pb = _points(a), _points(b)
    bw = median_bandwidth(pa, pb) if bandwidth is None else bandwidth
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    return MetricResult("mmd", max(mmd2_unbiased(pa, pb, bw), 0.0), len(pa),
                        getattr(a, "seed", None))


def mmd_permutation_null(a, b, bandwidth: float, n_perm: int = 200, seed: int = 0) -> np.ndarray:
    """MMD^2 values under random relabelling of the pooled sample."""
    pa, pb = _points(a), _points(b)
    pooled = np.concatenate([pa, pb])
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for i in range(n_perm):
        idx = rng.permutation(len(pooled))
        out[i] = mmd2_unbiased(pooled[idx[:len(pa)]], pooled[idx[len(pa):]], bandwidth)
    return out


def w2_evaluator(grid: CoarseGrid, reference: SampleSet, seed: int,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    """Callable student -> w2(student samples, reference) with fixed sampling noise."""
    def evaluate(student) -> float:
        s = sample_student(student, grid, reference.n, seed, schedule)
        return wasserstein2(s, reference).value
    return evaluate
