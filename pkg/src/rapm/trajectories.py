"""Teacher trajectories on a coarse time grid and their on-disk store.

Store layout (little-endian)::

    "RAPMTRAJ" | u32 version | u32 d | u32 N | u32 M | u64 count
    | (N+1) x f64 timesteps, t_N first
    | count x { u32 condition | (N+1) x d x f32 positions, z_N first }
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import DEFAULT_SCHEDULE, NoiseSchedule, ddim_multi

STORE_MAGIC = b"RAPMTRAJ"
STORE_VERSION = 1
_HEAD = struct.Struct("<8s4IQ")


class StoreError(Exception):
    pass


class StoreFormatError(StoreError):
    """Bad magic bytes or unsupported version."""


class StoreTruncatedError(StoreError):
    """File ends before the advertised records."""


class GridMismatchError(StoreError):
    """Records on different grids cannot share a store."""


@dataclass(frozen=True)
class CoarseGrid:
    """Times t_0 < t_1 < ... < t_N (index n gives t_n); M fine teacher steps
    per slot and the teacher offset ``delta`` used for relative targets."""

    times: tuple
    M: int = 25
    delta: float | None = None

    def __post_init__(self):
        ts = np.asarray(self.times, dtype=np.float64)
        if ts.ndim != 1 or len(ts) < 2:
            raise ValueError("grid needs at least two timesteps")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("grid times must be strictly increasing in n")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        object.__setattr__(self, "times", tuple(float(t) for t in ts))
        width = float(np.min(np.diff(ts)))
        if self.delta is None:
            object.__setattr__(self, "delta", width / self.M)
        elif not 0 < self.delta <= width * (1 + 1e-12):
            raise ValueError(f"delta must lie in (0, {width}], got {self.delta}")

    @classmethod
    def uniform(cls, N: int, M: int = 25, schedule: NoiseSchedule = DEFAULT_SCHEDULE,
                delta: float | None = None) -> "CoarseGrid":
        return cls(tuple(np.linspace(schedule.t_min, schedule.T, N + 1)), M, delta)

    @property
    def N(self) -> int:
        return len(self.times) - 1

    def slot(self, n: int) -> tuple:
        """(t_{n+1}, t_n) for slot n."""
        return self.times[n + 1], self.times[n]

    def offset_time(self, n: int) -> float:
        """t_{n+1} - delta, never below t_n (snapped onto t_n when within rounding)."""
        hi, lo = self.slot(n)
        mid = hi - self.delta
        if mid <= lo or abs(mid - lo) <= 1e-12 * max(1.0, abs(lo)):
            return lo
        return mid

    def same_as(self, other: "CoarseGrid") -> bool:
        return self.times == other.times and self.M == other.M


@dataclass
class TeacherTrajectory:
    """Positions z_n for n = 0..N (``positions[n]``); ``positions[N]`` is the noise."""

    grid: CoarseGrid
    condition: int
    positions: np.ndarray

    def __post_init__(self):
        if len(self.positions) != self.grid.N + 1:
            raise ValueError("trajectory must hold N + 1 positions")


def generate_trajectory(teacher, grid: CoarseGrid, z_N, condition: int = 0,
                        schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> TeacherTrajectory:
    """Run the teacher with M DDIM sub-steps per slot from t_N down to t_0."""
    z = np.atleast_2d(np.asarray(z_N, dtype=np.float64))
    out = np.empty((grid.N + 1, z.shape[1]))
    out[grid.N] = z[0]
    for n in range(grid.N - 1, -1, -1):
        hi, lo = grid.slot(n)
        z = ddim_multi(teacher, z, hi, lo, grid.M, condition, schedule).data
        out[n] = z[0]
    return TeacherTrajectory(grid, int(condition), out)


def draw_initial(seed: int, index: int, dim: int, n_labels: int,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> tuple:
    """Initial noise ~ N(0, sigma_T^2 I) and a uniform label, from a per-index sub-seed."""
    rng = np.random.default_rng([seed, index])
    z = float(schedule.sigma(schedule.T)) * rng.standard_normal(dim)
    return z, int(rng.integers(max(n_labels, 1)))


@dataclass
class TrajectoryStore:
    grid: CoarseGrid
    conditions: np.ndarray      # (count,) uint32
    positions: np.ndarray       # (count, N+1, d) float32, index n as in TeacherTrajectory

    def __post_init__(self):
        self.conditions = np.asarray(self.conditions, dtype=np.uint32)
        self.positions = np.asarray(self.positions, dtype=np.float32)
        if len(self.conditions) != len(self.positions) or len(self.positions) < 1:
            raise ValueError("store needs at least one record")
        if self.positions.shape[1] != self.grid.N + 1:
            raise GridMismatchError("records do not match the grid")

    def __len__(self):
        return len(self.conditions)

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def __getitem__(self, i: int) -> TeacherTrajectory:
        return TeacherTrajectory(self.grid, int(self.conditions[i]),
                                 self.positions[i].astype(np.float64))

    @classmethod
    def from_trajectories(cls, trajs) -> "TrajectoryStore":
        trajs = list(trajs)
        if not trajs:
            raise ValueError("store needs at least one record")
        grid = trajs[0].grid
        for tr in trajs[1:]:
            if not tr.grid.same_as(grid):
                raise GridMismatchError("trajectories use different grids")
        return cls(grid, [tr.condition for tr in trajs], np.stack([tr.positions for tr in trajs]))


def generate_store(teacher, grid: CoarseGrid, count: int, seed: int, n_labels: int = 1,
                   schedule: NoiseSchedule = DEFAULT_SCHEDULE, chunk: int = 256) -> TrajectoryStore:
    """Batched trajectory generation; record i depends only on (seed, i)."""
    dim = teacher.dim
    z0 = np.empty((count, dim))
    cond = np.empty(count, dtype=np.int64)
    for i in range(count):
        z0[i], cond[i] = draw_initial(seed, i, dim, n_labels, schedule)
    pos = np.empty((count, grid.N + 1, dim))
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        z = z0[lo:hi]
        c = cond[lo:hi] if n_labels else None
        pos[lo:hi, grid.N] = z
        for n in range(grid.N - 1, -1, -1):
            t_hi, t_lo = grid.slot(n)
            z = ddim_multi(teacher, z, t_hi, t_lo, grid.M, c, schedule).data
            pos[lo:hi, n] = z
    return TrajectoryStore(grid, cond, pos)


# ----------------------------------------------------------------------------

def store_size(N: int, d: int, count: int) -> int:
    return _HEAD.size + 8 * (N + 1) + count * (4 + (N + 1) * d * 4)


def _header(store: TrajectoryStore, count: int) -> bytes:
    g = store.grid
    return (_HEAD.pack(STORE_MAGIC, STORE_VERSION, store.dim, g.N, g.M, count)
            + np.asarray(g.times[::-1], dtype="<f8").tobytes())


def _records(store: TrajectoryStore) -> bytes:
    n1, d = store.positions.shape[1:]
    rec = np.empty(len(store), dtype=[("c", "<u4"), ("z", "<f4", (n1 * d,))])
    rec["c"] = store.conditions
    rec["z"] = store.positions[:, ::-1, :].reshape(len(store), -1)
    return rec.tobytes()


def store_write(path, store: TrajectoryStore):
    Path(path).write_bytes(_header(store, len(store)) + _records(store))


def _read_header(buf: bytes):
    if len(buf) < _HEAD.size:
        raise StoreTruncatedError("file shorter than the store header")
    magic, version, d, N, M, count = _HEAD.unpack_from(buf)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported store version {version}")
    end = _HEAD.size + 8 * (N + 1)
    if len(buf) < end:
        raise StoreTruncatedError("file ends inside the timestep table")
    times = np.frombuffer(buf[_HEAD.size:end], dtype="<f8")[::-1]
    return d, N, M, count, CoarseGrid(tuple(times), M), end


def store_read(path, delta: float | None = None) -> TrajectoryStore:
    buf = Path(path).read_bytes()
    d, N, M, count, grid, off = _read_header(buf)
    if delta is not None:
        grid = CoarseGrid(grid.times, M, delta)
    expected = store_size(N, d, count)
    if len(buf) < expected:
        raise StoreTruncatedError(f"expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise StoreFormatError(f"{len(buf) - expected} trailing bytes")
    rec = np.frombuffer(buf, dtype=[("c", "<u4"), ("z", "<f4", ((N + 1) * d,))],
                        count=count, offset=off)
    pos = rec["z"].reshape(count, N + 1, d)[:, ::-1, :]
    return TrajectoryStore(grid, rec["c"].copy(), np.ascontiguousarray(pos))


def store_append(path, store: TrajectoryStore):
    """Append records to an existing file; grids must agree."""
    path = Path(path)
    buf = path.read_bytes()
    d, N, M, count, grid, _ = _read_header(buf)
    if d != store.dim or not grid.same_as(store.grid):
        raise GridMismatchError("appended records use a different grid")
    if len(buf) != store_size(N, d, count):
        raise StoreTruncatedError("existing store is damaged")
    with path.open("r+b") as fh:
        fh.seek(0)
        fh.write(_HEAD.pack(STORE_MAGIC, STORE_VERSION, d, N, M, count + len(store)))
        fh.seek(0, 2)
        fh.write(_records(store))
