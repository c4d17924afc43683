"""Continuous-time diffusion maths: schedule, forward process, DSM loss,
probability-flow drift, DDIM stepping and the exact Gaussian-mixture denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .autodiff import Value, as_value, mean, square, sub, total

_TIME_SLACK = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving cosine schedule, alpha = cos(theta t), sigma = sin(theta t).

    ``theta`` is chosen so that ``alpha(T) == alpha_end``.  Keeping
    ``alpha_end`` strictly positive keeps the DDIM data estimate
    ``(z - sigma eps) / alpha`` well conditioned at the start of sampling.
    """

    t_min: float = 1e-3
    T: float = 1.0
    alpha_end: float = 0.02

    @property
    def theta(self) -> float:
        return float(np.arccos(self.alpha_end) / self.T)

    def check(self, t):
        if isinstance(t, float):
            if not self.t_min - _TIME_SLACK <= t <= self.T + _TIME_SLACK:
                raise ValueError(f"time {t} outside [{self.t_min}, {self.T}]")
            return t
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t_min - _TIME_SLACK) or np.any(t > self.T + _TIME_SLACK):
            raise ValueError(f"time {t} outside [{self.t_min}, {self.T}]")
        return t

    def alpha(self, t):
        return np.cos(self.theta * np.asarray(t, dtype=np.float64))

    def sigma(self, t):
        return np.sin(self.theta * np.asarray(t, dtype=np.float64))

    def lam(self, t):
        return np.tan(self.theta * np.asarray(t, dtype=np.float64))

    def dlog_alpha(self, t):
        return -self.theta * np.tan(self.theta * np.asarray(t, dtype=np.float64))

    def dsigma2(self, t):
        # d/dt sin^2(theta t)
        return self.theta * np.sin(2.0 * self.theta * np.asarray(t, dtype=np.float64))


DEFAULT_SCHEDULE = NoiseSchedule()


@dataclass
class GaussianMixture:
    """Isotropic mixture sum_k w_k N(mu_k, s^2 I); ``labels[k]`` is the
    condition (family id) that component k belongs to."""

    weights: np.ndarray
    means: np.ndarray
    std: float
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if self.labels is None:
            self.labels = np.zeros(len(self.weights), dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if len(self.means) != len(self.weights) or len(self.labels) != len(self.weights):
            raise ValueError("weights, means and labels must have equal length")
        if self.std < 0:
            raise ValueError("std must be non-negative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1

    def restrict(self, label: int) -> "GaussianMixture":
        keep = self.labels == label
        if not keep.any():
            raise ValueError(f"no component carries label {label}")
        w = self.weights[keep]
        return GaussianMixture(w / w.sum(), self.means[keep], self.std, self.labels[keep])

    def sample(self, n: int, rng: np.random.Generator, cond=None) -> np.ndarray:
        """Draw n points; with ``cond`` (int or per-row array) draw from the
        restricted family of each row."""
        if cond is None:
            k = rng.choice(len(self.weights), size=n, p=self.weights)
        else:
            cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
            k = np.empty(n, dtype=np.int64)
            for c in np.unique(cond):
                rows = np.flatnonzero(cond == c)
                idx = np.flatnonzero(self.labels == c)
                p = self.weights[idx] / self.weights[idx].sum()
                k[rows] = idx[rng.choice(len(idx), size=len(rows), p=p)]
        return self.means[k] + self.std * rng.standard_normal((n, self.dim))


def eight_gaussians(radius: float = 2.0, std: float = 0.1, n_labels: int = 2) -> GaussianMixture:
    """Eight equal-weight components on a circle; labels alternate around it."""
    ang = np.arange(8) * (2 * np.pi / 8)
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixture(np.full(8, 1 / 8), means, std, np.arange(8) % n_labels)


# ----------------------------------------------------------------------------

def forward_sample(x, t, noise, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    t = schedule.check(t)
    x = np.asarray(x, dtype=np.float64)
    a, s = schedule.alpha(t), schedule.sigma(t)
    if x.ndim == 2 and np.ndim(t) == 1:
        a, s = a[:, None], s[:, None]
    return a * x + s * np.asarray(noise, dtype=np.float64)


def dsm_loss(model, x, t, noise, cond=None, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> Value:
    """Squared error of the noise prediction; rows of a batch are averaged."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    z = forward_sample(x, t, noise, schedule)
    err = sub(model.predict(z, t, cond), Value(noise))
    return total(square(err)) * (1.0 / len(x))


def score_from_eps(eps_hat, t, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    s = schedule.sigma(t)
    if np.any(s <= 0):
        raise ValueError("score undefined where sigma(t) = 0")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.ndim == 2 and np.ndim(s) == 1:
        s = s[:, None]
    return -eps_hat / s


def eps_from_score(score, t, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    return -schedule.sigma(t) * np.asarray(score, dtype=np.float64)


def pf_drift(model, z, t, cond=None, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Right-hand side of the probability-flow ODE dz/dt at (z, t)."""
    t = float(schedule.check(t))
    if t <= schedule.t_min:
        raise ValueError("drift is evaluated on (t_min, T]")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    eps = model.predict(z, t, cond).data
    f = schedule.dlog_alpha(t)
    g2 = schedule.dsigma2(t) - 2.0 * f * schedule.sigma(t) ** 2
    return f * z - 0.5 * g2 * score_from_eps(eps, t, schedule)


def ddim_step(model, z, t_from: float, t_to: float, cond=None,
              schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> Value:
    """One deterministic DDIM move from ``t_from`` down to ``t_to``.

    Works on Values so the same arithmetic serves gradient-carrying student
    steps and constant teacher steps.
    """
    if t_to > t_from:
        raise ValueError(f"ddim_step runs backwards in time; got {t_from} -> {t_to}")
    schedule.check(t_from)
    schedule.check(t_to)
    z = as_value(z)
    if t_to == t_from:
        return z
    eps = model.predict(z, t_from, cond)
    a_from, s_from = float(schedule.alpha(t_from)), float(schedule.sigma(t_from))
    a_to, s_to = float(schedule.alpha(t_to)), float(schedule.sigma(t_to))
    x_hat = (z - eps * s_from) / a_from
    return x_hat * a_to + eps * s_to


def ddim_multi(model, z, t_from: float, t_to: float, M: int, cond=None,
               schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> Value:
    """M uniform-in-t DDIM sub-steps from ``t_from`` to ``t_to``."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if t_to > t_from:
        raise ValueError(f"ddim_multi runs backwards in time; got {t_from} -> {t_to}")
    ts = np.linspace(t_from, t_to, M + 1)
    z = as_value(z)
    for a, b in zip(ts[:-1], ts[1:]):
        z = ddim_step(model, z, float(a), float(b), cond, schedule)
    return z


# ----------------------------------------------------------------------------
# exact denoiser for mixture data

def _per_row(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t, (n,)) if t.ndim else np.full(n, float(t))


def _mixture_terms(gm: GaussianMixture, z, t, schedule):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = _per_row(t, len(z))
    a = schedule.alpha(t)[:, None]
    s = schedule.sigma(t)[:, None]
    var = a**2 * gm.std**2 + s**2                       # (n, 1)
    centers = a[:, :, None] * gm.means.T[None, :, :]    # (n, d, K)
    diff = z[:, :, None] - centers
    d = z.shape[1]
    logp = (np.log(gm.weights)[None, :]
            - 0.5 * (diff**2).sum(axis=1) / var
            - 0.5 * d * np.log(2 * np.pi * var))        # (n, K)
    return z, a, s, var, diff, logp


def mixture_log_density(gm: GaussianMixture, z, t, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    *_, logp = _mixture_terms(gm, z, t, schedule)
    return np.maximum(logsumexp(logp, axis=1), np.log(1e-300))


def mixture_eps_star(gm: GaussianMixture, z, t, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Posterior-mean noise -sigma * grad log q(z) of the noised mixture."""
    if np.any(schedule.sigma(t) <= 0):
        raise ValueError("sigma(t) must be positive")
    z, a, s, var, diff, logp = _mixture_terms(gm, z, t, schedule)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    # grad log q = -sum_k r_k (z - a mu_k) / var
    grad = -(diff * resp[:, None, :]).sum(axis=2) / var
    return -s * grad


class MixtureOracle:
    """Denoiser that returns the exact mixture noise prediction."""

    def __init__(self, gm: GaussianMixture, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
        self.gm = gm
        self.schedule = schedule
        self._families = {}

    @property
    def dim(self) -> int:
        return self.gm.dim

    @property
    def n_labels(self) -> int:
        return self.gm.n_labels

    def parameters(self) -> list:
        return []

    def _family(self, label):
        if label not in self._families:
            self._families[label] = self.gm.restrict(label)
        return self._families[label]

    def eps(self, z, t, cond=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if cond is None:
            return mixture_eps_star(self.gm, z, t, self.schedule)
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (len(z),))
        t = _per_row(t, len(z))
        out = np.empty_like(z)
        for c in np.unique(cond):
            rows = cond == c
            out[rows] = mixture_eps_star(self._family(int(c)), z[rows], t[rows], self.schedule)
        return out

    def predict(self, z, t, cond=None) -> Value:
        z = z.data if isinstance(z, Value) else z
        return Value(self.eps(z, t, cond))
