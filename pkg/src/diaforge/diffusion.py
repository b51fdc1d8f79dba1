"""Noise schedules, deterministic DDIM steps, trajectory rollouts and decompositions."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import Cache, check_finite, check_same_shape, save_tensor


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False, compare=False)
    alpha: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_json(cls, obj) -> "NoiseSchedule":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return build_schedule(int(obj["T"]), float(obj["beta_start"]), float(obj["beta_end"]))


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products of ``alpha = 1 - beta``."""
    if T < 2:
        raise DiffusionError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DiffusionError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), beta, alpha, alpha_bar)


@dataclass(frozen=True)
class TimestepGrid:
    taus: tuple

    def __post_init__(self):
        taus = self.taus
        if len(taus) < 2:
            raise DiffusionError("a timestep grid needs at least two points")
        if taus[0] < 0 or any(b <= a for a, b in zip(taus, taus[1:])):
            raise DiffusionError(f"grid must be non-negative and strictly increasing: {taus}")

    @property
    def S(self) -> int:
        return len(self.taus) - 1

    def check(self, schedule: NoiseSchedule) -> None:
        if self.taus[-1] > schedule.T - 1:
            raise DiffusionError(f"grid reaches t={self.taus[-1]} but schedule has T={schedule.T}")


def make_grid(S: int, T: int) -> TimestepGrid:
    """Uniform leading spacing starting at t=0.

    The stride is ``(T - 1) // S`` so that the last point stays inside the
    schedule (``S * (T // S)`` would land on ``T`` itself).
    """
    if S < 1:
        raise DiffusionError(f"need at least one DDIM step, got S={S}")
    stride = (T - 1) // S
    if stride < 1:
        raise DiffusionError(f"cannot fit {S} steps into T={T}")
    return TimestepGrid(tuple(k * stride for k in range(S + 1)))


def _check_t(t: int, s: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < s.T:
        raise DiffusionError(f"timestep {t} outside [0, {s.T})")
    return t


def forward_noise(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    check_same_shape(x0, eps, "x0 and eps")
    ab = s.alpha_bar[_check_t(t, s)]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def lambda_coeff(t: int, s: NoiseSchedule) -> float:
    t = _check_t(t, s)
    if t == s.T - 1:
        raise DiffusionError("lambda(t) needs alpha_bar at t+1, undefined for the last timestep")
    ab = s.alpha_bar
    return float(np.sqrt(1.0 / ab[t + 1] - 1.0) - np.sqrt(1.0 / ab[t] - 1.0))


def step_coefficients(t_from: int, t_to: int, s: NoiseSchedule) -> tuple[float, float]:
    """``(a, b)`` such that one deterministic DDIM move is ``a * x + b * eps``.

    The same affine form serves both directions: with ``t_to > t_from`` it is
    the inversion step, with ``t_to < t_from`` the sampling step.
    """
    ab_from = s.alpha_bar[_check_t(t_from, s)]
    ab_to = s.alpha_bar[_check_t(t_to, s)]
    a = np.sqrt(ab_to / ab_from)
    b = np.sqrt(ab_to) * (np.sqrt(1.0 / ab_to - 1.0) - np.sqrt(1.0 / ab_from - 1.0))
    return float(a), float(b)


def ddim_sample_step(x_t, t_from: int, t_to: int, eps_pred, s: NoiseSchedule) -> np.ndarray:
    if t_to >= t_from:
        raise DiffusionError(f"sampling must descend in t, got {t_from} -> {t_to}")
    check_same_shape(x_t, eps_pred, "x_t and eps_pred")
    ab_from = s.alpha_bar[_check_t(t_from, s)]
    ab_to = s.alpha_bar[_check_t(t_to, s)]
    x0_pred = (x_t - np.sqrt(1.0 - ab_from) * eps_pred) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_pred + np.sqrt(1.0 - ab_to) * eps_pred


def ddim_invert_step(x_t, t_from: int, t_to: int, eps_pred, s: NoiseSchedule):
    """One inversion move; returns ``(x_next, delta)`` with ``x_next = a * x_t + delta``."""
    if t_to <= t_from:
        raise DiffusionError(f"inversion must ascend in t, got {t_from} -> {t_to}")
    check_same_shape(x_t, eps_pred, "x_t and eps_pred")
    a, b = step_coefficients(t_from, t_to, s)
    delta = b * eps_pred
    return a * x_t + delta, delta


@dataclass
class Trajectory:
    states: list
    deltas: list
    taus: tuple
    direction: str

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def dump(self, directory) -> list:
        """Write every state as ``state_XX.dft1`` and return the paths."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for k, st in enumerate(self.states):
            p = os.path.join(directory, f"state_{k:03d}.dft1")
            save_tensor(p, st)
            paths.append(p)
        for k, d in enumerate(self.deltas):
            p = os.path.join(directory, f"delta_{k:03d}.dft1")
            save_tensor(p, d)
            paths.append(p)
        return paths


class DDIMStage:
    """A single DDIM move between two grid points as a DiffOp on the latent.

    ``model`` is anything with ``predict``/``forward_cache``/``vjp_cache``
    taking ``(z, t)``; see :class:`diaforge.models.BoundDenoiser`. The
    denoiser is queried at :func:`query_timestep`.
    """

    def __init__(self, model, schedule: NoiseSchedule, t_from: int, t_to: int, query: str = "source"):
        if t_from == t_to:
            raise DiffusionError("a DDIM stage must move between distinct timesteps")
        self.model = model
        self.schedule = schedule
        self.t_from = int(t_from)
        self.t_to = int(t_to)
        self.a, self.b = step_coefficients(t_from, t_to, schedule)
        self.t_query = query_timestep(t_from, t_to, query)
        self.name = f"ddim[{t_from}->{t_to}]"

    def _eps(self, h):
        eps = self.model.predict(h, self.t_query)
        if np.shape(eps) != np.shape(h):
            raise DiffusionError(f"denoiser returned shape {np.shape(eps)} for latent {np.shape(h)}")
        return eps

    def forward(self, h):
        return self.a * h + self.b * self._eps(h)

    def forward_cache(self, h):
        eps, cache = self.model.forward_cache(h, self.t_query)
        if np.shape(eps) != np.shape(h):
            raise DiffusionError(f"denoiser returned shape {np.shape(eps)} for latent {np.shape(h)}")
        out = self.a * h + self.b * eps
        return out, Cache([eps, out], [cache])

    def vjp_cache(self, cache, g):
        return self.a * g + self.model.vjp_cache(cache.children[0], self.b * g)

    def vjp(self, h, g):
        _, cache = self.forward_cache(h)
        return self.vjp_cache(cache, g)


QUERY_MODES = ("source", "target")


def query_timestep(t_from: int, t_to: int, mode: str = "source") -> int:
    """Timestep at which a DDIM move queries the denoiser.

    ``source`` uses the timestep of the latent being moved in both
    directions. ``target`` makes inversion query at its destination
    timestep instead (sampling is unaffected: it always queries at the
    noisier endpoint, which is its source).
    """
    if mode == "source":
        return int(t_from)
    if mode == "target":
        return max(int(t_from), int(t_to))
    raise DiffusionError(f"unknown query mode {mode!r}; expected one of {QUERY_MODES}")


def _rollout(z, pairs, denoiser, cond, s, direction, query):
    from .models import bind

    model = bind(denoiser, cond)
    states = [np.asarray(z, dtype=np.float64)]
    deltas = []
    for t_from, t_to in pairs:
        h = states[-1]
        eps = model.predict(h, query_timestep(t_from, t_to, query))
        if np.shape(eps) != np.shape(h):
            raise DiffusionError(f"denoiser returned shape {np.shape(eps)} for latent {np.shape(h)}")
        if direction == "inversion":
            nxt, delta = ddim_invert_step(h, t_from, t_to, eps, s)
            deltas.append(delta)
        else:
            nxt = ddim_sample_step(h, t_from, t_to, eps, s)
            a, _ = step_coefficients(t_from, t_to, s)
            deltas.append(nxt - a * h)
        states.append(check_finite(nxt, f"latent at t={t_to}"))
    return states, deltas


def rollout_invert(z0, grid: TimestepGrid, denoiser, cond=None, s: NoiseSchedule | None = None,
                   query: str = "source") -> Trajectory:
    s = s if s is not None else denoiser.schedule
    grid.check(s)
    taus = grid.taus
    states, deltas = _rollout(z0, list(zip(taus[:-1], taus[1:])), denoiser, cond, s, "inversion", query)
    return Trajectory(states, deltas, tuple(taus), "inversion")


def rollout_sample(zT, grid: TimestepGrid, denoiser, cond=None, s: NoiseSchedule | None = None,
                   query: str = "source") -> Trajectory:
    s = s if s is not None else denoiser.schedule
    grid.check(s)
    desc = tuple(reversed(grid.taus))
    states, deltas = _rollout(zT, list(zip(desc[:-1], desc[1:])), denoiser, cond, s, "sampling", query)
    return Trajectory(states, deltas, desc, "sampling")


def decompose_trajectory(traj: Trajectory, s: NoiseSchedule):
    """Split an inversion end point into decayed start, model trajectory and process trajectory.

    Returns ``(bias, mt, pt)`` with ``bias + mt == states[-1]`` and
    ``states[0] + pt == states[-1]``. The start point's own timestep
    ``taus[0]`` supplies the decay denominator.
    """
    if traj.direction != "inversion":
        raise DiffusionError("decomposition is defined for inversion trajectories only")
    ab = s.alpha_bar
    taus = traj.taus
    ab_end = ab[taus[-1]]
    bias = np.sqrt(ab_end / ab[taus[0]]) * traj.states[0]
    mt = np.zeros_like(traj.states[0])
    for k, delta in enumerate(traj.deltas):
        mt = mt + np.sqrt(ab_end / ab[taus[k + 1]]) * delta
    pt = traj.states[-1] - traj.states[0]
    return bias, mt, pt
