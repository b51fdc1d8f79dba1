"""Sign-gradient PGD and the immunization objectives it maximizes.

Trajectory objectives (``dia_pt``, ``dia_r``, ``dia_mt``) differentiate
through the whole DDIM inversion (and, for ``dia_r``, the reconstruction)
via :mod:`diaforge.trajgrad`. The baselines are simplified "-style"
analogues: a single-step diffusion-loss attack (``adv_dm``), a score
distillation direction that skips the denoiser Jacobian (``sds``), an
encoder-latent attack (``encoder``) and a random-sign control (``random``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import forward_noise, make_grid
from .models import Condition, bind
from .numerics import NumericsError, Rng
from .trajgrad import GRAD_MODES, Pipeline, forward_states, trajectory_grad

OBJECTIVES = ("dia_pt", "dia_r", "dia_mt", "adv_dm", "sds", "encoder", "random")
TRAJECTORY_OBJECTIVES = ("dia_pt", "dia_r", "dia_mt")


class AttackError(ValueError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 0.05
    step_size: float | None = None
    iterations: int = 20
    objective: str = "dia_pt"
    traj_steps: int = 10
    seed: int = 0
    random_start: bool = False
    grad_mode: str = "decomposed"

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.epsilon / 10.0
        if self.objective not in OBJECTIVES:
            raise AttackError(f"unknown objective {self.objective!r}; valid: {', '.join(OBJECTIVES)}")
        if not self.epsilon > 0:
            raise AttackError("epsilon must be positive")
        if not 0 < self.step_size <= self.epsilon:
            raise AttackError(f"step size must lie in (0, epsilon], got {self.step_size}")
        if self.iterations < 1:
            raise AttackError("need at least one iteration")
        if self.traj_steps < 1:
            raise AttackError("need at least one trajectory step")
        if self.grad_mode not in GRAD_MODES:
            raise AttackError(f"unknown grad mode {self.grad_mode!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "AttackConfig":
        obj = json.loads(text) if isinstance(text, str) else dict(text)
        return cls(**obj)


@dataclass
class AttackResult:
    delta: np.ndarray
    loss_curve: list
    immunized: np.ndarray
    initial_loss: float = float("nan")
    objective: str = ""
    history: list = field(default_factory=list, repr=False)

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1] if self.loss_curve else float("nan")


@dataclass(frozen=True)
class AttackContext:
    """Models an attack differentiates through, plus the source condition."""

    codec: object
    denoiser: object
    cond: Condition = field(default_factory=Condition)
    guidance: float = 1.0
    query: str = "source"

    @property
    def schedule(self):
        return self.denoiser.schedule

    def pipeline(self, plan, steps: int, aux: str = "latent") -> Pipeline:
        return Pipeline(self.codec, self.denoiser, make_grid(steps, self.schedule.T), self.schedule,
                        self.cond, tuple(plan), self.guidance, aux, self.query)


PLANS = {
    "dia_pt": (("encode", "invert"), "latent"),
    "dia_mt": (("encode", "invert"), "latent"),
    "dia_r": (("encode", "invert", "sample", "decode"), "input"),
}


# -- terminal losses (value and cotangent w.r.t. the terminal point) ---------


def _pt_terminal(terminal, latent):
    r = terminal - latent
    return float(np.sum(r * r)), 2.0 * r


def _mt_terminal(scale):
    def loss(terminal, latent):
        r = terminal - scale * latent
        return float(np.sum(r * r)), 2.0 * r
    return loss


def _r_terminal(terminal, image):
    r = terminal - image
    return float(np.sum(r * r)), 2.0 * r, -2.0 * r


def _r_terminal_detached(terminal, image):
    r = terminal - image
    return float(np.sum(r * r)), 2.0 * r


def _require(pipeline: Pipeline, name: str, plan) -> None:
    if "invert" not in pipeline.plan:
        raise AttackError(f"{name} needs an inversion stage in the pipeline plan")
    missing = [p for p in plan if p not in pipeline.plan and not (p == "encode" and pipeline.codec is None)]
    if missing or (name != "dia_r" and not pipeline.terminal_is_latent):
        raise AttackError(f"{name} needs plan {plan}, got {pipeline.plan}")


def loss_dia_pt(x, pipeline: Pipeline, mode: str = "decomposed"):
    """``||h_S - E(x)||^2`` with the encoded reference held constant; returns ``(value, grad_x)``."""
    _require(pipeline, "dia_pt", ("encode", "invert"))
    rep = trajectory_grad(pipeline, _pt_terminal, x, mode)
    return rep.value, rep.grad


def loss_dia_mt(x, pipeline: Pipeline, mode: str = "decomposed"):
    """``||h_S - sqrt(abar_S) E(x)||^2`` with the reference held constant."""
    _require(pipeline, "dia_mt", ("encode", "invert"))
    scale = float(np.sqrt(pipeline.schedule.alpha_bar[pipeline.grid.taus[-1]]))
    rep = trajectory_grad(pipeline, _mt_terminal(scale), x, mode)
    return rep.value, rep.grad


def loss_dia_r(x, pipeline: Pipeline, mode: str = "decomposed", detach: bool = False):
    """``||decode(sample(invert(E(x)))) - x||^2``.

    The gradient flows through both terms by default. ``detach=True`` holds
    the subtracted image constant, which only differentiates the round
    trip; with a contractive round trip that direction can fail to raise
    the full residual.
    """
    if pipeline.plan != ("encode", "invert", "sample", "decode") or pipeline.aux != "input":
        raise AttackError(f"dia_r needs plan encode->invert->sample->decode with aux='input', got {pipeline.plan}")
    rep = trajectory_grad(pipeline, _r_terminal_detached if detach else _r_terminal, x, mode)
    return rep.value, rep.grad


def terminal_loss(name: str, pipeline: Pipeline):
    if name == "dia_pt":
        return _pt_terminal
    if name == "dia_mt":
        return _mt_terminal(float(np.sqrt(pipeline.schedule.alpha_bar[pipeline.grid.taus[-1]])))
    if name == "dia_r":
        return _r_terminal
    raise AttackError(f"{name} is not a trajectory objective")


def _draw_timestep_noise(pipeline: Pipeline, rng: Rng, shape):
    taus = pipeline.grid.taus
    t = int(taus[int(rng.integers(0, len(taus)))])
    return t, rng.normal(shape)


def loss_adv_dm(x, pipeline: Pipeline, rng: Rng, draw=None):
    """Single-step diffusion loss ``||eps - eps_theta(z_t, c, t)||^2`` on the encoded image.

    ``t`` is drawn uniformly from the pipeline grid and ``eps`` from N(0, I)
    unless ``draw=(t, eps)`` pins them. Returns ``(value, grad_x)``.
    """
    codec = pipeline.codec
    z0 = codec.encode(x)
    t, eps = draw if draw is not None else _draw_timestep_noise(pipeline, rng, z0.shape)
    s = pipeline.schedule
    zt = forward_noise(z0, t, eps, s)
    model = bind(pipeline.denoiser, pipeline.cond, pipeline.guidance)
    pred, cache = model.forward_cache(zt, t)
    r = eps - pred
    g_zt = model.vjp_cache(cache, -2.0 * r)
    g_z0 = np.sqrt(s.alpha_bar[t]) * g_zt
    return float(np.sum(r * r)), codec.encode_vjp(x, g_z0)


def loss_sds_step(x, pipeline: Pipeline, rng: Rng, draw=None):
    """Score-distillation direction ``E^T (eps_theta(z_t, t) - eps)``.

    The denoiser Jacobian is taken as the identity, so only the codec is
    differentiated. PGD applies this with a descent sign.
    """
    codec = pipeline.codec
    z0 = codec.encode(x)
    t, eps = draw if draw is not None else _draw_timestep_noise(pipeline, rng, z0.shape)
    zt = forward_noise(z0, t, eps, pipeline.schedule)
    pred = bind(pipeline.denoiser, pipeline.cond, pipeline.guidance).predict(zt, t)
    return codec.encode_vjp(x, pred - eps)


def loss_encoder(x, target_latent, codec):
    """``||E(x) - target||^2`` with the target latent held constant."""
    r = codec.encode(x) - target_latent
    return float(np.sum(r * r)), codec.encode_vjp(x, 2.0 * r)


# -- objectives as PGD sees them ---------------------------------------------


class Objective:
    """``value_and_grad(x, it)`` for PGD to ascend; ``it`` keys per-iteration randomness."""

    name = ""

    def value_and_grad(self, x, it: int):
        raise NotImplementedError

    def value(self, x, it: int) -> float:
        return self.value_and_grad(x, it)[0]


class TrajectoryObjective(Objective):
    def __init__(self, name: str, context: AttackContext, steps: int, mode: str = "decomposed"):
        plan, aux = PLANS[name]
        self.name = name
        self.pipeline = context.pipeline(plan, steps, aux)
        self.loss = terminal_loss(name, self.pipeline)
        self.mode = mode

    def value_and_grad(self, x, it=0):
        rep = trajectory_grad(self.pipeline, self.loss, x, self.mode)
        return rep.value, rep.grad

    def value(self, x, it=0):
        states = forward_states(self.pipeline, x)
        return self.loss(states[-1], states[self.pipeline.aux_index])[0]


class AdvDMObjective(Objective):
    name = "adv_dm"

    def __init__(self, context: AttackContext, steps: int, seed: int):
        self.pipeline = context.pipeline(("encode", "invert"), steps)
        self.root = Rng(seed).split(self.name)

    def value_and_grad(self, x, it=0):
        return loss_adv_dm(x, self.pipeline, self.root.split(it))


class SDSObjective(Objective):
    """Ascending ``-direction`` is descending the SDS direction."""

    name = "sds"

    def __init__(self, context: AttackContext, steps: int, seed: int):
        self.pipeline = context.pipeline(("encode", "invert"), steps)
        self.root = Rng(seed).split(self.name)

    def value_and_grad(self, x, it=0):
        rng = self.root.split(it)
        z0 = self.pipeline.codec.encode(x)
        draw = _draw_timestep_noise(self.pipeline, rng, z0.shape)
        value, _ = loss_adv_dm(x, self.pipeline, rng, draw)
        return value, -loss_sds_step(x, self.pipeline, rng, draw)

    def value(self, x, it=0):
        rng = self.root.split(it)
        z0 = self.pipeline.codec.encode(x)
        return loss_adv_dm(x, self.pipeline, rng, _draw_timestep_noise(self.pipeline, rng, z0.shape))[0]


class EncoderObjective(Objective):
    name = "encoder"

    def __init__(self, codec, x_orig):
        self.codec = codec
        self.target = codec.encode(x_orig)

    def value_and_grad(self, x, it=0):
        return loss_encoder(x, self.target, self.codec)


def make_objective(cfg: AttackConfig, context: AttackContext, x0) -> Objective:
    name = cfg.objective
    if name in TRAJECTORY_OBJECTIVES:
        return TrajectoryObjective(name, context, cfg.traj_steps, cfg.grad_mode)
    if name == "adv_dm":
        return AdvDMObjective(context, cfg.traj_steps, cfg.seed)
    if name == "sds":
        return SDSObjective(context, cfg.traj_steps, cfg.seed)
    if name == "encoder":
        return EncoderObjective(context.codec, x0)
    raise AttackError(f"objective {name!r} has no gradient; use random_noise_control")


# -- PGD ---------------------------------------------------------------------


def project(x0, delta, epsilon):
    """Clamp to the L-inf ball first, then to the valid pixel range."""
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(x0 + delta, 0.0, 1.0) - x0


def pgd_maximize(x0, objective: Objective, cfg: AttackConfig, callback=None) -> AttackResult:
    """Sign-gradient ascent of ``objective`` inside the epsilon-ball around ``x0``.

    ``loss_curve[i]`` is the objective after update ``i``; the value at the
    starting point is kept as ``initial_loss``. ``callback(i, delta)`` is
    invoked after every projected update.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise AttackError("input image must lie in [0, 1]")
    eps, alpha = cfg.epsilon, cfg.step_size
    if cfg.random_start:
        delta = project(x0, Rng(cfg.seed).split("start").uniform(-eps, eps, x0.shape), eps)
    else:
        delta = np.zeros_like(x0)
    curve = []
    initial = None
    for i in range(cfg.iterations):
        value, grad = objective.value_and_grad(x0 + delta, i)
        if initial is None:
            initial = value
        else:
            curve.append(value)
        if not np.all(np.isfinite(grad)):
            raise AttackError(f"non-finite gradient at iteration {i}")
        delta = project(x0, delta + alpha * np.sign(grad), eps)
        if callback is not None:
            callback(i, delta)
    curve.append(objective.value(x0 + delta, cfg.iterations))
    return AttackResult(delta, [float(v) for v in curve], np.clip(x0 + delta, 0.0, 1.0), float(initial), objective.name)


def random_noise_control(x, cfg: AttackConfig, rng: Rng, objective: Objective | None = None) -> AttackResult:
    """Random-sign perturbation on the ball boundary; no optimization.

    When ``objective`` is given its value at the result fills a flat
    ``loss_curve`` of ``cfg.iterations`` entries.
    """
    x = np.asarray(x, dtype=np.float64)
    signs = np.where(rng.uniform(0.0, 1.0, x.shape) < 0.5, -1.0, 1.0)
    step = cfg.epsilon * signs
    # exact +-epsilon wherever the pixel range does not clip
    delta = np.where((x + step >= 0.0) & (x + step <= 1.0), step, project(x, step, cfg.epsilon))
    immunized = np.clip(x + delta, 0.0, 1.0)
    curve, initial = [], float("nan")
    if objective is not None:
        v = float(objective.value(immunized, 0))
        curve = [v] * cfg.iterations
        initial = float(objective.value(x, 0))
    return AttackResult(delta, curve, immunized, initial, "random")


def immunize(x0, cfg: AttackConfig, context: AttackContext, callback=None) -> AttackResult:
    """Run the attack named by ``cfg.objective`` against ``context``."""
    if cfg.objective == "random":
        ref = TrajectoryObjective("dia_r", context, cfg.traj_steps)
        return random_noise_control(x0, cfg, Rng(cfg.seed).split("random"), ref)
    return pgd_maximize(x0, make_objective(cfg, context, x0), cfg, callback)


def check_ball(result: AttackResult, x0, epsilon: float, slack: float = 1e-12) -> None:
    """Raise unless ``result`` respects the budget and pixel range."""
    if np.max(np.abs(result.immunized - x0)) > epsilon + slack:
        raise NumericsError("perturbation leaves the epsilon-ball")
    if np.any(result.immunized < 0) or np.any(result.immunized > 1):
        raise NumericsError("immunized image leaves [0, 1]")
