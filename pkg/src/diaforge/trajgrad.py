"""Gradients of trajectory losses by chaining per-stage vector-Jacobian products.

A :class:`Pipeline` unrolls into a list of stages (codec hops and single
DDIM moves). The decomposed walk keeps only the latent entering each
stage; on the way back every stage is re-run on its stored input to
rebuild its activations, pulled back through, and discarded before the
next one is touched. The naive walk keeps every stage's activations from
the forward pass, which is the memory-hungry baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import DDIMStage, NoiseSchedule, TimestepGrid, make_grid
from .models import CodecOp, Condition, bind
from .numerics import MemoryMeter, NumericsError

STAGE_KINDS = ("encode", "invert", "sample", "decode")
GRAD_MODES = ("decomposed", "naive")


class GradError(NumericsError):
    pass


@dataclass(frozen=True)
class Pipeline:
    """Codec + denoiser + grid, and the ordered stage plan to unroll.

    ``aux`` selects which stored point the loss receives as its detached
    reference: ``"input"`` (the image) or ``"latent"`` (the encoded
    image, i.e. the start of the diffusion trajectory).
    """

    codec: object
    denoiser: object
    grid: TimestepGrid
    schedule: NoiseSchedule
    cond: Condition = field(default_factory=Condition)
    plan: tuple = ("encode", "invert")
    guidance: float = 1.0
    aux: str = "latent"
    query: str = "source"

    def __post_init__(self):
        if not self.plan:
            raise GradError("pipeline plan is empty")
        bad = [p for p in self.plan if p not in STAGE_KINDS]
        if bad:
            raise GradError(f"unknown stage kinds {bad}; expected {STAGE_KINDS}")
        order = [STAGE_KINDS.index(p) for p in self.plan]
        if order != sorted(order) or len(set(order)) != len(order):
            raise GradError(f"plan {self.plan} must follow encode -> invert -> sample -> decode")
        if self.aux not in ("input", "latent"):
            raise GradError(f"aux must be 'input' or 'latent', got {self.aux!r}")
        self.grid.check(self.schedule)

    def with_steps(self, S: int) -> "Pipeline":
        return replace(self, grid=make_grid(S, self.schedule.T))

    def with_plan(self, plan, aux: str | None = None) -> "Pipeline":
        return replace(self, plan=tuple(plan), aux=aux if aux is not None else self.aux)

    @property
    def steps(self) -> int:
        return self.grid.S

    def stages(self) -> list:
        model = bind(self.denoiser, self.cond, self.guidance)
        taus = self.grid.taus
        out = []
        for kind in self.plan:
            if kind == "encode":
                out.append(CodecOp(self.codec, "encode"))
            elif kind == "decode":
                out.append(CodecOp(self.codec, "decode"))
            elif kind == "invert":
                out.extend(DDIMStage(model, self.schedule, a, b, self.query) for a, b in zip(taus[:-1], taus[1:]))
            else:
                desc = taus[::-1]
                out.extend(DDIMStage(model, self.schedule, a, b, self.query) for a, b in zip(desc[:-1], desc[1:]))
        return out

    @property
    def aux_index(self) -> int:
        if self.aux == "latent" and self.plan[0] == "encode":
            return 1
        return 0

    @property
    def terminal_is_latent(self) -> bool:
        return self.plan[-1] != "decode"


@dataclass
class GradReport:
    grad: np.ndarray
    value: float
    peak_live_tensors: int
    peak_live_scalars: int
    stored_tensors: int
    stored_scalars: int
    mode: str = "decomposed"
    states: list = field(default_factory=list, repr=False)


def forward_states(pipeline: Pipeline, x, meter: MemoryMeter | None = None) -> list:
    """Run the pipeline, returning the input of every stage plus the terminal output."""
    states = [np.asarray(x, dtype=np.float64)]
    if meter is not None:
        meter.store(states[0])
    for stage in pipeline.stages():
        states.append(stage.forward(states[-1]))
        if meter is not None:
            meter.store(states[-1])
    return states


def run_pipeline(pipeline: Pipeline, x) -> np.ndarray:
    return forward_states(pipeline, x)[-1]


def backward_walk(stages, states, cotangent, start: int, stop: int = 0, meter: MemoryMeter | None = None,
                  caches=None) -> np.ndarray:
    """Pull ``cotangent`` (w.r.t. ``states[start]``) back to ``states[stop]``.

    With ``caches`` given, stage activations from the forward pass are used
    as-is; otherwise each stage is recomputed from its stored input.
    """
    g = cotangent
    for k in range(start - 1, stop - 1, -1):
        stage = stages[k]
        if caches is not None:
            g = stage.vjp_cache(caches[k], g)
        else:
            _, cache = stage.forward_cache(states[k])
            arrays = cache.all_arrays()
            if meter is not None:
                meter.acquire(arrays)
            g = stage.vjp_cache(cache, g)
            if meter is not None:
                meter.release(arrays)
            del cache, arrays
        if not np.all(np.isfinite(g)):
            raise GradError(f"non-finite cotangent after stage {k} ({getattr(stage, 'name', type(stage).__name__)})")
    return g


def trajectory_grad(pipeline: Pipeline, loss, x, mode: str = "decomposed", meter: MemoryMeter | None = None) -> GradReport:
    """Gradient of ``loss(terminal, aux)`` with respect to the pipeline input ``x``.

    ``loss`` returns ``(value, cotangent)`` where the cotangent is the
    derivative with respect to the terminal output; ``aux`` is the stored
    point selected by ``pipeline.aux`` and is then treated as constant. A
    loss may instead return ``(value, cotangent, aux_cotangent)`` to let
    gradient flow through ``aux`` as well; it joins the walk at that point.
    """
    if mode not in GRAD_MODES:
        raise GradError(f"unknown grad mode {mode!r}; expected one of {GRAD_MODES}")
    meter = meter if meter is not None else MemoryMeter()
    x = np.asarray(x, dtype=np.float64)
    stages = pipeline.stages()
    states = [x]
    meter.store(x)
    caches = [] if mode == "naive" else None
    for stage in stages:
        if caches is None:
            out = stage.forward(states[-1])
        else:
            out, cache = stage.forward_cache(states[-1])
            meter.acquire(cache.all_arrays())
            caches.append(cache)
        states.append(out)
        meter.store(out)

    k_aux = pipeline.aux_index
    value, seed, *rest = loss(states[-1], states[k_aux])
    seed = _check_cotangent(seed, states[-1], "terminal")
    if rest and rest[0] is not None:
        g = backward_walk(stages, states, seed, len(stages), k_aux, meter, caches)
        g = g + _check_cotangent(rest[0], states[k_aux], "aux")
        grad = backward_walk(stages, states, g, k_aux, 0, meter, caches)
    else:
        grad = backward_walk(stages, states, seed, len(stages), 0, meter, caches)
    if caches is not None:
        for cache in caches:
            meter.release(cache.all_arrays())
    return GradReport(grad, float(value), meter.peak_tensors, meter.peak_scalars,
                      meter.stored_tensors, meter.stored_scalars, mode, states)


def _check_cotangent(g, like, where: str) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != np.shape(like):
        raise GradError(f"loss cotangent for the {where} has shape {g.shape}, expected {np.shape(like)}")
    if not np.all(np.isfinite(g)):
        raise GradError(f"non-finite loss cotangent for the {where}")
    return g


def loss_value(pipeline: Pipeline, loss, x) -> float:
    states = forward_states(pipeline, x)
    return float(loss(states[-1], states[pipeline.aux_index])[0])


def memory_probe(pipeline: Pipeline, x, loss=None, mode: str = "decomposed", steps=(5, 50)):
    """Intra-stage peak live scalars at the two grid sizes in ``steps``.

    Stored per-stage latents are excluded from the peaks (they are reported
    in each run's ``stored_*`` counters).
    """
    if loss is None:
        loss = squared_norm_loss
    peaks = []
    for S in steps:
        report = trajectory_grad(pipeline.with_steps(S), loss, x, mode=mode)
        if report.peak_live_tensors == 0:
            raise GradError("memory instrumentation recorded nothing; refusing to report a peak")
        peaks.append(report.peak_live_scalars)
    return tuple(peaks)


def squared_norm_loss(terminal, aux):
    """``||terminal - aux||^2`` with ``aux`` held constant."""
    r = terminal - aux
    return float(np.sum(r * r)), 2.0 * r
