"""Quick built-in checks behind ``diaforge selftest``.

Every check is seeded, so the printed report is identical run to run.
"""

from __future__ import annotations

import numpy as np

from .attacks import PLANS, AttackContext, terminal_loss
from .diffusion import build_schedule, decompose_trajectory, make_grid, rollout_invert, rollout_sample
from .models import (Condition, DenoiserOp, IdentityCodec, MlpDenoiser, ZeroDenoiser, make_toy_dataset,
                     train_linear_codec)
from .numerics import Rng, finite_difference_grad, max_rel_error, vjp_selftest
from .trajgrad import forward_states, memory_probe, trajectory_grad


def _checks():
    s = build_schedule()
    grid = make_grid(10, s.T)
    rng = Rng(2024).split("selftest")
    x8 = make_toy_dataset(1, 8, 5)[0][0]

    zero = ZeroDenoiser(s)
    z = rng.split("zero").normal((8, 8))
    back = rollout_sample(rollout_invert(z, grid, zero).final, grid, zero).final
    yield "identity.zero_roundtrip", float(np.max(np.abs(back - z))), 1e-12

    mlp = MlpDenoiser((8, 8), s, hidden=(32, 32), rng=rng.split("mlp"))
    worst_bias = worst_pt = 0.0
    for k in range(10):
        traj = rollout_invert(rng.split("traj", k).normal((8, 8)), grid, mlp, Condition(k % 2))
        bias, mt, pt = decompose_trajectory(traj, s)
        worst_bias = max(worst_bias, max_rel_error(bias + mt, traj.final))
        worst_pt = max(worst_pt, max_rel_error(traj.states[0] + pt, traj.final))
    yield "decomposition.bias_plus_mt", worst_bias, 1e-10
    yield "decomposition.start_plus_pt", worst_pt, 1e-10

    yield "vjp.mlp_step", vjp_selftest(DenoiserOp(mlp, 500, Condition(0)), z, rng.split("vjp")), 1e-5

    small = MlpDenoiser((2, 2), s, hidden=(16, 16), rng=rng.split("small"))
    images = [x for x, _ in make_toy_dataset(32, 2, 9)]
    x = images[0]
    linear = train_linear_codec(images, 4, latent_shape=(2, 2))
    for codec_name, codec in (("identity", IdentityCodec((2, 2))), ("linear", linear)):
        ctx = AttackContext(codec, small, Condition(1))
        for name, (plan, aux) in PLANS.items():
            pipe = ctx.pipeline(plan, 5, aux)
            loss = terminal_loss(name, pipe)

            # the trajectory objectives hold their reference latent fixed at x
            ref = None if name == "dia_r" else forward_states(pipe, x)[pipe.aux_index]

            def full(v, pipe=pipe, loss=loss, ref=ref):
                states = forward_states(pipe, v)
                return loss(states[-1], states[pipe.aux_index] if ref is None else ref)[0]

            grad = trajectory_grad(pipe, loss, x).grad
            err = max_rel_error(grad, finite_difference_grad(full, x))
            yield f"gradient.{name}.{codec_name}", err, 1e-5

    probe = AttackContext(IdentityCodec((8, 8)), mlp, Condition(0)).pipeline(("encode", "invert"), 5)
    d5, d50 = memory_probe(probe, x8, mode="decomposed")
    n5, n50 = memory_probe(probe, x8, mode="naive")
    yield "memory.decomposed_ratio", d50 / d5, 1.5
    yield "memory.naive_growth", n50 / n5, -5.0


def run_selftest(emit=print) -> bool:
    """Print one PASS/FAIL line per check; a negative limit is a lower bound on its magnitude."""
    ok = True
    for name, value, limit in _checks():
        passed = bool(value <= limit) if limit > 0 else bool(value >= -limit)
        ok &= passed
        bound = f"max={limit:.1e}" if limit > 0 else f"min={-limit:.1e}"
        emit(f"{'PASS' if passed else 'FAIL'} {name} value={value:.3e} {bound}")
    emit("selftest " + ("passed" if ok else "FAILED"))
    return ok
