import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diaforge.attacks import PLANS, AttackContext, loss_dia_pt, terminal_loss
from diaforge.diffusion import make_grid
from diaforge.models import Condition, IdentityCodec, LinearDenoiser, MlpDenoiser, ZeroDenoiser, train_linear_codec
from diaforge.models import make_toy_dataset
from diaforge.numerics import MemoryMeter, Rng, finite_difference_grad, max_rel_error
from diaforge.trajgrad import (GradError, Pipeline, backward_walk, forward_states, loss_value, memory_probe,
                               squared_norm_loss, trajectory_grad)

from conftest import rel


def _pipe(codec, den, S=10, plan=("encode", "invert"), aux="latent", cond=Condition(0), guidance=1.0):
    return Pipeline(codec, den, make_grid(S, den.schedule.T), den.schedule, cond, plan, guidance, aux)


def _mlp(schedule, shape=(8, 8), seed=0):
    return MlpDenoiser(shape, schedule, hidden=(32, 32), rng=Rng(seed))


def test_zero_denoiser_closed_form(schedule, rng):
    pipe = _pipe(IdentityCodec((8, 8)), ZeroDenoiser(schedule))
    x = rng.uniform(0, 1, (8, 8))
    ab = schedule.alpha_bar
    c = np.sqrt(ab[pipe.grid.taus[-1]] / ab[0])
    rep = trajectory_grad(pipe, squared_norm_loss, x)
    assert rel(rep.grad, 2 * (c * x - x) * c) < 1e-10
    assert rep.value == pytest.approx((c - 1) ** 2 * np.sum(x * x), rel=1e-12)


def test_constant_loss_gives_zero_gradient(schedule, rng):
    pipe = _pipe(IdentityCodec((8, 8)), _mlp(schedule))
    rep = trajectory_grad(pipe, lambda t, a: (3.0, np.zeros_like(t)), rng.uniform(0, 1, (8, 8)))
    assert np.all(rep.grad == 0) and rep.value == 3.0


def test_mlp_dia_r_plan_matches_fd(schedule, rng):
    den = _mlp(schedule)
    pipe = _pipe(IdentityCodec((8, 8)), den, plan=("encode", "invert", "sample", "decode"), aux="input")
    x = rng.uniform(0, 1, (8, 8))
    rep = trajectory_grad(pipe, squared_norm_loss, x)
    fd = finite_difference_grad(lambda v: np.sum((forward_states(pipe, v)[-1] - x) ** 2), x)
    assert max_rel_error(rep.grad, fd) < 1e-5


def test_linear_denoiser_dia_pt_fd_on_four_dims(schedule, rng):
    den = LinearDenoiser(0.4 * rng.normal((4, 4)), 0.1 * rng.normal(4), schedule)
    pipe = _pipe(IdentityCodec((4,)), den, S=6)
    x = rng.uniform(0, 1, 4)
    _, g = loss_dia_pt(x, pipe)
    fd = finite_difference_grad(lambda v: np.sum((forward_states(pipe, v)[-1] - x) ** 2), x)
    assert max_rel_error(g, fd) < 1e-6


def test_guided_pipeline_gradient(schedule, rng):
    pipe = _pipe(IdentityCodec((3, 3)), _mlp(schedule, (3, 3)), S=4, guidance=2.5)
    x = rng.uniform(0, 1, (3, 3))
    ref = forward_states(pipe, x)[1]
    rep = trajectory_grad(pipe, squared_norm_loss, x)
    fd = finite_difference_grad(lambda v: squared_norm_loss(forward_states(pipe, v)[-1], ref)[0], x)
    assert max_rel_error(rep.grad, fd) < 1e-5


def test_naive_and_decomposed_agree(schedule, rng):
    pipe = _pipe(IdentityCodec((8, 8)), _mlp(schedule), plan=("encode", "invert", "sample", "decode"), aux="input")
    x = rng.uniform(0, 1, (8, 8))
    a = trajectory_grad(pipe, squared_norm_loss, x, "decomposed")
    b = trajectory_grad(pipe, squared_norm_loss, x, "naive")
    assert np.array_equal(a.grad, b.grad)
    assert a.stored_tensors == b.stored_tensors == len(pipe.stages()) + 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 21), st.integers(0, 1000))
def test_split_walk_associativity(split, seed):
    from diaforge.diffusion import build_schedule

    s = build_schedule()
    codec = train_linear_codec([x for x, _ in make_toy_dataset(16, 2, 0)], 3)
    pipe = _pipe(codec, _mlp(s, (3,), seed=1), S=5, plan=("encode", "invert", "sample", "decode"), aux="input")
    stages = pipe.stages()
    k = split % (len(stages) + 1)
    x = Rng(seed).uniform(0, 1, (2, 2))
    states = forward_states(pipe, x)
    g0 = Rng(seed).split("g").normal((2, 2))
    whole = backward_walk(stages, states, g0, len(stages))
    part = backward_walk(stages, states, backward_walk(stages, states, g0, len(stages), k), k)
    assert rel(part, whole) < 1e-10


def test_aux_cotangent_joins_the_walk(schedule, rng):
    pipe = _pipe(IdentityCodec((4,)), _mlp(schedule, (4,)), S=3)
    x = rng.uniform(0, 1, 4)

    def loss(t, a):
        r = t - a
        return float(r @ r), 2 * r, -2 * r

    rep = trajectory_grad(pipe, loss, x)
    fd = finite_difference_grad(lambda v: loss(*forward_states(pipe, v)[-1:], forward_states(pipe, v)[1])[0], x)
    assert max_rel_error(rep.grad, fd) < 1e-6


def test_cotangent_errors(schedule, rng):
    pipe = _pipe(IdentityCodec((4,)), _mlp(schedule, (4,)), S=3)
    x = rng.uniform(0, 1, 4)
    with pytest.raises(GradError, match="shape"):
        trajectory_grad(pipe, lambda t, a: (0.0, np.zeros(5)), x)
    with pytest.raises(GradError, match="non-finite"):
        trajectory_grad(pipe, lambda t, a: (0.0, np.full(4, np.nan)), x)

    class Exploding(ZeroDenoiser):
        def vjp_cache(self, cache, g):
            return np.full_like(g, np.inf)

    bad = _pipe(IdentityCodec((4,)), Exploding(schedule), S=3)
    with pytest.raises(GradError, match=r"stage 3 \(ddim\[666->999\]\)"):
        trajectory_grad(bad, squared_norm_loss, x)
    with pytest.raises(GradError):
        trajectory_grad(pipe, squared_norm_loss, x, mode="eager")


@pytest.mark.parametrize("kwargs", [dict(plan=()), dict(plan=("warp",)), dict(plan=("invert", "encode")),
                                    dict(aux="middle")])
def test_pipeline_validation(schedule, kwargs):
    with pytest.raises(GradError):
        _pipe(IdentityCodec((4,)), ZeroDenoiser(schedule), **kwargs)


def test_memory_probe_contrasts(schedule, rng):
    x = rng.uniform(0, 1, (8, 8))
    zero = _pipe(IdentityCodec((8, 8)), ZeroDenoiser(schedule))
    p5, p50 = memory_probe(zero, x)
    assert p50 / p5 == pytest.approx(1.0, abs=0.1)
    mlp = _pipe(IdentityCodec((8, 8)), _mlp(schedule))
    p5, p50 = memory_probe(mlp, x)
    assert p50 <= 1.5 * p5
    n5, n50 = memory_probe(mlp, x, mode="naive")
    assert n50 >= 5 * n5


def test_memory_probe_refuses_without_instrumentation(schedule, rng, monkeypatch):
    monkeypatch.setattr(MemoryMeter, "acquire", lambda self, arrays: None)
    monkeypatch.setattr(MemoryMeter, "release", lambda self, arrays: None)
    with pytest.raises(GradError, match="recorded nothing"):
        memory_probe(_pipe(IdentityCodec((2,)), ZeroDenoiser(schedule)), np.zeros(2))


def test_loss_value_matches_report(schedule, rng):
    pipe = _pipe(IdentityCodec((4,)), _mlp(schedule, (4,)), S=3)
    x = rng.uniform(0, 1, 4)
    assert loss_value(pipe, squared_norm_loss, x) == trajectory_grad(pipe, squared_norm_loss, x).value


@pytest.mark.parametrize("name", sorted(PLANS))
@pytest.mark.parametrize("codec_kind", ["identity", "linear"])
def test_every_objective_both_codecs_fd(schedule, name, codec_kind):
    images = [x for x, _ in make_toy_dataset(64, 4, 0)]
    codec = IdentityCodec((4, 4)) if codec_kind == "identity" else train_linear_codec(images, 6)
    den = _mlp(schedule, codec.latent_shape, seed=4)
    plan, aux = PLANS[name]
    pipe = AttackContext(codec, den, Condition(1)).pipeline(plan, 5, aux)
    loss = terminal_loss(name, pipe)
    x = images[3]
    ref = forward_states(pipe, x)[pipe.aux_index]

    def f(v):
        states = forward_states(pipe, v)
        return loss(states[-1], states[0] if name == "dia_r" else ref)[0]

    assert max_rel_error(trajectory_grad(pipe, loss, x).grad, finite_difference_grad(f, x)) < 1e-5
