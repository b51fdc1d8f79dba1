import json

import numpy as np
import pytest

from diaforge.attacks import (OBJECTIVES, PLANS, AttackConfig, AttackContext, AttackError, Objective,
                              TrajectoryObjective, check_ball, immunize, loss_adv_dm, loss_dia_mt, loss_dia_pt,
                              loss_dia_r, loss_encoder, loss_sds_step, pgd_maximize, project, random_noise_control)
from diaforge.diffusion import decompose_trajectory, rollout_invert
from diaforge.models import (Condition, IdentityCodec, LinearDenoiser, MlpDenoiser, ZeroDenoiser, make_toy_dataset,
                             train_linear_codec)
from diaforge.numerics import NumericsError, Rng, finite_difference_grad, max_rel_error
from diaforge.trajgrad import forward_states, run_pipeline

from oracles import ddim_matrix_rollout


def _mlp(schedule, shape=(8, 8), seed=0):
    return MlpDenoiser(shape, schedule, hidden=(32, 32), rng=Rng(seed))


def _ctx(codec, den, cond=Condition(0)):
    return AttackContext(codec, den, cond)


class Quadratic(Objective):
    """``||x - ref||^2``; ascent pushes away from ``ref``."""

    name = "quadratic"

    def __init__(self, ref):
        self.ref = ref

    def value_and_grad(self, x, it=0):
        r = x - self.ref
        return float(np.sum(r * r)), 2 * r


# -- PGD ---------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = AttackConfig()
    assert (cfg.epsilon, cfg.iterations, cfg.traj_steps, cfg.step_size) == (0.05, 20, 10, 0.005)
    with pytest.raises(AttackError, match="dia_pt, dia_r, dia_mt"):
        AttackConfig(objective="nope")
    for bad in (dict(epsilon=0), dict(step_size=0.1), dict(iterations=0), dict(traj_steps=0), dict(grad_mode="x")):
        with pytest.raises(AttackError):
            AttackConfig(**bad)
    again = AttackConfig.from_json(AttackConfig(objective="dia_r", seed=4).to_json())
    assert again == AttackConfig(objective="dia_r", seed=4)
    assert json.loads(cfg.to_json())["objective"] == "dia_pt"


def test_projection_order():
    x = np.array([0.98, 0.5, 0.01])
    d = project(x, np.array([0.2, -0.2, -0.03]), 0.05)
    assert np.allclose(d, [0.02, -0.05, -0.01])


def test_single_step_positive_gradient():
    x = np.full((3, 3), 0.5)
    cfg = AttackConfig(iterations=1)
    res = pgd_maximize(x, Quadratic(x - 0.001), cfg)
    assert np.allclose(res.delta, cfg.step_size)


def test_quadratic_curve_increases_until_boundary():
    x = np.full(4, 0.5)
    cfg = AttackConfig(iterations=20)
    res = pgd_maximize(x, Quadratic(x - 1e-4), cfg)
    curve = [res.initial_loss] + res.loss_curve
    reach = 10  # eps / alpha updates to the boundary
    assert all(b > a for a, b in zip(curve[:reach], curve[1:reach + 1]))
    assert np.allclose(curve[reach:], curve[reach])
    assert len(res.loss_curve) == cfg.iterations


def test_pgd_rejects_out_of_range_input_and_nan_gradient():
    with pytest.raises(AttackError):
        pgd_maximize(np.full(2, 1.5), Quadratic(0), AttackConfig())

    class Nan(Objective):
        name = "nan"

        def value_and_grad(self, x, it=0):
            return 0.0, np.full_like(x, np.nan) if it == 3 else np.ones_like(x)

    with pytest.raises(AttackError, match="iteration 3"):
        pgd_maximize(np.full(2, 0.5), Nan(), AttackConfig())


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_ball_invariant_every_iteration(schedule, objective):
    images = make_toy_dataset(3, 8, 2)
    den = _mlp(schedule)
    for i, (x, c) in enumerate(images):
        cfg = AttackConfig(objective=objective, seed=i, iterations=6)

        def check(it, delta, x=x):
            assert np.max(np.abs(delta)) <= cfg.epsilon + 1e-12
            assert np.all(x + delta >= 0) and np.all(x + delta <= 1)

        res = immunize(x, cfg, _ctx(IdentityCodec((8, 8)), den, c), callback=check)
        check_ball(res, x, cfg.epsilon)
        assert len(res.loss_curve) == cfg.iterations


def test_check_ball_flags_violations():
    x = np.full(2, 0.5)
    res = random_noise_control(x, AttackConfig(), Rng(0))
    res.immunized = x + 0.2
    with pytest.raises(NumericsError):
        check_ball(res, x, 0.05)


def test_random_control(schedule):
    x = np.full((4, 4), 0.5)
    cfg = AttackConfig(objective="random")
    a = random_noise_control(x, cfg, Rng(3))
    b = random_noise_control(x, cfg, Rng(3))
    assert np.all(np.abs(a.delta) == cfg.epsilon)
    assert a.delta.tobytes() == b.delta.tobytes()
    edge = random_noise_control(np.array([0.0, 1.0, 0.99]), cfg, Rng(1))
    assert np.all((edge.immunized >= 0) & (edge.immunized <= 1))
    res = immunize(x, cfg, _ctx(IdentityCodec((4, 4)), _mlp(schedule, (4, 4))))
    assert len(res.loss_curve) == cfg.iterations and res.objective == "random"


def test_attack_determinism(schedule):
    x, c = make_toy_dataset(1, 8, 0)[0]
    ctx = _ctx(IdentityCodec((8, 8)), _mlp(schedule), c)
    for obj in ("dia_pt", "adv_dm"):
        cfg = AttackConfig(objective=obj, iterations=4, seed=9)
        a, b = immunize(x, cfg, ctx), immunize(x, cfg, ctx)
        assert a.delta.tobytes() == b.delta.tobytes() and a.loss_curve == b.loss_curve


def test_trajectory_objectives_ascend(pixel_model):
    den, _ = pixel_model
    for name in PLANS:
        wins = 0
        images = make_toy_dataset(8, 8, 1)
        for x, c in images:
            res = immunize(x, AttackConfig(objective=name), _ctx(IdentityCodec((8, 8)), den, c))
            wins += res.final_loss >= res.initial_loss
        assert wins >= 7, name


# -- trajectory losses ---------------------------------------------------------


def test_dia_pt_zero_denoiser_closed_form(schedule, rng):
    pipe = _ctx(IdentityCodec((8, 8)), ZeroDenoiser(schedule)).pipeline(("encode", "invert"), 10)
    x = rng.uniform(0, 1, (8, 8))
    c = np.sqrt(schedule.alpha_bar[990] / schedule.alpha_bar[0])
    v, _ = loss_dia_pt(x, pipe)
    assert v == pytest.approx((c - 1) ** 2 * np.sum(x * x), rel=1e-10)
    assert loss_dia_pt(np.zeros((8, 8)), pipe)[0] == 0.0


def test_dia_pt_detach_matches_frozen_oracle_not_full(schedule, rng):
    pipe = _ctx(IdentityCodec((8, 8)), _mlp(schedule)).pipeline(("encode", "invert"), 10)
    x = rng.uniform(0, 1, (8, 8))
    _, g = loss_dia_pt(x, pipe)
    frozen = finite_difference_grad(lambda v: np.sum((run_pipeline(pipe, v) - x) ** 2), x)
    full = finite_difference_grad(lambda v: np.sum((run_pipeline(pipe, v) - v) ** 2), x)
    assert max_rel_error(g, frozen) < 1e-5
    assert max_rel_error(g, full) > 1e-2


def test_dia_pt_requires_inversion(schedule):
    pipe = _ctx(IdentityCodec((2,)), ZeroDenoiser(schedule)).pipeline(("encode",), 2)
    with pytest.raises(AttackError):
        loss_dia_pt(np.zeros(2), pipe)


def test_dia_r_zero_denoiser_is_exact(schedule, rng):
    pipe = _ctx(IdentityCodec((8, 8)), ZeroDenoiser(schedule)).pipeline(PLANS["dia_r"][0], 10, "input")
    for _ in range(3):
        v, g = loss_dia_r(rng.uniform(0, 1, (8, 8)), pipe)
        assert v < 1e-24 and np.max(np.abs(g)) < 1e-11


def test_dia_r_linear_closed_form(schedule, rng):
    n = 4
    W = 0.5 * rng.normal((n, n))
    den = LinearDenoiser(W, None, schedule)
    pipe = _ctx(IdentityCodec((n,)), den).pipeline(PLANS["dia_r"][0], 5, "input")
    x = rng.uniform(0, 1, n)
    taus = pipe.grid.taus
    zT = ddim_matrix_rollout(x, taus, schedule.alpha_bar, lambda t: W)
    back = ddim_matrix_rollout(zT, taus[::-1], schedule.alpha_bar, lambda t: W)
    v, _ = loss_dia_r(x, pipe)
    assert v == pytest.approx(np.sum((back - x) ** 2), rel=1e-9, abs=1e-20)


@pytest.mark.parametrize("detach", [False, True])
def test_dia_r_gradient_fd(schedule, rng, detach):
    images = [x for x, _ in make_toy_dataset(64, 8, 0)]
    codec = train_linear_codec(images, 10)
    pipe = _ctx(codec, _mlp(schedule, (10,))).pipeline(PLANS["dia_r"][0], 10, "input")
    x = images[5]
    _, g = loss_dia_r(x, pipe, detach=detach)
    if detach:
        f = lambda v: np.sum((run_pipeline(pipe, v) - x) ** 2)  # noqa: E731
    else:
        f = lambda v: np.sum((run_pipeline(pipe, v) - v) ** 2)  # noqa: E731
    assert max_rel_error(g, finite_difference_grad(f, x)) < 1e-5


def test_dia_r_needs_full_plan(schedule):
    pipe = _ctx(IdentityCodec((2,)), ZeroDenoiser(schedule)).pipeline(("encode", "invert"), 2)
    with pytest.raises(AttackError):
        loss_dia_r(np.zeros(2), pipe)


def test_dia_mt_matches_decomposition(schedule, rng):
    for den in (ZeroDenoiser(schedule), _mlp(schedule)):
        pipe = _ctx(IdentityCodec((8, 8)), den).pipeline(("encode", "invert"), 10)
        x = rng.uniform(0, 1, (8, 8))
        v, _ = loss_dia_mt(x, pipe)
        traj = rollout_invert(x, pipe.grid, den, Condition(0))
        bias, mt, _ = decompose_trajectory(traj, schedule)
        scale = np.sqrt(schedule.alpha_bar[990])
        assert v == pytest.approx(np.sum((bias + mt - scale * x) ** 2), rel=1e-10)
        if isinstance(den, ZeroDenoiser):
            assert np.all(mt == 0)
            assert v == pytest.approx(np.sum((bias - scale * x) ** 2), rel=1e-10)


def test_dia_mt_gradient_fd(schedule, rng):
    pipe = _ctx(IdentityCodec((8, 8)), _mlp(schedule)).pipeline(("encode", "invert"), 10)
    x = rng.uniform(0, 1, (8, 8))
    scale = np.sqrt(schedule.alpha_bar[990])
    _, g = loss_dia_mt(x, pipe)
    fd = finite_difference_grad(lambda v: np.sum((run_pipeline(pipe, v) - scale * x) ** 2), x)
    assert max_rel_error(g, fd) < 1e-5


# -- baselines -----------------------------------------------------------------


def test_adv_dm_zero_denoiser(schedule, rng):
    pipe = _ctx(IdentityCodec((4, 4)), ZeroDenoiser(schedule)).pipeline(("encode", "invert"), 10)
    eps = rng.normal((4, 4))
    v, g = loss_adv_dm(rng.uniform(0, 1, (4, 4)), pipe, None, draw=(99, eps))
    assert v == pytest.approx(np.sum(eps * eps)) and np.all(g == 0)


def test_adv_dm_seeded_and_fd(schedule, rng):
    codec = train_linear_codec([x for x, _ in make_toy_dataset(64, 8, 0)], 10)
    pipe = _ctx(codec, _mlp(schedule, (10,))).pipeline(("encode", "invert"), 10)
    x = make_toy_dataset(1, 8, 3)[0][0]
    assert loss_adv_dm(x, pipe, Rng(4))[0] == loss_adv_dm(x, pipe, Rng(4))[0]
    draw = (495, rng.normal(10))
    _, g = loss_adv_dm(x, pipe, None, draw)
    fd = finite_difference_grad(lambda v: loss_adv_dm(v, pipe, None, draw)[0], x)
    assert max_rel_error(g, fd) < 1e-5


def test_encoder_loss(rng):
    x0 = rng.uniform(0, 1, (8, 8))
    ident = IdentityCodec((8, 8))
    assert loss_encoder(x0, ident.encode(x0), ident)[0] == 0.0
    d = 0.01 * rng.normal((8, 8))
    v, g = loss_encoder(x0 + d, x0, ident)
    assert v == pytest.approx(np.sum(d * d), rel=1e-9) and np.allclose(g, 2 * d)
    codec = train_linear_codec([x for x, _ in make_toy_dataset(64, 8, 0)], 8)
    v, g = loss_encoder(x0 + d, codec.encode(x0), codec)
    Ad = codec.A @ d.ravel()
    assert v == pytest.approx(Ad @ Ad, rel=1e-9)
    assert np.allclose(g.ravel(), 2 * codec.A.T @ Ad, rtol=0, atol=1e-12)


def test_sds_direction(schedule, rng):
    pipe = _ctx(IdentityCodec((4, 4)), ZeroDenoiser(schedule)).pipeline(("encode", "invert"), 10)
    eps = rng.normal((4, 4))
    d = loss_sds_step(rng.uniform(0, 1, (4, 4)), pipe, None, draw=(0, eps))
    assert d.shape == (4, 4) and np.array_equal(d, -eps)


def test_sds_equals_adv_dm_under_identity_jacobian(schedule, rng):
    # eps_theta(z) = z + b has Jacobian I, so the full gradient is 2 sqrt(abar_t) times the SDS direction
    den = LinearDenoiser(np.eye(16), 0.2 * rng.normal(16), schedule)
    pipe = _ctx(IdentityCodec((4, 4)), den).pipeline(("encode", "invert"), 10)
    x = rng.uniform(0, 1, (4, 4))
    t, eps = 297, rng.normal((4, 4))
    _, g = loss_adv_dm(x, pipe, None, (t, eps))
    d = loss_sds_step(x, pipe, None, (t, eps))
    assert np.allclose(g, 2 * np.sqrt(schedule.alpha_bar[t]) * d, rtol=1e-12, atol=1e-14)


def test_trajectory_objective_value_matches_gradient_value(schedule, rng):
    x = rng.uniform(0, 1, (8, 8))
    obj = TrajectoryObjective("dia_r", _ctx(IdentityCodec((8, 8)), _mlp(schedule)), 5)
    assert obj.value(x) == obj.value_and_grad(x)[0]
    states = forward_states(obj.pipeline, x)
    assert obj.value(x) == pytest.approx(np.sum((states[-1] - x) ** 2))
