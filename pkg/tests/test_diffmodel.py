import math

import numpy as np
import pytest

from calpref.diffmodel import (Arch, DenoiserParams, NoisedBatch, denoise, denoise_grad, eps_to_velocity, forward,
                               head_to_eps, implicit_reward, init_params, integrate, load_checkpoint,
                               sample, save_checkpoint, squared_errors, unpack)
from calpref.errors import ArchMismatch, MissingArtifact, SchemaVersionMismatch, ShapeMismatch, UnknownPrompt
from calpref.schedule import NoiseSchedule, WeightingSpec

import oracles

RF = NoiseSchedule("rectified_flow")
DDPM = NoiseSchedule("ddpm_sqrt")
ARCH = Arch(2, (16, 16), ("a", "b", "c"), 4, 4)


def random_params(arch=ARCH, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    p = init_params(arch, seed, zero_last=False)
    p.theta += scale * 0.1 * rng.standard_normal(p.theta.shape)
    return p


def random_batch(schedule, n=12, seed=1, arch=ARCH):
    rng = np.random.default_rng(seed)
    return NoisedBatch(rng.normal(size=(n, arch.input_dim)), rng.normal(size=(n, arch.input_dim)),
                       rng.uniform(0.02, 0.98, n), rng.integers(len(arch.prompts), size=n), schedule)


def test_zero_last_layer_gives_zero_eps():
    p = init_params(ARCH, 0)
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.all(denoise(p, x, "a", 0.3, DDPM) == 0.0)
    assert np.all(forward(p, x, np.zeros(5), np.zeros(5, dtype=int)) == 0.0)


def test_forward_deterministic():
    p = random_params()
    b = random_batch(RF)
    assert np.array_equal(forward(p, b.xt, b.lam, b.prompt_idx), forward(p, b.xt, b.lam, b.prompt_idx))


def test_forward_matches_scalar_oracle():
    p = random_params()
    b = random_batch(RF, n=6)
    layout = oracles.layer_layout(2, (16, 16), 3, 4, 4)
    out = forward(p, b.xt, b.lam, b.prompt_idx)
    for i in range(6):
        ref = oracles.scalar_forward(p.theta, layout, b.xt[i], float(b.lam[i]), int(b.prompt_idx[i]), 4)
        np.testing.assert_allclose(out[i], ref, atol=1e-12, rtol=0)


def test_one_hidden_unit_closed_form():
    """One hidden unit, hand-set weights: out = w_out * silu(w . x + c) + b_out."""
    arch = Arch(2, (1,), ("a",), 1, 1)
    sizes = dict(arch.shapes())
    theta = np.zeros(arch.n_params)
    parts = unpack(arch, theta)
    parts["W0"][0, 0] = 0.7    # x_0
    parts["W0"][1, 0] = -1.2   # x_1
    parts["W0"][2, 0] = 5.0    # lambda / 10
    parts["b0"][0] = 0.1
    parts["W1"][0, :] = [2.0, -0.5]
    parts["b1"][:] = [0.3, 0.0]
    assert sizes["W0"] == (2 + 3 + 1, 1)
    p = DenoiserParams(arch, theta)
    x = np.array([[0.4, -0.9]])
    lam = 2.0
    a = 0.7 * 0.4 + (-1.2) * (-0.9) + 5.0 * lam / 10 + 0.1
    h = a / (1 + math.exp(-a))
    np.testing.assert_allclose(forward(p, x, np.array([lam]), np.array([0]))[0], [2.0 * h + 0.3, -0.5 * h], atol=1e-14)


def test_unknown_prompt_and_shape():
    p = random_params()
    with pytest.raises(UnknownPrompt):
        denoise(p, np.zeros((1, 2)), "zzz", 0.5, RF)
    with pytest.raises(ShapeMismatch):
        denoise(p, np.zeros((1, 3)), "a", 0.5, RF)
    with pytest.raises(ShapeMismatch):
        DenoiserParams(ARCH, np.zeros(5))


def test_reference_is_read_only():
    ref = random_params().frozen()
    with pytest.raises(ValueError):
        ref.theta[0] = 1.0
    with pytest.raises(PermissionError):
        denoise_grad(ref, random_batch(RF), np.ones(12))


@pytest.mark.parametrize("sched", [RF, DDPM])
def test_xt_recomputable_and_invertible(sched):
    b = random_batch(sched)
    assert np.array_equal(b.xt, NoisedBatch(b.x0, b.eps, b.t, b.prompt_idx, sched).xt)
    a = sched.alpha(b.t)[:, None]
    s = sched.sigma(b.t)[:, None]
    np.testing.assert_allclose((b.xt - a * b.x0) / s, b.eps, atol=1e-10)


def test_velocity_eps_conversion_roundtrip():
    b = random_batch(RF)
    v = np.random.default_rng(3).normal(size=b.x0.shape)
    eps_hat = head_to_eps(v, b.xt, b.t, RF)
    np.testing.assert_allclose(eps_to_velocity(eps_hat, b.xt, b.t), v, atol=1e-12)
    # the exact target maps onto the exact noise
    np.testing.assert_allclose(head_to_eps(b.target, b.xt, b.t, RF), b.eps, atol=1e-12)


def test_eps_loss_equals_velocity_loss_times_conversion():
    p = random_params()
    b = random_batch(RF)
    v_hat = forward(p, b.xt, b.lam, b.prompt_idx)
    eps_hat = head_to_eps(v_hat, b.xt, b.t, RF)
    eps_err = np.sum((eps_hat - b.eps) ** 2, axis=1)
    np.testing.assert_allclose(eps_err, (1 - b.t) ** 2 * squared_errors(p, b), rtol=1e-10)


def fd_check(f, grad, theta, coords, h=1e-5):
    errs = []
    for i in coords:
        e = np.zeros_like(theta)
        e[i] = h
        num = (f(theta + e) - f(theta - e)) / (2 * h)
        errs.append(abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-7))
    return max(errs)


@pytest.mark.parametrize("sched", [RF, DDPM])
def test_denoise_grad_finite_differences(sched):
    p = random_params()
    b = random_batch(sched, n=8)
    up = np.random.default_rng(4).normal(size=8)
    g, err = denoise_grad(p, b, up)
    np.testing.assert_array_equal(err, squared_errors(p, b))

    def f(theta):
        return float(np.dot(up, squared_errors(DenoiserParams(ARCH, theta), b)))

    coords = np.random.default_rng(5).choice(ARCH.n_params, 100, replace=False)
    assert fd_check(f, g, p.theta, coords) <= 1e-4


def test_denoise_grad_zero_upstream():
    g, _ = denoise_grad(random_params(), random_batch(RF), np.zeros(12))
    assert np.all(g == 0)


def test_implicit_reward_properties():
    theta = random_params(seed=0)
    ref = random_params(seed=1).frozen()
    b = random_batch(RF)
    spec = WeightingSpec("sigmoid", 0.5)
    assert np.all(implicit_reward(theta, theta, b, spec) == 0.0)
    r = implicit_reward(theta, ref, b, spec)
    np.testing.assert_array_equal(implicit_reward(ref, theta, b, spec), -r)
    w = np.random.default_rng(0).uniform(0.1, 1, 12)
    np.testing.assert_allclose(implicit_reward(theta, ref, b, spec, weights=3.0 * w),
                               3.0 * implicit_reward(theta, ref, b, spec, weights=w), rtol=1e-15)
    with pytest.raises(ArchMismatch):
        implicit_reward(theta, init_params(Arch(2, (8,), ("a", "b", "c"), 4), 0), b, spec)


def test_implicit_reward_constant_weighting_by_hand():
    theta = random_params(seed=2)
    ref = random_params(seed=3)
    b = random_batch(DDPM, n=4)
    layout = oracles.layer_layout(2, (16, 16), 3, 4, 4)
    r = implicit_reward(theta, ref, b, WeightingSpec("constant"))
    for i in range(4):
        lam = float(b.lam[i])
        et = np.sum((oracles.scalar_forward(theta.theta, layout, b.xt[i], lam, b.prompt_idx[i], 4) - b.eps[i]) ** 2)
        er = np.sum((oracles.scalar_forward(ref.theta, layout, b.xt[i], lam, b.prompt_idx[i], 4) - b.eps[i]) ** 2)
        assert r[i] == pytest.approx(-(et - er), abs=1e-12)


def test_single_euler_step():
    p = random_params()
    x1 = np.random.default_rng(0).normal(size=(4, 2))
    idx = ARCH.prompt_index("b")
    out = sample(p, "b", 4, steps=1, seed=9, schedule=RF)
    x1 = np.random.default_rng(9).standard_normal((4, 2))
    v = forward(p, x1, RF.lam(np.full(4, RF.t_max)), np.full(4, idx))
    np.testing.assert_array_equal(out, x1 - v)


def test_sample_deterministic():
    p = random_params()
    assert np.array_equal(sample(p, "a", 8, 20, 3, RF), sample(p, "a", 8, 20, 3, RF))
    assert not np.array_equal(sample(p, "a", 8, 20, 3, RF), sample(p, "a", 8, 20, 4, RF))


MU = np.array([1.5, -0.5])
COV = np.array([[0.5, 0.2], [0.2, 0.3]])


@pytest.mark.parametrize("shift", [None, 3.0])
def test_rf_sampler_with_optimal_velocity(shift):
    x1 = np.random.default_rng(0).standard_normal((20000, 2))
    x0 = integrate(lambda x, t: oracles.gaussian_rf_velocity(x, t[0], MU, COV), x1, 200, RF, shift)
    np.testing.assert_allclose(x0.mean(axis=0), MU, atol=0.03)
    np.testing.assert_allclose(np.cov(x0.T), COV, atol=0.03)


def test_ddim_sampler_with_optimal_eps():
    x1 = np.random.default_rng(1).standard_normal((20000, 2))

    def head(x, t):
        return oracles.gaussian_eps(x, float(DDPM.alpha(t[0])), float(DDPM.sigma(t[0])), MU, COV)

    # at t = 1 the ddpm schedule is not pure noise; start from its marginal
    a1, s1 = float(DDPM.alpha(DDPM.t_max)), float(DDPM.sigma(DDPM.t_max))
    start = a1 * MU + (np.linalg.cholesky(a1**2 * COV + s1**2 * np.eye(2)) @ x1.T).T
    x0 = integrate(head, start, 100, DDPM)
    np.testing.assert_allclose(x0.mean(axis=0), MU, atol=0.03)
    np.testing.assert_allclose(np.cov(x0.T), COV, atol=0.03)


def test_checkpoint_roundtrip_bytes(tmp_path):
    p = random_params()
    p.meta = {"seed": 3, "step": 10, "schedule": "rectified_flow"}
    a = save_checkpoint(tmp_path / "a.ckpt", p, config_hash="abc")
    q = load_checkpoint(a)
    assert np.array_equal(q.theta, p.theta) and q.arch == p.arch
    b = save_checkpoint(tmp_path / "b.ckpt", q)
    assert a.read_bytes() == b.read_bytes()
    r = load_checkpoint(a, role="reference")
    assert r.role == "reference" and not r.theta.flags.writeable


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingArtifact):
        load_checkpoint(tmp_path / "nope.ckpt")
    path = save_checkpoint(tmp_path / "a.ckpt", random_params())
    raw = path.read_bytes().replace(b'"schema_version":1', b'"schema_version":9')
    (tmp_path / "bad.ckpt").write_bytes(raw)
    with pytest.raises(SchemaVersionMismatch):
        load_checkpoint(tmp_path / "bad.ckpt")
