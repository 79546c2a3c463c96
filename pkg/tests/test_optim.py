import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import cmdhar.tensor as T
from cmdhar.optim import (
    AmgbConfig,
    AmgbOptimizer,
    GradientError,
    gradient_ratio,
    gradient_report,
    modulation,
    noise_variance,
)
from cmdhar.tensor import Parameter, Tensor, backward


class ReferenceAdam:
    """Independent Adam oracle, written straight from the update rule."""

    def __init__(self, shapes, alpha=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.alpha, self.beta1, self.beta2, self.eps = alpha, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, values, grads):
        self.t += 1
        out = []
        for i, (theta, g) in enumerate(zip(values, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g ** 2
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(theta - self.alpha * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def ratio_oracle(norms):
    """Explicit mean-of-the-others loop; all-zero norms mean no dominance."""
    m = len(norms)
    if not any(norms):
        return [1.0] * m
    out = []
    for i in range(m):
        others = [norms[j] for j in range(m) if j != i]
        denom = sum(others) / (m - 1)
        out.append(norms[i] / max(denom, 1e-12))
    return out


# ---------------------------------------------------------------------------
# gradient_ratio


def test_ratio_symmetric_pair():
    np.testing.assert_allclose(gradient_ratio([3.0, 3.0]), [1.0, 1.0])


def test_ratio_two_to_one():
    np.testing.assert_allclose(gradient_ratio([2.0, 1.0]), [2.0, 0.5])


def test_ratio_three_modalities_matches_loop_oracle():
    norms = [3.0, 1.0, 2.0]
    got = gradient_ratio(norms)
    assert got[0] == 2.0
    np.testing.assert_allclose(got, ratio_oracle(norms), rtol=1e-15)


def test_ratio_all_zero_norms_give_ones():
    np.testing.assert_array_equal(gradient_ratio([0.0, 0.0, 0.0]), [1.0, 1.0, 1.0])


def test_ratio_requires_two_modalities():
    with pytest.raises(ValueError):
        gradient_ratio([1.0])


@settings(deadline=None, max_examples=50)
@given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=2, max_size=6))
def test_ratio_matches_oracle_on_random_norms(norms):
    np.testing.assert_allclose(gradient_ratio(norms), ratio_oracle(norms), rtol=1e-12)


# ---------------------------------------------------------------------------
# modulation


def test_modulation_subunity_passthrough():
    assert modulation(0.7) == 1.0


def test_modulation_boundary():
    assert modulation(1.0) == 1.0


def test_modulation_reference_tanh_value():
    want = 1.0 - math.tanh(1.0)  # = 0.23840584404423515
    assert abs(modulation(2.0, beta_mod=1.0) - want) < 1e-12
    assert abs(modulation(2.0, beta_mod=1.0) - 0.2384058) < 1e-6


@settings(deadline=None, max_examples=80)
@given(st.floats(min_value=0, max_value=100), st.floats(min_value=1e-3, max_value=10))
def test_modulation_in_unit_interval_and_nonincreasing(rho, beta):
    g = modulation(rho, beta)
    assert 0.0 < g <= 1.0
    assert modulation(rho + 0.5, beta) <= g


def test_modulation_continuous_at_threshold():
    eps = 1e-9
    assert abs(modulation(1.0 + eps) - modulation(1.0)) < 1e-8


# ---------------------------------------------------------------------------
# noise_variance


def test_noise_variance_endpoints_exact():
    cfg = AmgbConfig(sigma_max_sq=4e-4, sigma_min_sq=1e-6, total_steps=10)
    assert noise_variance(0, cfg) == 4e-4 + 1e-6
    assert noise_variance(10, cfg) == 1e-6


def test_noise_variance_midpoint():
    cfg = AmgbConfig(sigma_max_sq=4e-4, sigma_min_sq=0.0, total_steps=10)
    assert abs(noise_variance(5, cfg) - 2e-4) < 1e-15


def test_noise_variance_monotone_and_bounded():
    cfg = AmgbConfig(sigma_max_sq=1e-3, sigma_min_sq=1e-5, total_steps=50)
    values = [noise_variance(t, cfg) for t in range(51)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(1e-5 <= v <= 1e-3 + 1e-5 for v in values)


def test_noise_variance_range_check():
    cfg = AmgbConfig(total_steps=5)
    with pytest.raises(ValueError):
        noise_variance(6, cfg)
    with pytest.raises(ValueError):
        noise_variance(-1, cfg)


# ---------------------------------------------------------------------------
# Optimizer steps


def loss_grads(params, scale=1.0, seed=0):
    """Deterministic pseudo-gradients painted onto the parameters."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = scale * rng.normal(size=p.data.shape)


def fresh_params(shapes, prefix="p"):
    rng = np.random.default_rng(42)
    return [Parameter(f"{prefix}{i}", rng.normal(size=s)) for i, s in enumerate(shapes)]


def test_matches_reference_adam_when_balanced():
    shapes = [(3, 2), (4,), ()]
    params = fresh_params(shapes)
    values = [p.data.copy() for p in params]
    cfg = AmgbConfig(sigma_max_sq=0.0, sigma_min_sq=0.0, total_steps=200,
                     modality_count=2)
    opt = AmgbOptimizer(params, cfg, partition={"p0": 0, "p1": 1}, seed=0)
    ref = ReferenceAdam(shapes)

    for step in range(100):
        rng = np.random.default_rng(1000 + step)
        grads = [rng.normal(size=s) for s in shapes]
        for p, g in zip(params, grads):
            p.grad = g
        # equal norms force every ratio to exactly 1
        opt.step(modality_norms=[1.0, 1.0])
        values = ref.step(values, grads)
        for p, want in zip(params, values):
            assert np.abs(p.data - want).max() <= 1e-12
        opt.zero_grad()


def test_forced_zero_gamma_decays_momentum():
    params = fresh_params([(2,)])
    cfg = AmgbConfig(sigma_max_sq=0.0, total_steps=50, modality_count=2)
    opt = AmgbOptimizer(params, cfg, partition={"p0": 0})
    params[0].grad = np.array([1.0, -1.0])
    opt.step(modality_norms=[1.0, 1.0])
    m1 = opt.m_buf["p0"].copy()
    before = params[0].data.copy()
    params[0].grad = np.array([1.0, -1.0])
    opt.step(force_gamma=[0.0, 0.0])
    np.testing.assert_allclose(opt.m_buf["p0"], cfg.beta1 * m1, rtol=1e-15)
    # movement comes only from the decayed momentum tail
    assert (params[0].data != before).all()
    params[0].grad = np.zeros(2)
    opt.step(force_gamma=[0.0, 0.0])
    np.testing.assert_allclose(opt.m_buf["p0"], cfg.beta1 ** 2 * m1, rtol=1e-15)


def test_degenerate_adam_constant_gradient():
    p = Parameter("w", np.array(0.0))
    cfg = AmgbConfig(alpha=0.01, beta1=0.0, beta2=0.0, sigma_max_sq=0.0,
                     total_steps=10, modality_count=1)
    opt = AmgbOptimizer([p], cfg)
    expected_delta = 0.01 * 1.0 / (1.0 + cfg.eps)
    for step in range(5):
        p.grad = np.array(1.0)
        before = float(p.data)
        opt.step()
        assert abs((before - float(p.data)) - expected_delta) < 1e-15


def test_nonfinite_gradient_names_parameter():
    params = fresh_params([(2,)])
    opt = AmgbOptimizer(params, AmgbConfig(total_steps=5, modality_count=1))
    params[0].grad = np.array([1.0, np.nan])
    with pytest.raises(GradientError) as exc:
        opt.step()
    assert "p0" in str(exc.value)


def test_schedule_exhaustion_errors():
    params = fresh_params([(1,)])
    opt = AmgbOptimizer(params, AmgbConfig(total_steps=1, modality_count=1,
                                           sigma_max_sq=0.0))
    params[0].grad = np.ones(1)
    opt.step()
    params[0].grad = np.ones(1)
    with pytest.raises(RuntimeError):
        opt.step()


def test_noise_bitwise_deterministic_per_seed():
    def run():
        params = fresh_params([(8, 8), (3,)])
        cfg = AmgbConfig(sigma_max_sq=1e-4, total_steps=20, modality_count=2)
        opt = AmgbOptimizer(params, cfg, partition={"p0": 0, "p1": 1}, seed=7)
        for _ in range(10):
            loss_grads(params, seed=_)
            opt.step(modality_norms=[1.0, 2.0])
        return np.concatenate([p.data.reshape(-1) for p in params]).tobytes()

    assert run() == run()


def test_modulation_scales_but_never_flips_sign():
    rng = np.random.default_rng(9)
    for _ in range(50):
        g = rng.normal(size=16)
        gamma = modulation(float(rng.uniform(1, 5)), float(rng.uniform(0.1, 3)))
        assert np.array_equal(np.sign(gamma * g), np.sign(g))


def test_report_rows_symmetric_and_dominant():
    params = fresh_params([(4,), (4,)])
    cfg = AmgbConfig(sigma_max_sq=0.0, total_steps=50, modality_count=2)
    opt = AmgbOptimizer(params, cfg, partition={"p0": 0, "p1": 1})

    loss_grads(params, seed=1)
    rows = opt.step(modality_norms=[2.5, 2.5])
    assert [r["rho"] for r in rows] == [1.0, 1.0]
    assert [r["gamma"] for r in rows] == [1.0, 1.0]

    loss_grads(params, seed=2)
    rows = opt.step(modality_norms=[6.0, 2.0])
    assert rows[0]["gamma"] < 1.0 and rows[1]["gamma"] == 1.0
    assert abs(rows[0]["gamma"] - modulation(rows[0]["rho"], cfg.beta_mod)) < 1e-15

    report = gradient_report(opt)
    assert len(report) == 2 * 2  # steps x modalities


def test_report_before_any_step_errors():
    opt = AmgbOptimizer(fresh_params([(1,)]),
                        AmgbConfig(total_steps=1, modality_count=1))
    with pytest.raises(RuntimeError):
        gradient_report(opt)


def test_config_validation():
    with pytest.raises(ValueError):
        AmgbConfig(beta1=1.0)
    with pytest.raises(ValueError):
        AmgbConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AmgbConfig(sigma_max_sq=0.0, sigma_min_sq=1e-3)
    with pytest.raises(ValueError):
        AmgbConfig(total_steps=0)


def test_modality_slice_gets_gamma_shared_gets_one():
    # one dominant modality: its parameter is damped, the shared one is not
    p_mod = Parameter("enc.w", np.zeros(4))
    p_shared = Parameter("trunk.w", np.zeros(4))
    cfg = AmgbConfig(alpha=0.1, beta1=0.0, beta2=0.0, eps=0.0, sigma_max_sq=0.0,
                     total_steps=10, modality_count=2)
    opt = AmgbOptimizer([p_mod, p_shared], cfg, partition={"enc.w": 0})
    g = np.ones(4)
    p_mod.grad = g.copy()
    p_shared.grad = g.copy()
    opt.step(modality_norms=[4.0, 1.0])  # rho_0 = 4 -> gamma_0 < 1
    gamma0 = modulation(4.0, cfg.beta_mod)
    # beta1=beta2=0, eps=0: update = alpha * (gamma*g) / |g|
    np.testing.assert_allclose(p_mod.data, -0.1 * gamma0 * np.ones(4), rtol=1e-12)
    np.testing.assert_allclose(p_shared.data, -0.1 * np.ones(4), rtol=1e-12)
