import itertools
import math
import time

import numpy as np
import pytest
import torch

from diffiqt.errors import DomainError, ShapeError, SingularityError
from diffiqt.schedule import (
    KINDS,
    NoiseSchedule,
    Prediction,
    alpha_sigma,
    convert,
    forward_sample,
    posterior_params,
    transition,
    uniform_grid,
)

from oracles import conditional_oracle, cosine_alpha

SCHED = NoiseSchedule()


def test_unit_variance_on_dense_grid():
    start = time.perf_counter()
    worst = max(abs(a * a + s * s - 1.0) for a, s in (alpha_sigma(SCHED, t) for t in np.linspace(0, 1, 10_001)))
    assert worst <= 1e-9
    assert time.perf_counter() - start < 1.0


def test_alpha_matches_closed_form():
    ts = np.linspace(0.0, 0.99, 200)
    ours = np.array([alpha_sigma(SCHED, t)[0] for t in ts])
    np.testing.assert_allclose(ours, cosine_alpha(ts), rtol=1e-12)
    assert alpha_sigma(SCHED, 0.0) == (1.0, 0.0)
    assert alpha_sigma(SCHED, 1.0)[0] == pytest.approx(1e-5)


def test_midpoint_values():
    a, s = alpha_sigma(SCHED, 0.5)
    assert a == pytest.approx(float(cosine_alpha(0.5)), abs=1e-12)
    assert a == pytest.approx(0.7027400589, abs=1e-9)
    assert s == pytest.approx(0.7114467018, abs=1e-9)


def test_transition_composition(rng):
    for _ in range(1000):
        s, t = np.sort(rng.uniform(0, 1, 2))
        tr = transition(SCHED, s, t)
        a_s, _ = alpha_sigma(SCHED, s)
        a_t, _ = alpha_sigma(SCHED, t)
        assert abs(tr.alpha_ts * a_s - a_t) <= 1e-9
        assert tr.sigma2_ts >= 0.0
        # with alpha^2 + sigma^2 = 1 the transition variance collapses to 1 - alpha_ts^2
        assert tr.sigma2_ts == pytest.approx(1 - (a_t / a_s) ** 2, abs=1e-9)


def test_two_step_variance_monte_carlo():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 100_000
    for _ in range(5):
        s, t = np.sort(rng.uniform(0.02, 0.98, 2))
        x = rng.standard_normal(n)
        tr = transition(SCHED, s, t)
        x_s = forward_sample(x, s, rng.standard_normal(n), SCHED)
        two = tr.alpha_ts * x_s + math.sqrt(tr.sigma2_ts) * rng.standard_normal(n)
        one = forward_sample(rng.standard_normal(n), t, rng.standard_normal(n), SCHED)
        v1, v2 = one.var(ddof=1), two.var(ddof=1)
        se = math.sqrt(2.0 / (n - 1) * (v1**2 + v2**2))
        assert abs(v1 - v2) <= 3 * se
    assert time.perf_counter() - start < 10.0


def test_posterior_matches_conditioning_oracle(rng):
    for _ in range(100):
        s, t = np.sort(rng.uniform(0.001, 0.999, 2))
        x, x_t = rng.standard_normal(2)
        post = posterior_params(SCHED, s, t)
        mean, var = conditional_oracle(x, x_t, s, t)
        assert abs(post.mean(x_t, x) - mean) <= 1e-9
        assert abs(post.sigma2_Q - var) <= 1e-9


def test_posterior_at_final_step_is_deterministic():
    post = posterior_params(SCHED, 0.0, 0.05)
    assert post.sigma2_Q == 0.0
    assert post.mean_coeff_xt == 0.0
    assert post.mean_coeff_x == pytest.approx(1.0)


@pytest.mark.parametrize("src,dst", list(itertools.permutations(KINDS, 2)))
def test_conversion_round_trip(src, dst, rng):
    for t in np.linspace(0.01, 0.99, 25):
        x_t = rng.standard_normal(64)
        y = rng.standard_normal(64)
        there = convert(Prediction(src, y), dst, x_t, t, SCHED)
        back = convert(there, src, x_t, t, SCHED)
        assert back.kind == src
        np.testing.assert_allclose(back.tensor, y, atol=1e-6)


def test_conversion_consistent_with_forward_process(rng):
    x, eps = rng.standard_normal(32), rng.standard_normal(32)
    for t in (0.1, 0.5, 0.9):
        a, s = alpha_sigma(SCHED, t)
        x_t = a * x + s * eps
        v = a * eps - s * x
        np.testing.assert_allclose(convert(Prediction("x", x), "v", x_t, t, SCHED).tensor, v, atol=1e-9)
        np.testing.assert_allclose(convert(Prediction("v", v), "epsilon", x_t, t, SCHED).tensor, eps, atol=1e-9)
        np.testing.assert_allclose(convert(Prediction("epsilon", eps), "x", x_t, t, SCHED).tensor, x, atol=1e-9)


def test_conversion_keeps_torch_dtype():
    x_t = torch.randn(4, dtype=torch.float32)
    out = convert(Prediction("epsilon", torch.randn(4)), "x", x_t, 0.3, SCHED)
    assert out.tensor.dtype == torch.float32


def test_singular_conversions():
    z = np.zeros(3)
    with pytest.raises(SingularityError):
        convert(Prediction("x", z), "epsilon", z, 0.0, SCHED)
    with pytest.raises(SingularityError):
        convert(Prediction("x", z), "v", z, 0.0, SCHED)
    # the other direction stays finite at t = 0
    x_t = np.arange(3.0)
    np.testing.assert_array_equal(convert(Prediction("v", z + 1), "x", x_t, 0.0, SCHED).tensor, x_t)


def test_domain_errors():
    with pytest.raises(DomainError):
        alpha_sigma(SCHED, 1.5)
    with pytest.raises(DomainError):
        transition(SCHED, 0.7, 0.2)
    with pytest.raises(DomainError):
        posterior_params(SCHED, 0.4, 0.4)
    with pytest.raises(DomainError):
        uniform_grid(0)
    with pytest.raises(ShapeError):
        forward_sample(np.zeros(3), 0.5, np.zeros(4), SCHED)
    with pytest.raises(DomainError):
        NoiseSchedule(s_offset=0.0)


def test_uniform_grid():
    grid = uniform_grid(4)
    assert grid == [(0.75, 1.0), (0.5, 0.75), (0.25, 0.5), (0.0, 0.25)]
    assert uniform_grid(1) == [(0.0, 1.0)]
