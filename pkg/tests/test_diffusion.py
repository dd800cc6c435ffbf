import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from shortdf.diffusion import ddim_step, estimate_x0, forward_noise
from shortdf.schedule import make_linear_schedule

from oracles import ScalarSchedule, ddim, noise, x0_est

f64 = torch.float64


def T(*v):
    return torch.tensor([list(v)], dtype=f64)


def test_forward_noise_substitution(quarter_schedule):
    out = forward_noise(T(1.0), T(2.0), 1, quarter_schedule)
    assert out.item() == pytest.approx(2.232050807568877, rel=1e-14)
    assert out.item() == pytest.approx(noise(1.0, 2.0, 1, ScalarSchedule([0.75])), rel=1e-15)


def test_forward_noise_zero_noise_coefficient(t2_schedule):
    x0 = T(1.5, -2.0)
    assert torch.equal(forward_noise(x0, T(3.0, 3.0), 0, t2_schedule), x0)


def test_forward_noise_linear_in_x0(t2_schedule):
    x0 = T(1.5, -2.0)
    out = forward_noise(x0, torch.zeros_like(x0), 2, t2_schedule)
    torch.testing.assert_close(out, math.sqrt(0.72) * x0, rtol=1e-15, atol=0)


def test_estimate_x0_substitution(quarter_schedule):
    out = estimate_x0(T(2.232050807568877), T(2.0), 1, quarter_schedule)
    assert out.item() == pytest.approx(1.0, rel=1e-12)


def test_estimate_x0_linear_in_eps_hat(t2_schedule):
    x0, eps, delta = T(0.3, -1.0), T(0.5, 0.25), T(0.1, -0.2)
    x_t = forward_noise(x0, eps, 2, t2_schedule)
    out = estimate_x0(x_t, eps + delta, 2, t2_schedule)
    torch.testing.assert_close(out, x0 - math.sqrt(0.28) / math.sqrt(0.72) * delta, rtol=1e-12, atol=1e-14)


def test_ddim_step_substitution(t2_schedule):
    out = ddim_step(T(1.0), T(0.5), 2, 0.0, t2_schedule)
    # sqrt(0.72) + sqrt(0.28) * 0.5
    assert out.item() == pytest.approx(1.1131032685303162, rel=1e-14)
    assert out.item() == pytest.approx(ddim(1.0, 0.5, 2, ScalarSchedule([0.1, 0.2])), rel=1e-15)


def test_ddim_step_to_zero_returns_estimate(t2_schedule):
    x0_hat = T(0.7, -0.1)
    assert torch.equal(ddim_step(x0_hat, T(5.0, 5.0), 0, 0.0, t2_schedule), x0_hat)


def test_ddim_step_sigma_domain(t2_schedule):
    with pytest.raises(ValueError):
        ddim_step(T(1.0), T(1.0), 2, math.sqrt(0.29), t2_schedule, fresh_noise=T(0.0))
    with pytest.raises(ValueError):
        ddim_step(T(1.0), T(1.0), 2, 0.1, t2_schedule)
    with pytest.raises(ValueError):
        ddim_step(T(1.0), T(1.0), 2, 0.0, t2_schedule, fresh_noise=T(0.0))


def test_ddim_step_stochastic_term(t2_schedule):
    out = ddim_step(T(1.0), T(0.5), 2, 0.3, t2_schedule, fresh_noise=T(2.0))
    expected = math.sqrt(0.72) + math.sqrt(0.28 - 0.09) * 0.5 + 0.6
    assert out.item() == pytest.approx(expected, rel=1e-14)


def test_shape_mismatch_is_usage_error(t2_schedule):
    with pytest.raises(ValueError):
        forward_noise(T(1.0), T(1.0, 2.0), 1, t2_schedule)


def test_deterministic_bitwise(t2_schedule):
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(8, 2, generator=g), torch.randn(8, 2, generator=g)
    assert torch.equal(ddim_step(a, b, 1, 0.0, t2_schedule), ddim_step(a, b, 1, 0.0, t2_schedule))


SCHED = make_linear_schedule(1000, 1e-4, 0.02)
finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(x0=finite, eps=finite, eps_hat=finite, t=st.integers(1, 1000), k=st.integers(0, 1000))
def test_round_trip_and_inverse_pair(x0, eps, eps_hat, t, k):
    x0_t, eps_t = T(x0), T(eps)
    x_t = forward_noise(x0_t, eps_t, t, SCHED)
    back = estimate_x0(x_t, eps_t, t, SCHED)
    assert back.item() == pytest.approx(x0, rel=1e-6, abs=1e-6 * (1 + abs(eps)) / math.sqrt(SCHED.alpha_bar(t)))
    x0_hat = estimate_x0(x_t, T(eps_hat), t, SCHED)
    again = ddim_step(x0_hat, T(eps_hat), t, 0.0, SCHED)
    assert again.item() == pytest.approx(x_t.item(), rel=1e-6, abs=1e-9)
    # oracle agreement on the scalar chain
    sch = ScalarSchedule(list(SCHED.betas))
    assert x_t.item() == pytest.approx(noise(x0, eps, t, sch), rel=1e-12, abs=1e-12)
    assert x0_hat.item() == pytest.approx(x0_est(x_t.item(), eps_hat, t, sch), rel=1e-9, abs=1e-9)
