import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bridgesynth.schedule import (
    ScheduleTable,
    build_schedule,
    ddim_timesteps,
    forward_sample,
    posterior_step,
    transition_params,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(1000, 1.0)


def test_linear_m_endpoints(sched):
    assert sched.m[1] == pytest.approx(0.001, abs=1e-15)
    assert sched.m[1000] == pytest.approx(0.999, abs=1e-15)
    steps = np.diff(sched.m[1:])
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
    assert np.all(steps > 0)


def test_variance_examples():
    s = build_schedule(3, 1.0)  # m = 0.001, 0.5, 0.999
    assert s.m[2] == pytest.approx(0.5)
    assert s.delta[2] == pytest.approx(0.5)
    assert s.delta[3] == pytest.approx(2 * 0.999 * 0.001)
    assert s.delta[0] == 0.0


@pytest.mark.parametrize("T,s", [(2, 1.0), (20, 1.0), (1000, 1.0), (50, 0.3)])
def test_table_invariants(T, s):
    sc = build_schedule(T, s)
    t = np.arange(1, T + 1)
    np.testing.assert_allclose(sc.delta[t], 2 * s * (sc.m[t] - sc.m[t] ** 2))
    assert np.all(sc.delta >= 0) and np.all(sc.delta_cond >= 0) and np.all(sc.delta_rev >= 0)
    expected_cond = sc.delta[2:] - sc.delta[1:-1] * ((1 - sc.m[2:]) / (1 - sc.m[1:-1])) ** 2
    np.testing.assert_allclose(sc.delta_cond[2:], expected_cond, atol=1e-15)
    coef_sum = sc.coef_xt[2:] + sc.coef_y[2:] + sc.coef_x0[2:]
    np.testing.assert_allclose(coef_sum, 1.0, atol=1e-9)


def test_build_errors():
    with pytest.raises(ValueError):
        build_schedule(1, 1.0)
    with pytest.raises(ValueError):
        build_schedule(10, 0.0)


def test_forward_sample_examples():
    sc = build_schedule(3, 1.0)
    x0, y = np.full((2, 2), 0.2), np.full((2, 2), 0.8)
    np.testing.assert_allclose(forward_sample(x0, y, 2, np.zeros((2, 2)), sc), 0.5)
    np.testing.assert_allclose(forward_sample(x0, y, 3, np.zeros((2, 2)), sc), 0.001 * 0.2 + 0.999 * 0.8)
    # t = 1 carries only 0.1 % of y
    np.testing.assert_allclose(forward_sample(x0, y, 1, np.zeros((2, 2)), sc), 0.999 * 0.2 + 0.001 * 0.8)
    with pytest.raises(ValueError):
        forward_sample(x0, y[:1], 2, np.zeros((2, 2)), sc)


def test_forward_sample_monte_carlo():
    sc = build_schedule(20, 1.0)
    rng = np.random.default_rng(0)
    n, t = 100_000, 7
    x0, y = 0.3, 0.9
    draws = forward_sample(np.full(n, x0), np.full(n, y), t, rng.standard_normal(n), sc)
    mean, var = (1 - sc.m[t]) * x0 + sc.m[t] * y, sc.delta[t]
    assert abs(draws.mean() - mean) < 3 * np.sqrt(var / n)
    # standard error of the sample variance of a Gaussian: var * sqrt(2 / (n - 1))
    assert abs(draws.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


def test_transition_params():
    sc = build_schedule(20, 1.0)
    for t in range(2, 21):
        a, b, var = transition_params(t, sc)
        assert a + b == pytest.approx(1.0, abs=1e-12)
        assert var == pytest.approx(sc.delta[t] - a * a * sc.delta[t - 1])
    with pytest.raises(ValueError):
        transition_params(1, sc)


def test_transition_flat_step_limit():
    # hypothetical schedule with m_{t-1} = m_t
    m = np.array([0.0, 0.4, 0.4, 0.9])
    delta = 2 * (m - m ** 2)
    sc = ScheduleTable(T=3, s=1.0, m=m, delta=delta, delta_cond=np.zeros(4), delta_rev=np.zeros(4),
                       coef_xt=np.zeros(4), coef_y=np.zeros(4), coef_x0=np.zeros(4))
    alpha, beta, _ = transition_params(2, sc)
    assert alpha == 1.0 and beta == 0.0
    assert sc.pair(2, 1)[4] == pytest.approx(delta[2] - delta[1])


def test_posterior_constant_fixed_point():
    sc = build_schedule(50, 1.0)
    c = np.full((3, 3), 0.37)
    for t in (2, 10, 50):
        np.testing.assert_allclose(posterior_step(c, c, c, t, sc, eta=0.0), c, atol=1e-12)


def test_posterior_eta_zero_is_deterministic():
    sc = build_schedule(50, 1.0)
    rng = np.random.default_rng(1)
    x, y, x0 = rng.random((3, 4, 4))
    a = posterior_step(x, y, x0, 30, sc, eta=0.0, z=rng.standard_normal((4, 4)))
    b = posterior_step(x, y, x0, 30, sc, eta=0.0, z=rng.standard_normal((4, 4)))
    np.testing.assert_array_equal(a, b)


def test_posterior_errors():
    sc = build_schedule(10, 1.0)
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        posterior_step(x, x, x[:1], 5, sc)
    with pytest.raises(ValueError):
        posterior_step(x, x, x, 1, sc)
    with pytest.raises(ValueError):
        posterior_step(x, x, x, 11, sc)
    with pytest.raises(ValueError):
        posterior_step(x, x, x, 5, sc, eta=0.5)  # noise missing


def test_posterior_matches_monte_carlo_conditional():
    # regress x_{t-1} on x_t from joint forward draws: the slope/intercept/residual match (a, b+c, var)
    sc = build_schedule(20, 1.0)
    rng = np.random.default_rng(2)
    n, t, x0, y = 200_000, 12, 0.2, 0.7
    prev = forward_sample(np.full(n, x0), np.full(n, y), t - 1, rng.standard_normal(n), sc)
    alpha, beta, var_c = transition_params(t, sc)
    cur = alpha * prev + beta * y + np.sqrt(var_c) * rng.standard_normal(n)
    slope, intercept = np.polyfit(cur, prev, 1)
    resid = prev - (slope * cur + intercept)
    a, b, c, var, _ = sc.pair(t, t - 1)
    assert slope == pytest.approx(a, abs=0.01)
    assert intercept == pytest.approx(b * y + c * x0, abs=0.01)
    assert resid.var() == pytest.approx(var, rel=0.02)


def test_strided_posterior_coefficients_sum_to_one():
    sc = build_schedule(1000, 1.0)
    ts = ddim_timesteps(1000, 50)
    for t, s in zip(ts[:-1], ts[1:]):
        a, b, c, var, dc = sc.pair(int(t), int(s))
        assert a + b + c == pytest.approx(1.0, abs=1e-9)
        assert var >= 0 and dc >= 0
    assert sc.pair(5, 0)[:3] == pytest.approx((0.0, 0.0, 1.0))


@given(st.integers(2, 300), st.data())
def test_ddim_timesteps(T, data):
    steps = data.draw(st.integers(1, T))
    ts = ddim_timesteps(T, steps)
    assert ts[0] == T
    assert len(ts) == steps
    assert np.all(np.diff(ts) < 0)
    assert ts[-1] >= 1
    if steps > 1:
        assert ts[-1] == 1


def test_ddim_full_sequence():
    np.testing.assert_array_equal(ddim_timesteps(10, 10), np.arange(10, 0, -1))


def test_dump_roundtrip():
    sc = build_schedule(10, 1.0)
    back = ScheduleTable.loads(sc.dumps())
    np.testing.assert_array_equal(back.m, sc.m)
    np.testing.assert_array_equal(back.coef_x0, sc.coef_x0)
    assert "0.001000" in sc.table() and "0.999000" in sc.table()
