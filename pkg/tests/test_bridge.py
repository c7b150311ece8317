import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fd3.bridge import (
    BridgeConfig, TimestepSchedule, bridge_state, ddb_coefficients, ddb_step, ode_velocity,
    sample, sample_trajectory, training_loss, uniform_schedule,
)

from conftest import random_image


def oracle(x0):
    return lambda x, t: np.broadcast_to(x0, x.shape).copy()


def test_state_endpoints(rng):
    x0, x1 = random_image(rng), random_image(rng)
    assert np.array_equal(bridge_state(x0, x1, 0.0), x0)
    assert np.array_equal(bridge_state(x0, x1, 1.0), x1)


def test_state_midpoint():
    out = bridge_state(np.zeros((8, 8, 3)), np.ones((8, 8, 3)), 0.5)
    assert np.all(out == 0.5)


def test_state_per_element_t(rng):
    x0 = rng.uniform(size=(3, 8, 8, 3))
    x1 = rng.uniform(size=(3, 8, 8, 3))
    t = np.array([0.0, 0.25, 1.0])
    out = bridge_state(x0, x1, t)
    assert np.array_equal(out[0], x0[0])
    np.testing.assert_allclose(out[1], 0.75 * x0[1] + 0.25 * x1[1])
    assert np.array_equal(out[2], x1[2])


def test_state_shape_mismatch():
    with pytest.raises(ValueError):
        bridge_state(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)), 0.5)


def test_state_with_noise_schedule(rng):
    cfg = BridgeConfig(sigma_schedule=lambda t: 0.1 * np.sqrt(t * (1 - t)))
    x0, x1 = np.zeros((32, 32, 3)), np.ones((32, 32, 3))
    out = bridge_state(x0, x1, 0.5, cfg, np.random.default_rng(0))
    assert abs(out.mean() - 0.5) < 0.01
    assert abs(out.std() - 0.05) < 0.005
    # endpoints stay exact because sigma vanishes there
    assert np.array_equal(bridge_state(x0, x1, 1.0, cfg, rng), x1)


def test_bad_alpha_schedule():
    with pytest.raises(ValueError):
        BridgeConfig(alpha_schedule=lambda t: 1 - t)


def test_state_torch(rng):
    x0 = torch.rand(2, 8, 8, 3)
    x1 = torch.rand(2, 8, 8, 3)
    out = bridge_state(x0, x1, np.array([0.0, 1.0]))
    assert torch.equal(out[0], x0[0]) and torch.equal(out[1], x1[1])


def test_step_to_zero_returns_prediction(rng):
    xt, x0hat = random_image(rng), random_image(rng)
    assert np.array_equal(ddb_step(xt, 0.7, 0.0, x0hat), x0hat)


def test_step_fixed_point(rng):
    xt = random_image(rng)
    np.testing.assert_allclose(ddb_step(xt, 0.8, 0.3, xt), xt, atol=1e-15)


def test_step_midpoint():
    out = ddb_step(np.ones((8, 8, 3)), 1.0, 0.5, np.zeros((8, 8, 3)))
    assert np.all(out == 0.5)


@pytest.mark.parametrize("t, s", [(0.5, 0.5), (0.5, 0.6), (0.0, 0.0), (1.2, 0.5), (0.5, -0.1)])
def test_step_rejects_bad_times(t, s):
    with pytest.raises(ValueError):
        ddb_step(np.zeros((8, 8, 3)), t, s, np.zeros((8, 8, 3)))


@settings(max_examples=200)
@given(t=st.floats(1e-6, 1.0), frac=st.floats(0.0, 0.999999))
def test_step_coefficients_sum_to_one(t, frac):
    w_pred, w_state = ddb_coefficients(t, t * frac)
    assert abs(w_pred + w_state - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.floats(0.05, 1.0), a=st.floats(0.01, 0.99),
       b=st.floats(0.0, 0.99))
def test_two_steps_telescope(seed, t, a, b):
    rng = np.random.default_rng(seed)
    x0, xt = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    s = t * a
    r = s * b
    two = ddb_step(ddb_step(xt, t, s, x0), s, r, x0)
    one = ddb_step(xt, t, r, x0)
    assert np.max(np.abs(two - one)) <= 1e-9


def test_uniform_schedule_ten():
    sched = uniform_schedule(10)
    assert sched.nfe == 10
    np.testing.assert_allclose(sched.steps, [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0],
                               atol=1e-15)
    assert sched.steps[0] == 1.0 and sched.steps[-1] == 0.0


def test_uniform_schedule_small():
    assert uniform_schedule(1).steps == (1.0, 0.0)
    assert uniform_schedule(2).steps == (1.0, 0.5, 0.0)


@pytest.mark.parametrize("nfe", [0, -3, 2.5])
def test_uniform_schedule_rejects(nfe):
    with pytest.raises(ValueError):
        uniform_schedule(nfe)


@pytest.mark.parametrize("steps", [(1.0,), (0.9, 0.0), (1.0, 0.1), (1.0, 0.5, 0.5, 0.0), (1.0, 0.2, 0.4, 0.0)])
def test_schedule_validation(steps):
    with pytest.raises(ValueError):
        TimestepSchedule(steps)


@pytest.mark.parametrize("nfe", [1, 2, 5, 10, 20])
def test_sampler_oracle_exact(rng, nfe):
    x0, y = random_image(rng), random_image(rng)
    out = sample(oracle(x0), y, uniform_schedule(nfe))
    assert np.max(np.abs(out - x0)) <= 1e-9


def test_sampler_oracle_nonuniform_schedule(rng):
    x0, y = random_image(rng), random_image(rng)
    out = sample(oracle(x0), y, TimestepSchedule((1.0, 0.97, 0.6, 0.11, 0.0)))
    assert np.max(np.abs(out - x0)) <= 1e-9


def test_sampler_single_step_is_prediction_clipped(rng):
    y = random_image(rng)
    pred = lambda x, t: 2.0 * x - 0.5
    out = sample(pred, y, uniform_schedule(1))
    np.testing.assert_array_equal(out, np.clip(2.0 * y - 0.5, 0, 1))


def test_sampler_identity_predictor(rng):
    y = random_image(rng)
    np.testing.assert_allclose(sample(lambda x, t: x, y, uniform_schedule(7)), y, atol=1e-12)


def test_sampler_passes_current_time(rng):
    seen = []

    def pred(x, t):
        seen.append(float(t[0]))
        return x

    sample(pred, random_image(rng), uniform_schedule(4))
    assert seen == [1.0, 0.75, 0.5, 0.25]


def test_sampler_does_not_clip_midway(rng):
    # predictor overshoots; the intermediate state leaves [0, 1]
    y = np.full((8, 8, 3), 0.9)
    states = sample_trajectory(lambda x, t: x + 1.0, y, uniform_schedule(2))
    assert states[1].max() > 1.0
    assert sample(lambda x, t: x + 1.0, y, uniform_schedule(2)).max() == 1.0


def test_sampler_batch(rng):
    x0 = rng.uniform(size=(3, 16, 16, 3))
    y = rng.uniform(size=(3, 16, 16, 3))
    out = sample(lambda x, t: x0, y, 5)
    np.testing.assert_allclose(out, x0, atol=1e-12)


def test_ode_velocity_matches_small_step(rng):
    xt, x0 = random_image(rng), random_image(rng)
    t, h = 0.6, 1e-6
    fd = (xt - ddb_step(xt, t, t - h, x0)) / h
    np.testing.assert_allclose(fd, ode_velocity(xt, t, x0), atol=1e-6)


def test_loss_perfect_predictor(rng):
    x0, y = random_image(rng), random_image(rng)
    assert training_loss(oracle(x0), x0, y, rng=rng) == 0.0


@pytest.mark.parametrize("c", [0.1, -0.3, 0.05])
def test_loss_constant_offset(rng, c):
    x0, y = random_image(rng), random_image(rng)
    loss = training_loss(lambda x, t: x0 + c, x0, y, rng=rng)
    assert loss == pytest.approx(c * c, rel=1e-12)


def test_loss_deterministic(rng):
    x0, y = random_image(rng), random_image(rng)
    seen = []

    def pred(x, t):
        seen.append(float(t[0]))
        return x

    a = training_loss(pred, x0, y, rng=np.random.default_rng(5))
    b = training_loss(pred, x0, y, rng=np.random.default_rng(5))
    assert a == b and seen[0] == seen[1]


def test_loss_uses_bridge_state(rng):
    x0, y = random_image(rng), random_image(rng)
    # predicting x_t itself costs t^2 * mean((y - x0)^2)
    loss = training_loss(lambda x, t: x, x0, y, t=0.3)
    assert loss == pytest.approx(0.09 * np.mean((y - x0) ** 2), rel=1e-12)


def test_loss_nonnegative_and_torch_differentiable():
    x0 = torch.rand(2, 8, 8, 3)
    y = torch.rand(2, 8, 8, 3)
    w = torch.tensor(0.5, requires_grad=True)
    loss = training_loss(lambda x, t: w * x, x0, y, rng=np.random.default_rng(0))
    assert loss.item() >= 0
    loss.backward()
    assert w.grad is not None
