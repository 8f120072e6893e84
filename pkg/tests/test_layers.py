"""Layer tests: LSTM cell against a brute-force oracle, Bayesian layer
reparameterization, and the windowed weight schedule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emobayes import autodiff as ad
from emobayes.autodiff import Tensor
from emobayes.layers import (LSTM, BayesLinear, Dense, Prior, gaussian_log_density,
                             sample_schedule)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_oracle(x, h, c, wx, wh, b, hidden):
    """Direct formula evaluation, independent of the graph engine."""
    z = x @ wx + h @ wh + b
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = _sigmoid(z[:, 3 * hidden:4 * hidden])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def test_lstm_step_all_zero():
    # zero weights + zero input: gates are 0.5, candidate tanh(0)=0
    lstm = LSTM(3, 4, np.random.default_rng(0))
    lstm.wx.data[:] = 0.0
    lstm.wh.data[:] = 0.0
    lstm.b.data[:] = 0.0
    h, c = lstm.step(Tensor(np.zeros((2, 3))), (Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4)))))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_step_matches_oracle():
    rng = np.random.default_rng(5)
    lstm = LSTM(3, 4, rng)
    x = rng.standard_normal((2, 3))
    h0 = rng.standard_normal((2, 4))
    c0 = rng.standard_normal((2, 4))
    h, c = lstm.step(Tensor(x), (Tensor(h0), Tensor(c0)))
    oh, oc = _lstm_oracle(x, h0, c0, lstm.wx.data, lstm.wh.data, lstm.b.data, 4)
    np.testing.assert_allclose(h.data, oh, atol=1e-12)
    np.testing.assert_allclose(c.data, oc, atol=1e-12)


def test_lstm_sequence_matches_step_recursion():
    rng = np.random.default_rng(6)
    lstm = LSTM(3, 4, rng)
    x = rng.standard_normal((2, 7, 3))
    out = lstm(Tensor(x)).data
    h = np.zeros((2, 4))
    c = np.zeros((2, 4))
    for t in range(7):
        h, c = _lstm_oracle(x[:, t, :], h, c, lstm.wx.data, lstm.wh.data, lstm.b.data, 4)
        np.testing.assert_allclose(out[:, t, :], h, atol=1e-12)


def test_lstm_forget_gate_bias_is_one():
    lstm = LSTM(3, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(lstm.b.data[4:8], 1.0)


def test_lstm_step_gradcheck():
    """Finite differences over every LSTM weight for a single step."""
    rng = np.random.default_rng(7)
    lstm = LSTM(2, 3, rng)
    x = rng.standard_normal((1, 2))
    projection = rng.standard_normal((1, 3))

    def loss_value():
        h, _ = lstm.step(Tensor(x), (Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3)))))
        return ad.tsum(h * Tensor(projection))

    loss = loss_value()
    ad.backward(loss)
    eps = 1e-6
    worst = 0.0
    for _, tensor in lstm.params():
        analytic = tensor.grad
        flat = tensor.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with ad.no_grad():
                hi = loss_value().item()
            flat[j] = orig - eps
            with ad.no_grad():
                lo = loss_value().item()
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    assert worst < 1e-5


def test_dense_matches_matmul_oracle():
    rng = np.random.default_rng(8)
    dense = Dense(4, 3, rng)
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(dense(Tensor(x)).data, x @ dense.w.data + dense.b.data, atol=1e-12)


# ---------------------------------------------------------------------------
# Bayesian linear layer
# ---------------------------------------------------------------------------

def test_bayes_linear_sigma_to_zero_limit():
    rng = np.random.default_rng(9)
    layer = BayesLinear(3, 2, Prior(), rng, rho_range=(-30.0, -30.0))
    x = rng.standard_normal((4, 3))
    out, log_q, log_p = layer.sample(Tensor(x), np.random.default_rng(1))
    np.testing.assert_allclose(out.data, layer.mean(Tensor(x)).data, atol=1e-12)
    assert np.isfinite(log_q.item()) and np.isfinite(log_p.item())


def test_bayes_linear_collapsed_posterior_bit_exact():
    rng = np.random.default_rng(10)
    layer = BayesLinear(3, 2, Prior(), rng)
    layer.collapse_posterior()
    w, b, _, _ = layer.draw_weights(np.random.default_rng(2), with_log_densities=False)
    np.testing.assert_array_equal(w.data, layer.params_.mu_w.data)
    np.testing.assert_array_equal(b.data, layer.params_.mu_b.data)


def test_single_weight_log_density_closed_form():
    # q = N(0, 1), sampled w = 0: log q = -0.5 log(2 pi)
    value = gaussian_log_density(Tensor(0.0), Tensor(0.0), Tensor(1.0)).item()
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_q_equals_log_prior_when_posterior_is_prior():
    # mu = 0 and sigma = 1 match the prior, so log q - log P = 0 per sample
    rng = np.random.default_rng(11)
    layer = BayesLinear(4, 3, Prior(0.0, 1.0), rng)
    rho_for_sigma_one = math.log(math.e - 1.0)  # softplus(rho) = 1
    layer.params_.mu_w.data[:] = 0.0
    layer.params_.mu_b.data[:] = 0.0
    layer.params_.rho_w.data[:] = rho_for_sigma_one
    layer.params_.rho_b.data[:] = rho_for_sigma_one
    for draw_seed in range(5):
        _, log_q, log_p = layer.sample(Tensor(np.zeros((1, 4))), np.random.default_rng(draw_seed))
        assert log_q.item() - log_p.item() == pytest.approx(0.0, abs=1e-10)


def test_bayes_linear_mean_matches_oracle():
    rng = np.random.default_rng(12)
    layer = BayesLinear(5, 2, Prior(), rng)
    x = rng.standard_normal((7, 5))
    expected = x @ layer.params_.mu_w.data + layer.params_.mu_b.data
    np.testing.assert_allclose(layer.mean(Tensor(x)).data, expected, atol=1e-12)


def test_bayes_linear_zero_input_gives_bias_means():
    rng = np.random.default_rng(13)
    layer = BayesLinear(5, 2, Prior(), rng)
    out = layer.mean(Tensor(np.zeros((3, 5))))
    np.testing.assert_allclose(out.data, np.broadcast_to(layer.params_.mu_b.data, (3, 2)),
                               atol=1e-15)


def test_reparameterization_gradcheck():
    """d(output)/d(mu) and d(output)/d(rho) through a fixed epsilon match
    finite differences."""
    rng = np.random.default_rng(14)
    layer = BayesLinear(3, 2, Prior(), rng)
    x = rng.standard_normal((4, 3))
    projection = rng.standard_normal((4, 2))
    noise_seed = 99

    def loss_value():
        out, log_q, log_p = layer.sample(Tensor(x), np.random.default_rng(noise_seed))
        return ad.tsum(out * Tensor(projection)) + log_q - log_p

    loss = loss_value()
    ad.backward(loss)
    eps = 1e-6
    worst = 0.0
    for _, tensor in layer.params():
        analytic = tensor.grad
        flat = tensor.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with ad.no_grad():
                hi = loss_value().item()
            flat[j] = orig - eps
            with ad.no_grad():
                lo = loss_value().item()
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    assert worst < 1e-5


def test_sample_mean_converges_to_mean_pass():
    """Empirical mean of stochastic outputs approaches the deterministic
    output within 3 standard errors over 1e5 draws."""
    rng = np.random.default_rng(15)
    layer = BayesLinear(3, 1, Prior(), rng)
    x = rng.standard_normal(3)
    n_draws = 100_000
    noise = np.random.default_rng(500)
    sigma_w = np.logaddexp(0.0, layer.params_.rho_w.data[:, 0])
    sigma_b = float(np.logaddexp(0.0, layer.params_.rho_b.data[0]))
    # direct sampling shortcut: output = x (mu_w + sigma_w eps) + mu_b + sigma_b eps_b
    eps_w = noise.standard_normal((n_draws, 3))
    eps_b = noise.standard_normal(n_draws)
    draws = ((layer.params_.mu_w.data[:, 0] + sigma_w * eps_w) * x).sum(axis=1) \
        + layer.params_.mu_b.data[0] + sigma_b * eps_b
    with ad.no_grad():
        expected = layer.mean(Tensor(x[None, :])).item()
    se = draws.std(ddof=1) / math.sqrt(n_draws)
    assert abs(draws.mean() - expected) < 3 * se


def test_schedule_draw_counts():
    rng = np.random.default_rng(16)
    layer = BayesLinear(2, 1, Prior(), rng)
    assert sample_schedule(layer, 300, 50, np.random.default_rng(0)).n_draws == 6
    assert sample_schedule(layer, 50, 50, np.random.default_rng(0)).n_draws == 1
    schedule = sample_schedule(layer, 51, 50, np.random.default_rng(0))
    assert schedule.n_draws == 2
    assert schedule.draw_index(50) == 1
    assert schedule.draw_index(49) == 0


@settings(max_examples=50, deadline=None)
@given(n_frames=st.integers(1, 400), window=st.integers(1, 80))
def test_schedule_frame_mapping_total_and_piecewise_constant(n_frames, window):
    rng = np.random.default_rng(17)
    layer = BayesLinear(2, 1, Prior(), rng)
    schedule = sample_schedule(layer, n_frames, window, np.random.default_rng(0),
                               with_log_densities=False)
    assert schedule.n_draws == -(-n_frames // window)
    indices = [schedule.draw_index(t) for t in range(n_frames)]
    # total, monotone, and switching exactly at multiples of the window
    assert indices[0] == 0 and indices[-1] == schedule.n_draws - 1
    for t in range(1, n_frames):
        if t % window == 0:
            assert indices[t] == indices[t - 1] + 1
        else:
            assert indices[t] == indices[t - 1]
    with pytest.raises(IndexError):
        schedule.draw_index(n_frames)


def test_schedule_records_log_densities_per_draw():
    rng = np.random.default_rng(18)
    layer = BayesLinear(2, 2, Prior(), rng)
    schedule = sample_schedule(layer, 120, 50, np.random.default_rng(3))
    assert len(schedule.log_q) == len(schedule.draws) == 3
    for log_q, log_p in zip(schedule.log_q, schedule.log_prior):
        assert np.isfinite(log_q.item())
        assert np.isfinite(log_p.item())


def test_prior_requires_positive_std():
    with pytest.raises(ValueError):
        Prior(0.0, 0.0)
