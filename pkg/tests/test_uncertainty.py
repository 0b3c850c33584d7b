"""MC-dropout statistics and calibration analytics."""

import numpy as np
import pytest
import torch

from prunemeta import network as nc
from prunemeta import uncertainty as uq
from prunemeta.errors import ConfigError


def dropout_net(rate=0.3, seed=0):
    return nc.toy_backbone(channels=(4, 8), num_classes=3, head_dropout=rate, seed=seed)


def batch(n=8, seed=0):
    return np.random.default_rng(seed).normal(0.5, 0.2, (n, 3, 16, 16)).astype(np.float32)


def test_paper_defaults():
    assert uq.DEFAULT_PASSES == 20
    assert uq.SIGMA_THRESHOLD == 0.15


def test_too_few_passes_rejected():
    with pytest.raises(ConfigError):
        uq.mc_predict(dropout_net(), batch(), passes=1)


def test_zero_rate_collapses_variance():
    mu, var, flagged = uq.mc_predict(dropout_net(rate=0.0), batch(), passes=5, seed=1)
    assert np.all(var == 0.0)
    assert not flagged.any()
    np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-6)


def test_statistics_match_manual_passes():
    # recompute the T=2 stack by hand with the documented (seed, t) derivation
    # and check the population-variance convention: var of {0.4, 0.6} is 0.01,
    # i.e. squared deviations averaged over T, not T-1
    net = dropout_net(rate=0.4)
    x = batch(n=4, seed=3)
    seed = 9
    mu, var, _ = uq.mc_predict(net, x, passes=2, seed=seed)

    params = nc.parameters(net)
    stack = []
    with torch.no_grad():
        for t in range(2):
            gen = torch.Generator().manual_seed((seed * 1_000_003 + t) % (2**63))
            logits, _, _ = nc.functional_forward(
                net, params, torch.as_tensor(x), dropout_gen=gen
            )
            stack.append(torch.softmax(logits, dim=1).numpy())
    stack = np.stack(stack).astype(np.float64)
    np.testing.assert_array_equal(mu, stack.mean(axis=0))
    np.testing.assert_array_equal(var, ((stack - stack.mean(axis=0)) ** 2).mean(axis=0))
    two = np.array([0.4, 0.6])
    assert ((two - two.mean()) ** 2).mean() == pytest.approx(0.01)


def test_mean_rows_sum_to_one_and_reproducible():
    net = dropout_net(rate=0.5)
    x = batch(n=6, seed=2)
    mu1, var1, f1 = uq.mc_predict(net, x, passes=10, seed=4)
    mu2, var2, f2 = uq.mc_predict(net, x, passes=10, seed=4)
    np.testing.assert_allclose(mu1.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(mu1, mu2) and np.array_equal(var1, var2)
    assert np.array_equal(f1, f2)
    mu3, _, _ = uq.mc_predict(net, x, passes=10, seed=5)
    assert not np.array_equal(mu1, mu3)


def test_variance_grows_with_dropout_rate():
    x = batch(n=20, seed=6)
    levels = []
    for rate in (0.0, 0.1, 0.5):
        net = dropout_net(rate=rate, seed=7)
        mu, var, _ = uq.mc_predict(net, x, passes=20, seed=8)
        predicted = mu.argmax(axis=1)
        levels.append(var[np.arange(len(predicted)), predicted].mean())
    assert levels[0] == 0.0
    assert levels[0] <= levels[1] <= levels[2]


def test_flag_uses_predicted_class_variance():
    net = dropout_net(rate=0.5)
    x = batch(n=10, seed=9)
    mu, var, flagged = uq.mc_predict(net, x, passes=8, seed=10, threshold=0.0)
    predicted = mu.argmax(axis=1)
    want = var[np.arange(len(predicted)), predicted] > 0.0
    assert np.array_equal(flagged, want)


def test_calibration_requires_enough_predictions():
    with pytest.raises(ConfigError):
        uq.calibration_report(np.zeros(50), np.zeros(50), np.zeros(50, bool))


def test_calibration_constant_variance_degenerates():
    n = 120
    sigma = np.full(n, 0.02)
    errors = np.random.default_rng(0).integers(0, 2, n)
    report = uq.calibration_report(sigma, errors, sigma > 0.15)
    assert report.flag_rate in (0.0, 1.0)
    assert report.spearman_rho is None
    assert "undefined" in report.note
    # all-correct predictions degenerate the same way
    report = uq.calibration_report(
        np.linspace(0, 1, n), np.zeros(n, int), np.zeros(n, bool)
    )
    assert report.spearman_rho is None
    assert report.flagged_error_rate is None


def test_calibration_perfect_ordering():
    # all 100 errors carry the top variances among n=200; with midrank ties the
    # achievable Spearman is (n/2)*sqrt(pq)/sqrt((n^2-1)/12) ~= 0.866, the
    # binary-variable ceiling
    n = 200
    sigma = np.linspace(0.0, 1.0, n)
    errors = (np.arange(n) >= n // 2).astype(int)
    report = uq.calibration_report(sigma, errors, sigma > 0.5)
    assert report.spearman_rho == pytest.approx(0.86603, abs=1e-4)
    assert report.spearman_rho > 0.8
    assert report.flagged_error_rate > 0.9
    assert report.unflagged_error_rate < 0.1


def test_calibration_rates():
    n = 100
    sigma = np.concatenate([np.full(60, 0.01), np.full(40, 0.3)])
    errors = np.concatenate([np.zeros(60, int), np.ones(40, int)])
    flagged = sigma > 0.15
    report = uq.calibration_report(sigma, errors, flagged)
    assert report.flag_rate == pytest.approx(0.4)
    assert report.flagged_error_rate == pytest.approx(1.0)
    assert report.unflagged_error_rate == pytest.approx(0.0)
