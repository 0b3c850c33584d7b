"""Scoring oracles: finite differences, brute-force Fisher, analytic traces."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prunemeta import network as nc
from prunemeta import scoring as sc
from prunemeta.errors import ConfigError, StructuralError
from prunemeta.network import ActivationRecord


def record(table, labels):
    table = np.asarray(table, dtype=np.float64)
    return ActivationRecord(
        pooled={"layer": table},
        channels={"layer": np.arange(table.shape[1])},
        labels=np.asarray(labels),
    )


# ---------------------------------------------------------------------------
# gradient norm


def tiny_fd_net():
    # 14 parameters: conv 1->2 with a (1,3) kernel, fc head 2->2
    return nc.build_network(
        [
            dict(name="c", kind="conv", in_channels=1, out_channels=2, kernel=(1, 3)),
            dict(name="head", kind="fc", in_channels=2, out_channels=2),
        ],
        seed=11,
        dtype=torch.float64,
    )


def finite_difference_grad_norm(net, images, labels, h=1e-5):
    """Oracle: per-sample central differences over every conv weight element,
    per-channel Frobenius norm, then the mean over samples."""
    x = torch.as_tensor(images, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=torch.long)

    def loss_at(params, i):
        logits, _, _ = nc.functional_forward(net, params, x[i : i + 1])
        return float(torch.nn.functional.cross_entropy(logits, y[i : i + 1]))

    out = {}
    for layer in net.conv_layers():
        w_shape = layer.weight.shape
        acc = np.zeros(w_shape[0])
        for i in range(x.shape[0]):
            grads = np.zeros(w_shape)
            for idx in np.ndindex(*w_shape):
                for sign in (+1, -1):
                    params = nc.parameters(net)
                    params[layer.name]["weight"][idx] += sign * h
                    grads[idx] += sign * loss_at(params, i)
            grads /= 2 * h
            acc += np.sqrt((grads.reshape(w_shape[0], -1) ** 2).sum(axis=1))
        out[layer.name] = acc / x.shape[0]
    return out


def test_gradient_norm_matches_central_finite_differences():
    net = tiny_fd_net()
    rng = np.random.default_rng(5)
    # the +0.3 shift keeps pre-activations away from the ReLU kink at this seed,
    # so the central differences stay clean at step 1e-5
    images = rng.normal(size=(3, 1, 4, 4)) + 0.3
    labels = np.array([0, 1, 0])
    got = sc.gradient_norm(net, images, labels)
    want = finite_difference_grad_norm(net, images, labels)
    for name in want:
        np.testing.assert_allclose(got[name], want[name], rtol=1e-4)


def test_gradient_norm_near_zero_at_loss_minimum():
    # hand-set weights drive the true-class logit far above the other:
    # conv makes channel 0 strongly positive, head maps it to class 0
    net = nc.build_network(
        [
            dict(name="c", kind="conv", in_channels=1, out_channels=2, kernel=(1, 1)),
            dict(name="head", kind="fc", in_channels=2, out_channels=2),
        ],
        dtype=torch.float64,
    )
    params = nc.parameters(net)
    params["c"]["weight"][:] = torch.tensor([[[[5.0]]], [[[-5.0]]]])
    params["head"]["weight"][:] = torch.tensor([[30.0, 0.0], [0.0, 30.0]])
    net = nc.with_parameters(net, params)
    images = np.ones((1, 1, 2, 2))
    g = sc.gradient_norm(net, images, [0])
    assert all(v.max() < 1e-6 for v in g.values())


def test_channel_frobenius_three_four_five():
    assert sc.channel_frobenius(torch.tensor([[3.0, 4.0]])) == pytest.approx([5.0])


# ---------------------------------------------------------------------------
# Hessian augmentation


def test_quadratic_trace_estimate_and_factor():
    # L = w.w on a 2-parameter channel: H = 2I, trace 4, factor sqrt(5)
    gen = torch.Generator().manual_seed(0)
    w = torch.tensor([[0.3, -0.7]], dtype=torch.float64)
    traces = sc.channel_hessian_traces(lambda t: (t * t).sum(), w, probes=64, generator=gen)
    assert traces[0] == pytest.approx(4.0, rel=0.1)
    factor = math.sqrt(1.0 + 1.0 * traces[0])
    assert factor == pytest.approx(math.sqrt(5.0), rel=0.05)


def test_hutchinson_estimate_is_unbiased_on_dense_quadratic():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(6, 6))
    a = b @ b.T  # symmetric, Hessian of w'Aw is 2A
    a_t = torch.as_tensor(a)
    w = torch.as_tensor(rng.normal(size=(2, 3)))

    def loss(t):
        flat = t.reshape(-1)
        return flat @ a_t @ flat

    gen = torch.Generator().manual_seed(1)
    traces = sc.channel_hessian_traces(loss, w, probes=2048, generator=gen)
    want = np.array([2 * np.trace(a[:3, :3]), 2 * np.trace(a[3:, 3:])])
    np.testing.assert_allclose(traces, want, rtol=0.15)


def test_hessian_augment_identity_cases():
    net = tiny_fd_net()
    rng = np.random.default_rng(0)
    images = rng.normal(size=(4, 1, 4, 4))
    labels = np.array([0, 1, 1, 0])
    g = sc.gradient_norm(net, images, labels)
    same = sc.hessian_augment(g, net, images, labels, eta=0.0)
    for name in g:
        np.testing.assert_array_equal(same[name], g[name])
    zeros = {name: np.zeros_like(v) for name, v in g.items()}
    aug = sc.hessian_augment(zeros, net, images, labels, eta=1.0, probes=4)
    for v in aug.values():
        np.testing.assert_array_equal(v, 0.0)


def test_hessian_augment_never_shrinks_gradients():
    # trace estimates are clamped at zero, so the factor is >= 1
    net = tiny_fd_net()
    rng = np.random.default_rng(7)
    images = rng.normal(size=(6, 1, 4, 4))
    labels = rng.integers(0, 2, size=6)
    g = sc.gradient_norm(net, images, labels)
    aug = sc.hessian_augment(g, net, images, labels, eta=0.5, probes=8, seed=2)
    for name in g:
        assert np.all(aug[name] >= g[name] - 1e-12)
        assert np.all(np.isfinite(aug[name]))


# ---------------------------------------------------------------------------
# variance and Fisher


def test_feature_variance_hand_values():
    rec = record([[0.0], [2.0]], [0, 1])
    assert sc.feature_variance(rec)["layer"][0] == pytest.approx(1.0)
    const = record([[3.0], [3.0], [3.0]], [0, 1, 0])
    assert sc.feature_variance(const)["layer"][0] == 0.0
    with pytest.raises(ConfigError):
        sc.feature_variance(record([[1.0]], [0]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(0.01, 100.0))
def test_feature_variance_scales_quadratically(seed, k):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(8, 3))
    v1 = sc.feature_variance(record(table, np.zeros(8)))["layer"]
    v2 = sc.feature_variance(record(k * table, np.zeros(8)))["layer"]
    np.testing.assert_allclose(v2, k * k * v1, rtol=1e-9)


def brute_force_fisher(table, labels, eps=sc.FISHER_EPS):
    table = np.asarray(table, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    for c in range(table.shape[1]):
        a = table[:, c]
        grand = a.mean()
        num = 0.0
        den = 0.0
        for k in np.unique(labels):
            vals = a[labels == k]
            num += len(vals) * (vals.mean() - grand) ** 2
            den += float(((vals - vals.mean()) ** 2).sum())
        out.append(num / (den + eps))
    return np.array(out)


def test_fisher_hand_example():
    # class A {0,2}, class B {4,6}: numerator 2(1-3)^2 + 2(5-3)^2 = 16, scatter 4
    rec = record([[0.0], [2.0], [4.0], [6.0]], [0, 0, 1, 1])
    d = sc.fisher_discriminant(rec)["layer"][0]
    assert d == pytest.approx(16.0 / (4.0 + sc.FISHER_EPS))
    assert d == pytest.approx(4.0, rel=1e-6)


def test_fisher_identical_class_means_gives_zero():
    rec = record([[0.0], [2.0], [1.0], [1.0]], [0, 0, 1, 1])
    assert sc.fisher_discriminant(rec)["layer"][0] == pytest.approx(0.0, abs=1e-12)


def test_fisher_separated_constant_classes_hits_the_guard():
    # zero within-class scatter: numerator 2(1-2)^2 + 2(3-2)^2 = 4, so D = 4/eps
    rec = record([[1.0], [1.0], [3.0], [3.0]], [0, 0, 1, 1])
    d = sc.fisher_discriminant(rec)["layer"][0]
    assert d == pytest.approx(4.0 / sc.FISHER_EPS, rel=1e-9)


def test_fisher_requires_two_classes():
    with pytest.raises(ConfigError):
        sc.fisher_discriminant(record([[1.0], [2.0]], [0, 0]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_fisher_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_classes = rng.integers(2, 5)
    rows = []
    labels = []
    for k in range(n_classes):
        count = rng.integers(1, 6)
        rows.append(rng.normal(loc=k, size=(count, 4)))
        labels += [k] * count
    table = np.vstack(rows)
    got = sc.fisher_discriminant(record(table, labels))["layer"]
    want = brute_force_fisher(table, np.asarray(labels))
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=1e-10)


# ---------------------------------------------------------------------------
# combination, thresholds, task complexity


def test_combine_weighted_sum_examples():
    w = sc.DacisWeights(0.3, 0.2, 0.5, eta=0.0)
    # two channels: one at the top of every component range, one at the bottom
    combined = sc.combine_dacis(
        {"l": np.array([0.0, 1.0])},
        {"l": np.array([0.0, 2.0])},
        {"l": np.array([0.0, 3.0])},
        w,
    )["l"]
    assert combined[1] == pytest.approx(1.0)
    assert combined[0] == pytest.approx(0.0)
    # top of G only
    combined = sc.combine_dacis(
        {"l": np.array([0.0, 1.0])},
        {"l": np.array([2.0, 0.0])},
        {"l": np.array([3.0, 0.0])},
        w,
    )["l"]
    assert combined[1] == pytest.approx(0.3)


def test_combine_constant_components_tie_to_half():
    w = sc.DacisWeights(0.3, 0.2, 0.5, eta=0.0)
    t = {"l": np.full(4, 7.0)}
    combined = sc.combine_dacis(t, t, t, w)["l"]
    np.testing.assert_allclose(combined, 0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(1e-3, 1e3))
def test_combined_ranking_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    w = sc.DacisWeights()
    g = {"l": rng.random(6)}
    v = {"l": rng.random(6)}
    d = {"l": rng.random(6)}
    base = sc.combine_dacis(g, v, d, w)["l"]
    scaled = sc.combine_dacis({"l": k * g["l"]}, v, d, w)["l"]
    np.testing.assert_allclose(scaled, base, atol=1e-9)


def test_combine_shape_mismatch_raises():
    w = sc.DacisWeights()
    with pytest.raises(StructuralError):
        sc.combine_dacis({"l": np.ones(3)}, {"l": np.ones(4)}, {"l": np.ones(3)}, w)


def test_weights_validation():
    with pytest.raises(ConfigError):
        sc.DacisWeights(0.5, 0.5, 0.5).validate()
    with pytest.raises(ConfigError):
        sc.DacisWeights(-0.1, 0.6, 0.5).validate()
    with pytest.raises(ConfigError):
        sc.DacisWeights(eta=-1.0).validate()
    sc.DacisWeights().validate()


def test_layer_threshold_examples():
    p = sc.ThresholdParams(tau_base=0.1, depth_gain=0.5, complexity_gain=2.0)
    assert sc.layer_threshold(p, 3, 3, 0.0) == pytest.approx(0.15)
    assert sc.layer_threshold(p, 0, 3, 0.5) == pytest.approx(0.1 * math.exp(-1.0))
    taus = [sc.layer_threshold(p, 2, 3, c) for c in (0.0, 0.5, 1.0, 4.0)]
    assert taus == sorted(taus, reverse=True)
    assert taus[-1] < 0.01 * taus[0]


def test_task_complexity_examples():
    assert sc.task_complexity([[1.0, 0.0], [1.0, 0.0]]) == pytest.approx(0.0)
    assert sc.task_complexity([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(1.0)
    assert sc.task_complexity([[1.0, 0.0], [-1.0, 0.0]]) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        sc.task_complexity([[1.0, 0.0], [0.0, 0.0]])


def test_importance_table_json_export():
    net = tiny_fd_net()
    rng = np.random.default_rng(1)
    images = rng.normal(size=(8, 1, 4, 4))
    labels = rng.integers(0, 2, size=8)
    table = sc.build_importance_table(net, images, labels, sc.DacisWeights(eta=0.0))
    import json

    payload = json.loads(table.to_json())
    assert set(payload) == {"c"}
    assert set(payload["c"]["0"]) == {"G", "G_aug", "V", "D", "dacis"}
    assert all(np.isfinite(list(rec.values())).all() for rec in payload["c"].values())
