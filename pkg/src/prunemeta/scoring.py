"""Channel importance scoring.

Three per-channel signals over the conv stack, combined into one score:

  - gradient sensitivity G: mean over samples of the Frobenius norm of the
    per-sample cross-entropy gradient of the channel's weight slice, with an
    optional curvature factor sqrt(1 + eta * tr(H_c)) estimated by Hutchinson
    probes through a Hessian-vector product;
  - activation variance V: population variance of the GAP activation;
  - class discriminability D: Fisher ratio of between-class to within-class
    scatter of the GAP activation.

The weighted combination normalizes each component per layer to [0, 1] first
(min-max; a constant component maps to 0.5), because the raw components carry
incommensurate units and an unnormalized sum is dominated by whichever signal
happens to have the largest scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, StructuralError
from .network import ActivationRecord, ChannelMask, Network, functional_forward, parameters

FISHER_EPS = 1e-8


@dataclass(frozen=True)
class DacisWeights:
    """Combination weights (grad, variance, fisher) plus curvature settings."""

    lam_grad: float = 0.3
    lam_var: float = 0.2
    lam_fisher: float = 0.5
    eta: float = 0.1
    hutchinson_probes: int = 16

    def validate(self) -> None:
        lams = (self.lam_grad, self.lam_var, self.lam_fisher)
        if any(l < 0 for l in lams):
            raise ConfigError("combination weights must be non-negative")
        if abs(sum(lams) - 1.0) > 1e-9:
            raise ConfigError(f"combination weights must sum to 1, got {sum(lams)}")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.hutchinson_probes < 1:
            raise ConfigError("hutchinson_probes must be >= 1")


@dataclass
class ImportanceTable:
    """Per-layer per-channel component and combined scores."""

    layers: tuple[str, ...]
    grad: dict[str, np.ndarray]
    grad_aug: dict[str, np.ndarray]
    variance: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]
    combined: dict[str, np.ndarray]
    refined: dict[str, np.ndarray] | None = None

    def scores(self) -> dict[str, np.ndarray]:
        """Refined scores when present, combined otherwise."""
        return self.refined if self.refined is not None else self.combined

    def to_json(self) -> str:
        payload: dict[str, dict[str, dict[str, float]]] = {}
        for name in self.layers:
            per_layer = {}
            for c in range(len(self.combined[name])):
                rec = {
                    "G": float(self.grad[name][c]),
                    "G_aug": float(self.grad_aug[name][c]),
                    "V": float(self.variance[name][c]),
                    "D": float(self.fisher[name][c]),
                    "dacis": float(self.combined[name][c]),
                }
                if self.refined is not None:
                    rec["refined"] = float(self.refined[name][c])
                per_layer[str(c)] = rec
            payload[name] = per_layer
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def channel_frobenius(grad: torch.Tensor) -> np.ndarray:
    """Frobenius norm of each output channel's slice of a gradient tensor."""
    flat = grad.reshape(grad.shape[0], -1)
    return torch.linalg.vector_norm(flat, dim=1).detach().numpy().astype(np.float64)


def gradient_norm(
    net: Network,
    images: np.ndarray | torch.Tensor,
    labels: np.ndarray | Sequence[int],
    mask: ChannelMask | None = None,
    max_samples: int | None = None,
) -> dict[str, np.ndarray]:
    """Per-channel G: mean over samples of per-sample weight-gradient norms."""
    x_all = torch.as_tensor(np.asarray(images), dtype=net.dtype)
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x_all.shape[0] == 0:
        raise ConfigError("gradient_norm needs a non-empty sample")
    n = x_all.shape[0] if max_samples is None else min(max_samples, x_all.shape[0])
    conv = net.conv_layers()
    params = parameters(net)
    weights = []
    for l in conv:
        params[l.name]["weight"].requires_grad_(True)
        weights.append(params[l.name]["weight"])
    sums = {l.name: np.zeros(l.out_channels, dtype=np.float64) for l in conv}
    for i in range(n):
        logits, _, _ = functional_forward(net, params, x_all[i : i + 1], mask)
        loss = torch.nn.functional.cross_entropy(logits, y_all[i : i + 1])
        grads = torch.autograd.grad(loss, weights)
        for l, g in zip(conv, grads):
            norms = channel_frobenius(g)
            if not np.all(np.isfinite(norms)):
                raise ConfigError(f"non-finite gradients in layer {l.name!r}")
            sums[l.name] += norms
    return {name: s / n for name, s in sums.items()}


def channel_hessian_traces(
    make_loss: Callable[[torch.Tensor], torch.Tensor],
    weight: torch.Tensor,
    probes: int,
    generator: torch.Generator,
) -> np.ndarray:
    """Hutchinson estimate of tr(H) per output channel of `weight`.

    make_loss(w) must rebuild the scalar loss from the supplied weight leaf.
    Rademacher probes span the full tensor; the cross-channel terms vanish in
    expectation, so the per-channel sums estimate the diagonal-block traces.
    """
    w = weight.detach().clone().requires_grad_(True)
    loss = make_loss(w)
    (g,) = torch.autograd.grad(loss, w, create_graph=True)
    acc = torch.zeros(w.shape[0], dtype=w.dtype)
    for _ in range(probes):
        v = (torch.randint(0, 2, w.shape, generator=generator) * 2 - 1).to(w.dtype)
        (hv,) = torch.autograd.grad((g * v).sum(), w, retain_graph=True)
        if not torch.isfinite(hv).all():
            raise ConfigError("non-finite Hessian-vector product")
        acc += (v * hv).reshape(w.shape[0], -1).sum(dim=1)
    return (acc / probes).detach().numpy().astype(np.float64)


def hessian_augment(
    grad_table: Mapping[str, np.ndarray],
    net: Network,
    images: np.ndarray | torch.Tensor,
    labels: np.ndarray | Sequence[int],
    eta: float,
    probes: int = 16,
    seed: int = 0,
    mask: ChannelMask | None = None,
) -> dict[str, np.ndarray]:
    """G_aug = G * sqrt(1 + eta * tr(H_c)), negative trace estimates clamped."""
    if eta < 0:
        raise ConfigError("eta must be non-negative")
    if eta == 0:
        return {name: np.array(v, dtype=np.float64) for name, v in grad_table.items()}
    x = torch.as_tensor(np.asarray(images), dtype=net.dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    params = parameters(net)
    out: dict[str, np.ndarray] = {}
    for l in net.conv_layers():

        def make_loss(w: torch.Tensor, _name: str = l.name) -> torch.Tensor:
            swapped = {
                name: (
                    {"weight": w, "bias": p["bias"]} if name == _name else p
                )
                for name, p in params.items()
            }
            logits, _, _ = functional_forward(net, swapped, x, mask)
            return torch.nn.functional.cross_entropy(logits, y)

        traces = channel_hessian_traces(make_loss, l.weight, probes, gen)
        traces = np.clip(traces, 0.0, None)
        out[l.name] = np.asarray(grad_table[l.name], dtype=np.float64) * np.sqrt(
            1.0 + eta * traces
        )
    return out


def feature_variance(acts: ActivationRecord) -> dict[str, np.ndarray]:
    """Population variance of the pooled activation, per channel."""
    out = {}
    for name, table in acts.pooled.items():
        if table.shape[0] < 2:
            raise ConfigError("feature_variance needs at least 2 samples")
        out[name] = np.var(table, axis=0, ddof=0).astype(np.float64)
    return out


def fisher_discriminant(acts: ActivationRecord) -> dict[str, np.ndarray]:
    """Between-class over within-class scatter of pooled activations.

    D_c = sum_k n_k * (mean_k - mean)^2 / (sum_k sum_{x in k} (x - mean_k)^2 + eps)
    with n_k the per-class sample count and eps guarding zero scatter.
    """
    labels = np.asarray(acts.labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("fisher_discriminant needs at least 2 classes")
    out = {}
    for name, table in acts.pooled.items():
        grand = table.mean(axis=0)
        between = np.zeros(table.shape[1], dtype=np.float64)
        within = np.zeros(table.shape[1], dtype=np.float64)
        for k in classes:
            rows = table[labels == k]
            mu = rows.mean(axis=0)
            between += rows.shape[0] * (mu - grand) ** 2
            within += ((rows - mu) ** 2).sum(axis=0)
        out[name] = between / (within + FISHER_EPS)
    return out


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Map to [0, 1] within a layer; a constant vector maps to all 0.5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def combine_dacis(
    grad_aug: Mapping[str, np.ndarray],
    variance: Mapping[str, np.ndarray],
    fisher: Mapping[str, np.ndarray],
    weights: DacisWeights,
) -> dict[str, np.ndarray]:
    weights.validate()
    if set(grad_aug) != set(variance) or set(grad_aug) != set(fisher):
        raise StructuralError("component tables cover different layers")
    combined = {}
    for name in grad_aug:
        g, v, d = (np.asarray(t[name], dtype=np.float64) for t in (grad_aug, variance, fisher))
        if not (g.shape == v.shape == d.shape):
            raise StructuralError(f"component shapes differ in layer {name!r}")
        combined[name] = (
            weights.lam_grad * minmax_normalize(g)
            + weights.lam_var * minmax_normalize(v)
            + weights.lam_fisher * minmax_normalize(d)
        )
    return combined


def build_importance_table(
    net: Network,
    images: np.ndarray | torch.Tensor,
    labels: np.ndarray | Sequence[int],
    weights: DacisWeights = DacisWeights(),
    seed: int = 0,
    max_grad_samples: int | None = 256,
) -> ImportanceTable:
    """Full scoring pass over a network's conv stack (unmasked)."""
    from .network import forward_with_stats  # local import avoids cycle at module load

    weights.validate()
    _, acts = forward_with_stats(net, None, images, labels)
    grad = gradient_norm(net, images, labels, max_samples=max_grad_samples)
    grad_aug = hessian_augment(
        grad, net, images, labels, weights.eta, weights.hutchinson_probes, seed
    )
    var = feature_variance(acts)
    fisher = fisher_discriminant(acts)
    combined = combine_dacis(grad_aug, var, fisher, weights)
    names = tuple(l.name for l in net.conv_layers())
    return ImportanceTable(names, grad, grad_aug, var, fisher, combined)


# ---------------------------------------------------------------------------
# thresholds and task complexity


@dataclass(frozen=True)
class ThresholdParams:
    tau_base: float = 0.1
    depth_gain: float = 0.5
    complexity_gain: float = 2.0

    def validate(self) -> None:
        if self.tau_base <= 0:
            raise ConfigError("tau_base must be positive")
        if self.depth_gain < 0 or self.complexity_gain < 0:
            raise ConfigError("threshold gains must be non-negative")


def layer_threshold(params: ThresholdParams, ell: int, num_layers: int, c_task: float) -> float:
    """tau_l = tau_base * (1 + depth_gain * l/L) * exp(-complexity_gain * C)."""
    params.validate()
    if not 0 <= ell <= num_layers:
        raise ConfigError(f"layer index {ell} outside [0, {num_layers}]")
    if c_task < 0:
        raise ConfigError("task complexity must be non-negative")
    depth = 1.0 + params.depth_gain * ell / num_layers
    return params.tau_base * depth * math.exp(-params.complexity_gain * c_task)


def task_complexity(prototypes: np.ndarray | Sequence[np.ndarray]) -> float:
    """1 minus the mean pairwise cosine similarity of class prototypes."""
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] < 2:
        raise ConfigError("need at least 2 prototype vectors")
    norms = np.linalg.norm(protos, axis=1)
    if np.any(norms == 0):
        raise ConfigError("zero-norm prototype")
    unit = protos / norms[:, None]
    cos = unit @ unit.T
    n = protos.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(1.0 - cos[iu].mean())
