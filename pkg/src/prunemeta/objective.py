"""Composite objective: task loss, compression cost, generalization penalty.

The compression and generalization terms are selection and reporting
criteria, not gradient targets: pruning happens by thresholding importance
scores, so the parameter-count term never needs a differentiable surrogate.
Compression sub-terms are normalized by the unpruned baseline before
weighting; raw parameter counts, MACs, and millijoules are numerically
incommensurate and would make the sub-weights meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError
from .network import CostReport


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda_c: float = 0.1
    lambda_g: float = 0.05
    alpha0: float = 0.5
    alpha1: float = 0.3
    alpha2: float = 0.2

    def validate(self) -> None:
        for name in ("lambda_c", "lambda_g", "alpha0", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def task_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError("logits must be (n, classes) with one label per row")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ConfigError(f"label out of range for {logits.shape[1]} classes")
    log_z = logsumexp(logits, axis=1)
    true = logits[np.arange(len(labels)), labels]
    return float(np.mean(log_z - true))


def compression_loss(
    cost: CostReport, baseline: CostReport, weights: ObjectiveWeights
) -> float:
    """Weighted sum of baseline-normalized parameter, MAC, and energy ratios."""
    weights.validate()
    if min(baseline.params, baseline.macs, baseline.energy_mj) <= 0:
        raise ConfigError("baseline cost must be positive in every term")
    return (
        weights.alpha0 * (cost.params / baseline.params)
        + weights.alpha1 * (cost.macs / baseline.macs)
        + weights.alpha2 * (cost.energy_mj / baseline.energy_mj)
    )


def scott_bandwidth(pooled: np.ndarray) -> float:
    """Scott's factor times the mean per-dimension spread of the pooled sample."""
    n, d = pooled.shape
    sigma = float(np.mean(pooled.std(axis=0, ddof=1)))
    return sigma * n ** (-1.0 / (d + 4))


def _pooled_scott(p: np.ndarray, q: np.ndarray) -> float:
    # same rule as scott_bandwidth on the stacked sample, but reduced with
    # commutative sums so that swapping the arguments is bitwise neutral
    n = p.shape[0] + q.shape[0]
    d = p.shape[1]
    mean = (p.sum(axis=0) + q.sum(axis=0)) / n
    raw = (p**2).sum(axis=0) + (q**2).sum(axis=0)
    var = np.maximum((raw - n * mean**2) / (n - 1), 0.0)
    sigma = float(np.mean(np.sqrt(var)))
    return sigma * n ** (-1.0 / (d + 4))


def _log_kde(points: np.ndarray, at: np.ndarray, h: float) -> np.ndarray:
    d = points.shape[1]
    sq = ((at[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    log_kernel = -sq / (2.0 * h * h) - d * math.log(h) - 0.5 * d * math.log(2 * math.pi)
    return logsumexp(log_kernel, axis=1) - math.log(points.shape[0])


def generalization_penalty(
    meta_emb: np.ndarray,
    novel_emb: np.ndarray,
    bandwidth: float | None = None,
) -> float:
    """Symmetric KL between kernel density estimates of the two embedding sets.

    Monte-Carlo form: each direction averages the log-density ratio over that
    side's own sample points. Both estimates share one bandwidth (Scott's rule
    on the pooled sample unless given), so identical sets score exactly zero;
    small negative estimates from noise are clamped to zero.
    """
    p = np.asarray(meta_emb, dtype=np.float64)
    q = np.asarray(novel_emb, dtype=np.float64)
    p = p[:, None] if p.ndim == 1 else p
    q = q[:, None] if q.ndim == 1 else q
    if p.shape[0] < 10 or q.shape[0] < 10:
        raise ConfigError("need at least 10 points per sample")
    if p.shape[1] != q.shape[1]:
        raise ConfigError("embedding dimensions disagree")
    if bandwidth is None:
        bandwidth = _pooled_scott(p, q)
    if not (np.isfinite(bandwidth) and bandwidth > 0):
        raise ConfigError(
            "degenerate samples give a collapsed density; pass a larger bandwidth"
        )
    d_pq = float(np.mean(_log_kde(p, p, bandwidth) - _log_kde(q, p, bandwidth)))
    d_qp = float(np.mean(_log_kde(q, q, bandwidth) - _log_kde(p, q, bandwidth)))
    return max(0.0, d_pq + d_qp)


def total_loss(task: float, compress: float, gen: float, weights: ObjectiveWeights) -> float:
    weights.validate()
    for name, v in (("task", task), ("compress", compress), ("gen", gen)):
        if not math.isfinite(v):
            raise ConfigError(f"{name} component is not finite")
    return task + weights.lambda_c * compress + weights.lambda_g * gen
