"""Deployment metrics, episodic evaluation, and the statistical protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats as sps

from .errors import ConfigError
from .meta import prototype_classify, sample_episode
from .network import ActivationRecord, Network, functional_forward, parameters
from .synthdata import Dataset


def des(accuracy: float, fps: float, params_m: float, energy_mj: float) -> float:
    """Deployment efficiency: accuracy * fps / (params * energy)."""
    if params_m <= 0 or energy_mj <= 0:
        raise ConfigError("params and energy must be positive")
    return accuracy * fps / (params_m * energy_mj)


def fsi(accuracies) -> float:
    """Few-shot stability: 1 - sigma/mu over support resamplings (population sigma)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        raise ConfigError("fsi needs at least 2 resamplings")
    mu = a.mean()
    if mu <= 0:
        raise ConfigError("fsi undefined for non-positive mean accuracy")
    return float(1.0 - a.std() / mu)


def csg(acc_early: float, acc_late: float) -> float:
    """Cross-stage generalization: late-stage accuracy over early-stage accuracy."""
    if acc_early <= 0:
        raise ConfigError("early-stage accuracy must be positive")
    return acc_late / acc_early


def confidence_interval(mean: float, sigma: float, n: int) -> tuple[float, float]:
    """Normal-approximation 95% interval: mean +/- 1.96 * sigma / sqrt(n)."""
    half = 1.96 * sigma / math.sqrt(n)
    return (mean - half, mean + half)


@dataclass(frozen=True)
class EpisodeStats:
    mean: float
    sigma: float
    ci: tuple[float, float]
    records: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sigma": self.sigma,
            "ci_low": self.ci[0],
            "ci_high": self.ci[1],
            "episodes": len(self.records),
        }


def embed(net: Network, images, params=None) -> np.ndarray:
    params = parameters(net) if params is None else params
    with torch.no_grad():
        _, emb, _ = functional_forward(
            net, params, torch.as_tensor(np.asarray(images), dtype=net.dtype)
        )
    return emb.numpy()


def episodic_eval(
    net: Network | None,
    ds: Dataset,
    n_way: int = 5,
    k_shot: int = 5,
    n_query: int = 15,
    episodes: int = 1000,
    seed: int = 0,
    params=None,
    classify=None,
) -> EpisodeStats:
    """Prototype accuracy (percent) over independently sampled episodes.

    classify overrides the default embedding + nearest-prototype path; it
    receives an Episode and returns predicted query labels.
    """
    if episodes < 2:
        raise ConfigError("episodic_eval needs at least 2 episodes")
    accs, records = [], []
    for i in range(episodes):
        ep = sample_episode(ds, n_way, k_shot, n_query, [seed, i])
        if classify is None:
            emb_s = embed(net, ep.support_x, params)
            emb_q = embed(net, ep.query_x, params)
            pred, _ = prototype_classify(emb_s, ep.support_y, emb_q)
        else:
            pred = np.asarray(classify(ep))
        acc = 100.0 * float((pred == ep.query_y).mean())
        accs.append(acc)
        records.append({"episode": i, "classes": list(ep.class_ids), "acc": round(acc, 6)})
    a = np.asarray(accs)
    mean, sigma = float(a.mean()), float(a.std())
    return EpisodeStats(
        mean=mean,
        sigma=sigma,
        ci=confidence_interval(mean, sigma, len(accs)),
        records=tuple(records),
    )


def bonferroni_adjust(p_values, m: int | None = None) -> np.ndarray:
    """p * m capped at 1, against a family of m comparisons (default len)."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size if m is None else m
    if m < 1:
        raise ConfigError("family size must be >= 1")
    return np.minimum(1.0, p * m)


def bonferroni_threshold(alpha: float, m: int) -> float:
    if m < 1:
        raise ConfigError("family size must be >= 1")
    return alpha / m


def holm_adjust(p_values) -> np.ndarray:
    """Step-down adjusted p-values, returned in the input order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    if m < 1:
        raise ConfigError("need at least one p-value")
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[idx]))
        adjusted[idx] = running
    return adjusted


def cohens_d(a, b) -> float:
    """Mean difference over the root-mean of the two sample variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0)
    if pooled == 0:
        return 0.0
    return float((a.mean() - b.mean()) / pooled)


@dataclass(frozen=True)
class PairedTests:
    t_p: float | None
    wilcoxon_p: float | None
    bonferroni_p: float | None
    holm_p: float | None
    d: float

    def to_dict(self) -> dict:
        return {
            "t_p": self.t_p,
            "wilcoxon_p": self.wilcoxon_p,
            "bonferroni_p": self.bonferroni_p,
            "holm_p": self.holm_p,
            "cohens_d": self.d,
        }


def paired_tests(a, b, m: int = 1) -> PairedTests:
    """Paired t, Wilcoxon signed-rank, multiplicity-adjusted p, and effect size.

    m is the size of the comparison family the pair belongs to; with a single
    hypothesis in hand the Holm adjustment cannot step down and equals the
    Bonferroni product. Zero-variance differences leave the tests undefined
    and they are reported as absent.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 10:
        raise ConfigError("paired_tests needs >= 10 aligned pairs")
    if m < 1:
        raise ConfigError("family size must be >= 1")
    diff = a - b
    d = cohens_d(a, b)
    if np.all(diff == diff[0]) and diff[0] == 0:
        return PairedTests(t_p=None, wilcoxon_p=None, bonferroni_p=None, holm_p=None, d=d)
    if diff.std(ddof=1) == 0:
        t_p = None
    else:
        t_p = float(sps.ttest_rel(a, b).pvalue)
    try:
        w_p = float(sps.wilcoxon(a, b).pvalue)
    except ValueError:
        w_p = None
    bonf = None if t_p is None else float(min(1.0, t_p * m))
    return PairedTests(t_p=t_p, wilcoxon_p=w_p, bonferroni_p=bonf, holm_p=bonf, d=d)


@dataclass(frozen=True)
class AssumptionReport:
    normality_pass_fraction: float
    levene_pass_fraction: float
    excluded_channels: int
    tested_channels: int


def assumption_checks(acts: ActivationRecord, alpha: float = 0.05) -> AssumptionReport:
    """Per-channel Shapiro-Wilk (pooled) and Levene (across classes) pass rates.

    Constant channels admit neither test and are excluded, with the count
    reported.
    """
    labels = np.asarray(acts.labels)
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 3:
        raise ConfigError("assumption checks need >= 3 samples per class")
    normal_pass, levene_pass, excluded, tested = 0, 0, 0, 0
    for name, table in acts.pooled.items():
        for c in range(table.shape[1]):
            col = np.asarray(table[:, c], dtype=np.float64)
            if np.all(col == col[0]):
                excluded += 1
                continue
            tested += 1
            if sps.shapiro(col).pvalue >= alpha:
                normal_pass += 1
            groups = [col[labels == k] for k in classes]
            if sps.levene(*groups).pvalue >= alpha:
                levene_pass += 1
    if tested == 0:
        raise ConfigError("every channel is constant; nothing to test")
    return AssumptionReport(
        normality_pass_fraction=normal_pass / tested,
        levene_pass_fraction=levene_pass / tested,
        excluded_channels=excluded,
        tested_channels=tested,
    )
