"""Monte-Carlo-dropout predictive statistics and calibration analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from .errors import ConfigError
from .network import Network, functional_forward, parameters

SIGMA_THRESHOLD = 0.15
DEFAULT_PASSES = 20


def mc_predict(
    net: Network,
    images,
    passes: int = DEFAULT_PASSES,
    seed: int = 0,
    threshold: float = SIGMA_THRESHOLD,
    params=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and population variance of softmax over stochastic forward passes.

    A prediction is flagged when the variance of its predicted class (the
    argmax of the mean) exceeds the threshold. Pass t draws its dropout masks
    from a generator seeded by (seed, t), so results are reproducible and
    independent of how the passes are scheduled.
    """
    if passes < 2:
        raise ConfigError("mc_predict needs at least 2 passes")
    params = parameters(net) if params is None else params
    x = torch.as_tensor(np.asarray(images), dtype=net.dtype)
    probs = []
    with torch.no_grad():
        for t in range(passes):
            gen = torch.Generator().manual_seed((seed * 1_000_003 + t) % (2**63))
            logits, _, _ = functional_forward(net, params, x, dropout_gen=gen)
            probs.append(F.softmax(logits, dim=1).numpy())
    # float64 keeps the mean of identical float32 passes exact, so a rate-0
    # network reports variance 0 rather than accumulator rounding noise
    stack = np.stack(probs).astype(np.float64)
    mu = stack.mean(axis=0)
    var = stack.var(axis=0)
    predicted = mu.argmax(axis=1)
    flagged = var[np.arange(len(predicted)), predicted] > threshold
    return mu, var, flagged


@dataclass(frozen=True)
class CalibrationReport:
    flag_rate: float
    flagged_error_rate: float | None
    unflagged_error_rate: float | None
    spearman_rho: float | None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "flag_rate": self.flag_rate,
            "flagged_error_rate": self.flagged_error_rate,
            "unflagged_error_rate": self.unflagged_error_rate,
            "spearman_rho": self.spearman_rho,
            "note": self.note,
        }


def calibration_report(
    sigma2: np.ndarray, errors: np.ndarray, flagged: np.ndarray
) -> CalibrationReport:
    """Flag rate, conditional error rates, and rank correlation of variance vs error.

    sigma2 holds the predicted-class variance per prediction, errors is 0/1
    (1 = wrong), flagged is the boolean flag decision. Spearman uses midranks
    for ties; it is undefined when either input is constant and is then
    reported as absent with a note.
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    errors = np.asarray(errors).astype(np.int64)
    flagged = np.asarray(flagged).astype(bool)
    n = sigma2.shape[0]
    if n < 100:
        raise ConfigError("calibration needs at least 100 predictions")
    if errors.shape != (n,) or flagged.shape != (n,):
        raise ConfigError("sigma2, errors, flagged must be aligned 1-d arrays")
    flag_rate = float(flagged.mean())
    flagged_err = float(errors[flagged].mean()) if flagged.any() else None
    unflagged_err = float(errors[~flagged].mean()) if (~flagged).any() else None
    note = ""
    if np.all(errors == errors[0]) or np.all(sigma2 == sigma2[0]):
        rho = None
        note = "spearman undefined: constant errors or variances"
    else:
        rho = float(spearmanr(sigma2, errors).statistic)
    return CalibrationReport(
        flag_rate=flag_rate,
        flagged_error_rate=flagged_err,
        unflagged_error_rate=unflagged_err,
        spearman_rho=rho,
        note=note,
    )
