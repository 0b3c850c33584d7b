"""Channel selection under thresholds, protection, and a parameter budget.

Selection runs in two passes. The threshold pass retains channels whose
protected score clears the layer's adaptive threshold. The budget pass then
enforces the global retention target, measured in PARAMETERS: while the
retained parameter fraction exceeds the target, the lowest-scoring retained
channel (global order over protected scores, ties broken by lower layer index
then lower channel index) is dropped, skipping any drop that would empty a
layer. The achieved fraction therefore lands within one channel of the
target. If the threshold pass alone removes more than the budget asked for,
the overshoot stands; the budget pass only ever drops further.
"""

from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from .errors import ConfigError, PruneRefusal
from .network import (
    ChannelMask,
    Network,
    compose_masks,
    count_params,
    params_for_counts,
    repack_network,
)

log = logging.getLogger(__name__)

STAGE1_REMOVAL = 0.40


def _counts(net: Network, mask: ChannelMask) -> dict[str, int]:
    return {name: int(np.asarray(v, dtype=bool).sum()) for name, v in mask.items()}


def select_prune_set(
    net: Network,
    scores: Mapping[str, np.ndarray],
    thresholds: Mapping[str, float],
    retention: float,
    protection: Mapping[str, np.ndarray] | None = None,
) -> ChannelMask:
    """Threshold pass, then parameter-budget pass; returns the channel mask."""
    if not 0 < retention <= 1:
        raise ConfigError(f"retention target must be in (0, 1], got {retention}")
    conv = net.conv_layers()
    for l in conv:
        if l.name not in scores:
            raise ConfigError(f"scores missing layer {l.name!r}")
        if len(scores[l.name]) != l.out_channels:
            raise ConfigError(f"scores for {l.name!r} have wrong length")
        if thresholds.get(l.name, 0.0) < 0:
            raise ConfigError("thresholds must be non-negative")

    pscore: dict[str, np.ndarray] = {}
    for l in conv:
        s = np.asarray(scores[l.name], dtype=np.float64)
        if protection is not None and l.name in protection:
            s = s * np.asarray(protection[l.name], dtype=np.float64)
        pscore[l.name] = s

    mask: ChannelMask = {}
    for l in conv:
        keep = pscore[l.name] > thresholds.get(l.name, 0.0)
        if not keep.any():
            keep[int(np.argmax(pscore[l.name]))] = True  # one-channel floor
        mask[l.name] = keep

    total = count_params(net)
    target = retention * total
    floor = params_for_counts(net, {l.name: 1 for l in conv})
    if floor > target:
        minimal = floor / total
        raise PruneRefusal(
            f"retention {retention:.4f} is below the one-channel-per-layer floor; "
            f"minimal feasible retention is {minimal:.4f}",
            minimal_feasible_retention=minimal,
        )

    counts = _counts(net, mask)
    if params_for_counts(net, counts) > target:
        order = sorted(
            (
                (pscore[l.name][c], li, c, l.name)
                for li, l in enumerate(conv)
                for c in range(l.out_channels)
                if mask[l.name][c]
            ),
        )
        dropped_protected = 0
        for score, _, c, name in order:
            if params_for_counts(net, counts) <= target:
                break
            if counts[name] == 1:
                continue
            mask[name][c] = False
            counts[name] -= 1
            if protection is not None and name in protection and protection[name][c] > 1.0:
                dropped_protected += 1
        if dropped_protected:
            log.warning(
                "parameter budget dropped %d protected channels", dropped_protected
            )
    return mask


def stage_prune(
    net: Network,
    scores: Mapping[str, np.ndarray],
    stage: int,
    total_sparsity: float,
    thresholds: Mapping[str, float] | None = None,
    protection: Mapping[str, np.ndarray] | None = None,
    base_params: int | None = None,
    prior_mask: ChannelMask | None = None,
) -> tuple[Network, ChannelMask]:
    """One pruning stage; returns (repacked net, mask relative to the ORIGINAL).

    Stage 1 removes a fixed 0.40 parameter fraction of the network it is
    given. Stage 3 targets a cumulative sparsity `total_sparsity` relative to
    the original parameter count (base_params), so its live retention is
    (1 - s) * base_params / current params; pass prior_mask to get the
    cumulative mask back in original channel indices.
    """
    if stage not in (1, 3):
        raise ConfigError(f"stage must be 1 or 3, got {stage}")
    if thresholds is None:
        thresholds = {l.name: 0.0 for l in net.conv_layers()}
    if stage == 1:
        retention = 1.0 - STAGE1_REMOVAL
    else:
        if not STAGE1_REMOVAL < total_sparsity <= 0.95:
            raise ConfigError(
                f"stage-3 total sparsity must be in ({STAGE1_REMOVAL}, 0.95], "
                f"got {total_sparsity}"
            )
        base = base_params if base_params is not None else count_params(net)
        retention = min(1.0, (1.0 - total_sparsity) * base / count_params(net))
    mask = select_prune_set(net, scores, thresholds, retention, protection)
    packed = repack_network(net, mask)
    cumulative = compose_masks(prior_mask, mask) if prior_mask is not None else mask
    return packed, cumulative


def retention_table(net: Network, mask: ChannelMask) -> list[dict]:
    """Per-layer retention summary for dry-run printing."""
    rows = []
    for l in net.conv_layers():
        kept = int(np.asarray(mask[l.name], dtype=bool).sum())
        rows.append(
            dict(
                layer=l.name,
                channels=l.out_channels,
                retained=kept,
                fraction=round(kept / l.out_channels, 4),
            )
        )
    return rows
