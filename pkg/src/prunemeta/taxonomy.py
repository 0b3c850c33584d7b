"""Three-level disease hierarchy: distances and channel protection.

Every class carries (coarse, medium, fine) labels, e.g. pathogen type,
symptom type, disease identity. The discrete distance between classes is
0 (same fine label), 1 (different fine label, same coarse label), or 2.
Channels are attributed to the hierarchy level whose merged-class Fisher
score is highest, and coarse/medium-attributed channels get their combined
importance multiplied by a protection factor before any pruning decision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .network import ActivationRecord
from .scoring import fisher_discriminant

LEVELS = ("coarse", "medium", "fine")

POLICY_MULTIPLIER = {"full": 2.0, "partial": 1.5, "none": 1.0}

DEFAULT_POLICY = {"coarse": "full", "medium": "partial", "fine": "none"}


@dataclass(frozen=True)
class Taxonomy:
    """classes maps class id to its (coarse, medium, fine) labels."""

    classes: dict[str, tuple[str, str, str]]
    policy: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_POLICY))

    def validate(self) -> None:
        medium_to_coarse: dict[str, str] = {}
        fines = set()
        for cid, labels in self.classes.items():
            if len(labels) != 3 or any(not l for l in labels):
                raise ConfigError(f"class {cid!r} must carry coarse/medium/fine labels")
            coarse, medium, fine = labels
            if medium in medium_to_coarse and medium_to_coarse[medium] != coarse:
                raise ConfigError(
                    f"medium label {medium!r} maps to both "
                    f"{medium_to_coarse[medium]!r} and {coarse!r}"
                )
            medium_to_coarse[medium] = coarse
            if fine in fines:
                raise ConfigError(f"fine label {fine!r} is not unique")
            fines.add(fine)
        for level, pol in self.policy.items():
            if level not in LEVELS or pol not in POLICY_MULTIPLIER:
                raise ConfigError(f"bad protection policy {level!r}: {pol!r}")

    def level_label(self, class_id: str, level: str) -> str:
        if class_id not in self.classes:
            raise ConfigError(f"unknown class {class_id!r}")
        return self.classes[class_id][LEVELS.index(level)]

    def multiplier(self, level: str) -> float:
        return POLICY_MULTIPLIER[self.policy.get(level, "none")]


def taxonomy_distance(tax: Taxonomy, class_i: str, class_j: str) -> int:
    """0 same fine class, 1 same coarse label, 2 otherwise."""
    for cid in (class_i, class_j):
        if cid not in tax.classes:
            raise ConfigError(f"unknown class {cid!r}")
    ci, cj = tax.classes[class_i], tax.classes[class_j]
    if ci[2] == cj[2]:
        return 0
    if ci[0] == cj[0]:
        return 1
    return 2


def attribute_channels(
    tax: Taxonomy,
    acts: ActivationRecord,
    class_names: list[str],
) -> dict[str, np.ndarray]:
    """Assign each channel the level where its Fisher separation is strongest.

    Class labels in the record are merged per level before scoring; a level
    with fewer than 2 distinct merged groups cannot win. Merged groups are
    numbered by first occurrence so two levels inducing the same partition
    score bitwise identically, and exact ties then go to the coarser level,
    which is the protective choice. Because refining a partition never lowers
    the scatter ratio, coarse attribution happens exactly on such ties (for
    example when the record contains one class per coarse group).
    """
    labels = np.asarray(acts.labels)
    level_scores: dict[str, dict[str, np.ndarray]] = {}
    for level in LEVELS:
        merged_names = [tax.level_label(class_names[int(y)], level) for y in labels]
        lut: dict[str, int] = {}
        merged_ids = np.array([lut.setdefault(n, len(lut)) for n in merged_names])
        if len(lut) < 2:
            level_scores[level] = {
                name: np.full(t.shape[1], -np.inf) for name, t in acts.pooled.items()
            }
            continue
        merged = ActivationRecord(
            pooled=acts.pooled,
            channels=acts.channels,
            labels=merged_ids,
        )
        level_scores[level] = fisher_discriminant(merged)
    out: dict[str, np.ndarray] = {}
    for name in acts.pooled:
        stacked = np.vstack([level_scores[level][name] for level in LEVELS])
        winners = np.argmax(stacked, axis=0)  # first max wins: coarse-first tie-break
        out[name] = np.array([LEVELS[w] for w in winners])
    return out


def protection_factor(
    tax: Taxonomy,
    attribution: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Per-channel multiplier from the attributed level's protection policy."""
    return {
        name: np.array([tax.multiplier(level) for level in levels], dtype=np.float64)
        for name, levels in attribution.items()
    }


def taxonomy_to_json(tax: Taxonomy) -> str:
    payload = {cid: list(labels) for cid, labels in tax.classes.items()}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def taxonomy_from_json(text: str, policy: Mapping[str, str] | None = None) -> Taxonomy:
    payload = json.loads(text)
    tax = Taxonomy(
        classes={cid: tuple(labels) for cid, labels in payload.items()},
        policy=dict(policy) if policy else dict(DEFAULT_POLICY),
    )
    tax.validate()
    return tax
