"""Taxonomy distances, attribution, protection multipliers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunemeta import taxonomy as tx
from prunemeta.errors import ConfigError
from prunemeta.network import ActivationRecord


def toy_taxonomy():
    return tx.Taxonomy(
        classes={
            "fungal_rust": ("fungal", "rust", "fungal_rust"),
            "fungal_mildew": ("fungal", "mildew", "fungal_mildew"),
            "viral_mosaic": ("viral", "mosaic", "viral_mosaic"),
            "viral_mottle": ("viral", "mottle", "viral_mottle"),
        }
    )


def test_distance_rules():
    t = toy_taxonomy()
    assert tx.taxonomy_distance(t, "fungal_rust", "fungal_rust") == 0
    assert tx.taxonomy_distance(t, "fungal_rust", "fungal_mildew") == 1
    assert tx.taxonomy_distance(t, "fungal_rust", "viral_mosaic") == 2
    with pytest.raises(ConfigError):
        tx.taxonomy_distance(t, "fungal_rust", "bacterial_spot")


@settings(max_examples=30, deadline=None)
@given(
    i=st.sampled_from(["fungal_rust", "fungal_mildew", "viral_mosaic", "viral_mottle"]),
    j=st.sampled_from(["fungal_rust", "fungal_mildew", "viral_mosaic", "viral_mottle"]),
)
def test_distance_symmetric_and_bounded(i, j):
    t = toy_taxonomy()
    d = tx.taxonomy_distance(t, i, j)
    assert d == tx.taxonomy_distance(t, j, i)
    assert d in (0, 1, 2)
    if i == j:
        assert d == 0


def test_validation_rejects_broken_trees():
    with pytest.raises(ConfigError):
        tx.Taxonomy(
            classes={
                "a": ("fungal", "rust", "a"),
                "b": ("viral", "rust", "b"),  # medium label under two coarse labels
            }
        ).validate()
    with pytest.raises(ConfigError):
        tx.Taxonomy(
            classes={"a": ("fungal", "rust", "x"), "b": ("fungal", "mildew", "x")}
        ).validate()  # duplicate fine label


def deep_taxonomy():
    # "rust" carries two fine classes so the fine level strictly refines medium
    return tx.Taxonomy(
        classes={
            "rust_early": ("fungal", "rust", "rust_early"),
            "rust_late": ("fungal", "rust", "rust_late"),
            "mildew": ("fungal", "mildew", "mildew"),
            "mosaic": ("viral", "mosaic", "mosaic"),
        }
    )


def test_attribution_matches_brute_force():
    t = deep_taxonomy()
    names = ["rust_early", "rust_late", "mildew", "mosaic"]
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 8)
    n = len(labels)
    table = np.zeros((n, 3))
    table[:, 0] = np.where(labels < 3, 0.0, 10.0) + rng.normal(0, 0.1, n)
    table[:, 1] = np.where(labels == 0, 5.0, 0.0) + rng.normal(0, 0.1, n)
    table[:, 2] = rng.normal(0, 1.0, n)
    rec = ActivationRecord({"l": table}, {"l": np.arange(3)}, labels)
    attribution = tx.attribute_channels(t, rec, names)["l"]

    from prunemeta.scoring import fisher_discriminant

    want = []
    for c in range(3):
        best_level, best = None, -np.inf
        for level in tx.LEVELS:
            merged_names = [t.level_label(names[y], level) for y in labels]
            lut = {}
            merged = np.array([lut.setdefault(m, len(lut)) for m in merged_names])
            score = fisher_discriminant(
                ActivationRecord({"l": table}, {"l": np.arange(3)}, merged)
            )["l"][c]
            if score > best:
                best_level, best = level, score
        want.append(best_level)
    assert list(attribution) == want


def test_attribution_refinement_and_tie_semantics():
    t = deep_taxonomy()
    names = ["rust_early", "rust_late", "mildew", "mosaic"]
    rng = np.random.default_rng(1)

    # All four classes present: the fine partition strictly refines the
    # others, so its scatter ratio can only be higher and any channel with
    # class-dependent noise lands at the fine level.
    labels = np.repeat(np.arange(4), 8)
    table = np.where(labels[:, None] < 3, 0.0, 10.0) + rng.normal(0, 0.1, (32, 2))
    rec = ActivationRecord({"l": table}, {"l": np.arange(2)}, labels)
    assert list(tx.attribute_channels(t, rec, names)["l"]) == ["fine", "fine"]

    # One class per coarse group: every level induces the same 2-way split,
    # scores tie exactly, and the tie goes to the coarser (protective) level.
    labels = np.array([0, 0, 0, 3, 3, 3])
    table = np.where(labels[:, None] == 0, 0.0, 4.0) + rng.normal(0, 0.1, (6, 2))
    rec = ActivationRecord({"l": table}, {"l": np.arange(2)}, labels)
    assert list(tx.attribute_channels(t, rec, names)["l"]) == ["coarse", "coarse"]


def test_protection_factors_follow_policy():
    t = toy_taxonomy()
    attribution = {"l": np.array(["coarse", "medium", "fine", "fine"])}
    factors = tx.protection_factor(t, attribution)["l"]
    np.testing.assert_array_equal(factors, [2.0, 1.5, 1.0, 1.0])


def test_equal_scores_rank_by_protection():
    factors = np.array([2.0, 1.0])
    scores = np.array([0.4, 0.4])
    protected = scores * factors
    assert protected[0] > protected[1]


def test_unprotected_multipliers_keep_raw_ranking():
    rng = np.random.default_rng(4)
    scores = rng.random(10)
    ones = np.ones(10)
    assert list(np.argsort(scores * ones)) == list(np.argsort(scores))


def test_json_round_trip():
    t = toy_taxonomy()
    text = tx.taxonomy_to_json(t)
    back = tx.taxonomy_from_json(text)
    assert back.classes == t.classes
    assert tx.taxonomy_to_json(back) == text
