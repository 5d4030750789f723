import dataclasses
import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from dropcaps.errors import InputError, ProtocolError
from dropcaps.augment import generate_masks
from dropcaps.dsp import WindowSample
from dropcaps.evaluation import AccuracyDistribution, evaluate_under_dropout, held_out_masks, significance_row
from dropcaps.stats import SignificanceCell, bonferroni, mann_whitney_u, significance_marker


def enumeration_p(a, b):
    """Two-sided p by listing every assignment of the pooled ranks to sample a."""
    n, m = len(a), len(b)
    pooled = sorted(list(a) + list(b))
    rank = {v: i + 1 for i, v in enumerate(pooled)}
    mu = Fraction(n * m, 2)
    observed = abs(sum(rank[v] for v in a) - Fraction(n * (n + 1), 2) - mu)
    hits = total = 0
    for combo in itertools.combinations(range(1, n + m + 1), n):
        u = sum(combo) - Fraction(n * (n + 1), 2)
        total += 1
        hits += abs(u - mu) >= observed
    return hits / total


def test_textbook_exact_case():
    r = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert r.method == "exact"
    assert r.u_a == 0 and r.u_b == 9
    assert r.p_value == pytest.approx(0.1, abs=1e-15)


def test_exact_matches_enumeration_for_all_small_sizes():
    rng = np.random.default_rng(0)
    for n in range(1, 12):
        for m in range(1, 13 - n):
            for _ in range(3):
                vals = rng.permutation(n + m) + rng.random()
                a, b = vals[:n], vals[n:]
                assert abs(mann_whitney_u(a, b).p_value - enumeration_p(a, b)) < 1e-12, (n, m)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=1, max_size=10, unique=True).flatmap(
    lambda xs: st.tuples(st.just(xs), st.integers(1, len(xs)))))
def test_exact_property_against_enumeration(data):
    values, split = data
    if len(values) < 2:
        return
    split = min(split, len(values) - 1)
    a, b = values[:split], values[split:]
    assert abs(mann_whitney_u(a, b).p_value - enumeration_p(a, b)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20),
       st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20))
def test_u_symmetry(a, b):
    r = mann_whitney_u(a, b)
    assert r.u_a + r.u_b == pytest.approx(len(a) * len(b))
    assert 0.0 <= r.p_value <= 1.0
    assert mann_whitney_u(b, a).p_value == pytest.approx(r.p_value, abs=1e-12)


def test_normal_approximation_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.integers(0, 6, size=rng.integers(5, 30))
        b = rng.integers(0, 6, size=rng.integers(5, 30)) + 1
        ours = mann_whitney_u(a, b).p_value
        ref = scipy.stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic",
                                       use_continuity=True).pvalue
        assert ours == pytest.approx(ref, rel=1e-9, abs=1e-15)


def test_exact_matches_scipy_exact():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.normal(size=7), rng.normal(size=8)
        ref = scipy.stats.mannwhitneyu(a, b, alternative="two-sided", method="exact").pvalue
        assert mann_whitney_u(a, b).p_value == pytest.approx(ref, rel=1e-12)


def test_identical_samples_give_one():
    assert mann_whitney_u([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]).p_value == pytest.approx(1.0)
    assert mann_whitney_u([0.3] * 4, [0.3] * 9).p_value == 1.0


def test_large_disjoint_samples_are_highly_significant():
    r = mann_whitney_u(np.arange(30) + 100.0, np.arange(30))
    assert r.method == "normal"
    assert r.p_value <= 1e-4
    assert SignificanceCell.from_p(r.p_value, 4).marker == "****"


def test_approximation_close_to_exact_at_boundary_size():
    a, b = np.arange(8) + 0.5, np.arange(8) * 1.7
    exact = mann_whitney_u(a, b, method="exact").p_value
    approx = mann_whitney_u(a, b, method="normal").p_value
    assert abs(exact - approx) < 0.02


def test_empty_sample_rejected():
    with pytest.raises(InputError):
        mann_whitney_u([], [1.0])


def test_bonferroni():
    assert bonferroni(0.01, 4) == pytest.approx(0.04)
    assert bonferroni(0.5, 4) == 1.0
    np.testing.assert_allclose(bonferroni([0.001, 0.3]), [0.002, 0.6])


@pytest.mark.parametrize("p,marker", [
    (1.0, "ns"), (0.0500001, "ns"), (0.05, "*"), (0.0100001, "*"), (0.01, "**"),
    (0.001, "***"), (0.0010001, "**"), (0.0001, "****"), (0.00010001, "***"), (0.0, "****"),
])
def test_marker_bands_closed_on_significant_side(p, marker):
    assert significance_marker(p) == marker


def test_bonferroni_boundary_resolves_to_star():
    assert SignificanceCell.from_p(0.0125, 4).marker == "*"


# -- evaluation --------------------------------------------------------------------

def windows(n_per_subject=20, subjects=("s01", "s02"), fill=None, n_classes=4):
    out = []
    rng = np.random.default_rng(0)
    for s in subjects:
        for i in range(n_per_subject):
            label = i % n_classes
            t = np.full((2, 4, 6, 6), label + 1.0) if fill is None else rng.random((2, 4, 6, 6))
            out.append(WindowSample(t.astype(np.float32), label, s, 2))
    return out


class ConstantModel:
    def predict(self, x, batch_size=256):
        return np.zeros(len(x), dtype=int)


class MaxReader:
    """Reads the label from the largest value; insensitive to zeroed channels."""

    def predict(self, x, batch_size=256):
        return np.rint(x.reshape(len(x), -1).max(axis=1)).astype(int) - 1


def test_rate_zero_gives_one_value_per_subject():
    d = evaluate_under_dropout(MaxReader(), windows(), 0.0)
    assert d.units == ("s01", "s02") and d.values == (1.0, 1.0)


def test_masked_distribution_counts():
    d = evaluate_under_dropout(MaxReader(), windows(), 0.5, n_masks=30, seed=3)
    assert len(d.values) == 2 * 30
    assert len(set(d.mask_seeds)) == 30


def test_invariant_model_constant_across_rates():
    for rate in (0.0, 0.1, 0.25, 0.5, 0.75):
        assert evaluate_under_dropout(MaxReader(), windows(), rate, n_masks=5).mean == 1.0


def test_constant_model_sits_at_chance():
    for rate in (0.0, 0.5):
        assert evaluate_under_dropout(ConstantModel(), windows(), rate, n_masks=3).mean == pytest.approx(0.25)


def test_test_masks_distinct_from_training():
    train = generate_masks(0.5, 6, 0, "train")
    test = held_out_masks(0.5, 30, 0, train)
    keys = {m.key() for m in train}
    assert len({m.key() for m in test}) == 30
    assert not keys & {m.key() for m in test}


def test_seed_collision_is_protocol_error():
    seeds = [m.seed for m in held_out_masks(0.5, 3, 7)]
    planted = dataclasses.replace(generate_masks(0.5, 1, 7, "train")[0], seed=seeds[1])
    with pytest.raises(ProtocolError):
        held_out_masks(0.5, 3, 7, [planted])


def test_evaluation_is_deterministic():
    a = evaluate_under_dropout(MaxReader(), windows(fill="r"), 0.25, n_masks=4, seed=9)
    b = evaluate_under_dropout(MaxReader(), windows(fill="r"), 0.25, n_masks=4, seed=9)
    assert a == b


def test_significance_row():
    clean = AccuracyDistribution("m", "x", 0.0, [0.9, 0.92], ["s01", "s02"])
    drop = AccuracyDistribution("m", "x", 0.5, [0.1] * 60, ["u"] * 60)
    same = AccuracyDistribution("m", "x", 0.1, [0.9, 0.92] * 30, ["u"] * 60)
    row = significance_row(clean, [same, drop])
    assert row[0.1].marker == "ns"
    assert row[0.5].p_raw < row[0.1].p_raw
    assert math.isclose(row[0.5].p_corrected, min(1.0, 2 * row[0.5].p_raw))


def test_distribution_rejects_bad_values():
    with pytest.raises(InputError):
        AccuracyDistribution("m", "x", 0.0, [1.5], ["s01"])
    with pytest.raises(InputError):
        AccuracyDistribution("m", "x", 0.0, [], [])
