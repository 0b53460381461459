import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dualvqa.datagen import Record
from dualvqa.evaluation import (
    DEFAULT_DIFFS,
    EvalReport,
    MetricError,
    build_diff_pairs,
    evaluate_scores,
    flip_rate,
    plcc,
    rankdata,
    srcc,
)


def _ladder(source="s", levels=20, mos=4.0):
    return [
        Record(f"{source}/{s}", source, "BLOCK_QUANT", s, levels, mos - s / levels * (mos - 1), s == 0, "")
        for s in range(levels + 1)
    ]


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(sum((a - mx) ** 2 for a in x)) * math.sqrt(sum((b - my) ** 2 for b in y))
    return num / den


def brute_ranks(x):
    return [sum(v < a for v in x) + (sum(v == a for v in x) + 1) / 2 for a in x]


def test_srcc_examples():
    gt = [1, 2, 3, 4, 5]
    assert srcc([1, 2, 3, 4, 5], gt) == pytest.approx(1.0, abs=1e-12)
    assert srcc([-1, -2, -3, -4, -5], gt) == pytest.approx(-1.0, abs=1e-12)
    assert abs(srcc([1, 2, 3, 5, 4], gt) - 0.9) <= 1e-12


def test_plcc_examples():
    gt = np.array([1.0, 2.0, 3.0])
    assert plcc(2 * gt + 1, gt) == pytest.approx(1.0, abs=1e-12)
    assert plcc([1, 2, 4], gt) == pytest.approx(0.982, abs=5e-4)


def test_metric_errors():
    with pytest.raises(MetricError):
        srcc([1.0], [1.0])
    with pytest.raises(MetricError):
        srcc([1, 2], [1, 2, 3])
    with pytest.raises(MetricError):
        plcc([2, 2, 2], [1, 2, 3])


def test_ranks_average_ties():
    assert rankdata(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


@settings(max_examples=60)
@given(st.integers(2, 30), st.integers(0, 10_000))
def test_against_brute_force_and_scipy(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 6, n).astype(float) if seed % 2 else rng.standard_normal(n)
    y = rng.standard_normal(n)
    if np.ptp(x) == 0:
        return
    assert rankdata(x).tolist() == brute_ranks(list(x))
    assert abs(srcc(x, y) - brute_pearson(brute_ranks(list(x)), brute_ranks(list(y)))) <= 1e-12
    assert abs(srcc(x, y) - stats.spearmanr(x, y)[0]) <= 1e-12
    assert abs(plcc(x, y) - brute_pearson(list(x), list(y))) <= 1e-12


@given(st.lists(st.integers(-100, 100), min_size=3, max_size=20, unique=True), st.randoms())
def test_srcc_invariant_to_monotone_transform(xs, rnd):
    gt = list(range(len(xs)))
    rnd.shuffle(gt)
    a = srcc(xs, gt)
    b = srcc([math.atan(x / 10) * 3 + 1 for x in xs], gt)
    assert a == pytest.approx(b, abs=1e-12)


def test_flip_rate_examples():
    assert flip_rate([(1.0, 1.0)] * 5) == 1.0
    pairs = [(2.0, 1.0)] * 21 + [(1.0, 2.0)] * 3
    assert flip_rate(pairs) == 0.125
    with pytest.raises(MetricError):
        flip_rate([])


def test_flip_rate_without_tie_convention():
    assert flip_rate([(2, 1), (1, 1), (1, 2)], ties_as_flips=False) == 0.5
    with pytest.raises(MetricError):
        flip_rate([(1, 1)], ties_as_flips=False)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)).filter(lambda p: p[0] != p[1]), min_size=1, max_size=30))
def test_flip_rate_reversal(pairs):
    fr = flip_rate(pairs)
    assert 0.0 <= fr <= 1.0
    assert flip_rate([(b, a) for a, b in pairs]) == pytest.approx(1 - fr)


def test_diff_pair_counts():
    recs = _ladder()
    assert len(build_diff_pairs(recs, [20])[20]) == 1
    (a, b), = build_diff_pairs(recs, [20])[20]
    assert (a.severity, b.severity) == (0, 20)
    assert len(build_diff_pairs(recs, [2])[2]) == 19
    two = _ladder("a") + _ladder("b")
    assert len(build_diff_pairs(two, [2])[2]) == 38


def test_empty_bucket_warns(caplog):
    assert build_diff_pairs(_ladder(levels=4), [10])[10] == []
    assert "no pairs" in caplog.text


@pytest.mark.parametrize("levels", [1, 2, 5, 13, 21])
def test_flip_rate_matches_enumeration(levels):
    rng = np.random.default_rng(levels)
    recs = _ladder(levels=levels)
    scores = rng.integers(0, 4, len(recs)).astype(float)
    rep = evaluate_scores(recs, scores, diffs=range(1, levels + 1))
    for d in range(1, levels + 1):
        pairs = [(i, j) for i, j in itertools.combinations(range(levels + 1), 2) if j - i == d]
        flips = sum(scores[i] <= scores[j] for i, j in pairs)
        assert rep.fr_by_diff[d] == flips / len(pairs)


def test_oracle_anti_oracle_and_constant():
    recs = _ladder("a") + _ladder("b", mos=3.0)
    gt = np.array([r.mos for r in recs])
    good = evaluate_scores(recs, gt)
    assert good.srcc == pytest.approx(1.0) and all(v == 0.0 for v in good.fr_by_diff.values())
    bad = evaluate_scores(recs, -gt)
    assert bad.srcc == pytest.approx(-1.0) and all(v == 1.0 for v in bad.fr_by_diff.values())
    flat = evaluate_scores(recs, np.ones(len(recs)))
    assert flat.srcc is None and all(v == 1.0 for v in flat.fr_by_diff.values())
    assert any(e.startswith("srcc") for e in flat.errors)


def test_noisy_monotone_fr_falls_with_diff():
    recs = [r for s in "abcdefgh" for r in _ladder(s)]
    rng = np.random.default_rng(0)
    scores = np.array([r.mos for r in recs]) + rng.normal(0, 0.3, len(recs))
    fr = evaluate_scores(recs, scores).fr_by_diff
    vals = [fr[d] for d in DEFAULT_DIFFS]
    assert vals[0] > vals[-1] == 0.0
    assert all(b <= a + 0.02 for a, b in zip(vals, vals[1:]))


def test_report_render_round_trip():
    recs = _ladder()
    rep = evaluate_scores(recs, [r.mos for r in recs], dataset_id="x")
    text = rep.render()
    for key in ("dataset_id", "srcc", "plcc", "n_items", "n_pairs") + tuple(f"fr_diff_{d}" for d in DEFAULT_DIFFS):
        assert f"{key}:" in text
    back = EvalReport.parse(text)
    assert back == rep
    assert rep.n_items == 21 and rep.n_pairs == sum(21 - d for d in DEFAULT_DIFFS)
