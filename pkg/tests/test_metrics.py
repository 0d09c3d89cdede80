from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.metrics import average_precision_score

from sensorfusion import gradcheck as gc
from sensorfusion.errors import ConfigurationError, DegenerateTestError, LabelError, MetricError
from sensorfusion.metrics import (aupr, baseline_aupr, betainc, evaluate, paired_ttest, pr_curve,
                                  student_t_sf, welch_ttest)
from sensorfusion.netgraph import Topology, assemble
from sensorfusion.sigproc import EpochSet

PUBLISHED_BFM_SC = [0.74, 0.68, 0.75, 0.57, 0.58]
PUBLISHED_BFM = [0.67, 0.66, 0.69, 0.53, 0.45]


def brute_force_aupr(scores, labels):
    """Walk every distinct threshold, counting predictions directly, in exact arithmetic."""
    n_pos = sum(labels)
    total, prev_recall = Fraction(0), Fraction(0)
    for thr in sorted(set(scores), reverse=True):
        pred = [s >= thr for s in scores]
        tp = sum(1 for p, y in zip(pred, labels) if p and y)
        recall = Fraction(tp, n_pos)
        total += (recall - prev_recall) * Fraction(tp, sum(pred))
        prev_recall = recall
    return total


# ---------------------------------------------------------------- AUPR

def test_aupr_examples():
    assert aupr([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert aupr([0.1, 0.8, 0.9], [1, 0, 0]) == pytest.approx(1 / 3, abs=1e-15)


def test_aupr_ties_form_one_threshold():
    assert aupr([0.5] * 4, [1, 0, 0, 1]) == 0.5
    assert aupr([0.9, 0.5, 0.5], [0, 1, 0]) == pytest.approx(1 / 3)


def test_aupr_errors():
    with pytest.raises(MetricError):
        aupr([0.1, 0.2], [0, 0])
    with pytest.raises(MetricError):
        aupr([np.nan, 0.2], [1, 0])
    with pytest.raises(LabelError):
        aupr([0.1, 0.2], [1, 2])
    with pytest.raises(MetricError):
        aupr([0.1], [1, 0])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 20).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_aupr_matches_exact_oracle(case):
    scores, labels = case
    if not any(labels):
        labels[0] = 1
    exact = brute_force_aupr(scores, labels)
    assert abs(aupr(np.array(scores) / 5.0, labels) - float(exact)) <= 1e-12


def test_aupr_matches_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(50):
        y = rng.integers(0, 2, 200)
        y[0] = 1
        s = np.round(rng.random(200), 2)  # plenty of ties
        assert aupr(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_aupr_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 30)
    y[0] = 1
    s = rng.integers(0, 10, 30).astype(float)
    assert aupr(s, y) == aupr(np.exp(3 * s) + 7, y) == aupr(s ** 3, y)


def test_pr_curve_invariants():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 100)
    c = pr_curve(np.round(rng.random(100), 1), y)
    assert np.all(np.diff(c.thresholds) < 0)
    assert np.all(np.diff(c.recall) >= 0)  # recall grows as the threshold falls
    assert c.recall[-1] == 1.0 and c.precision[-1] == pytest.approx(y.mean())
    lines = c.to_csv().splitlines()
    assert lines[0] == "threshold,precision,recall" and len(lines) == len(c.thresholds) + 1


def test_baseline_examples():
    assert baseline_aupr([1, 0, 0, 1]) == 0.5
    assert baseline_aupr([1, 1, 1]) == 1.0
    with pytest.raises(MetricError):
        baseline_aupr([])


@pytest.mark.parametrize("prevalence", [0.36, 0.42, 0.31, 0.29])
def test_random_scores_reach_prevalence(prevalence):
    rng = np.random.default_rng(int(prevalence * 100))
    y = (rng.random(100_000) < prevalence).astype(int)
    assert abs(aupr(rng.random(100_000), y) - prevalence) <= 0.02
    assert abs(baseline_aupr(y) - prevalence) <= 0.01


# ---------------------------------------------------------------- t-tests

def test_paired_published_scores():
    r = paired_ttest(PUBLISHED_BFM_SC, PUBLISHED_BFM)
    ref = stats.ttest_rel(PUBLISHED_BFM_SC, PUBLISHED_BFM)
    assert r.t == pytest.approx(3.44066131565101, abs=1e-10) and r.df == 4
    assert r.p_two_sided == pytest.approx(ref.pvalue, abs=1e-10)
    assert r.p_one_sided < 0.05 and r.kind == "paired"


def test_paired_degenerate():
    b = np.array([0.3, 0.5, 0.1, 0.9, 0.2])
    with pytest.raises(DegenerateTestError):
        paired_ttest(b + 1, b)
    with pytest.raises(MetricError):
        paired_ttest([1.0], [2.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_paired_antisymmetry_and_shift(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.random(6), rng.random(6)
    assert paired_ttest(b, a).t == -paired_ttest(a, b).t
    assert paired_ttest(a + c, b + c).t == pytest.approx(paired_ttest(a, b).t, rel=1e-6)


def test_welch_reference_values():
    # frozen from scipy.stats.ttest_ind(equal_var=False)
    r = welch_ttest([1, 2, 3, 4, 5], [2, 4, 6, 8, 10])
    assert r.t == pytest.approx(-1.8973665961010275, abs=1e-10)
    assert r.df == pytest.approx(5.882352941176471, abs=1e-10)
    assert r.p_two_sided == pytest.approx(0.10753119493062718, abs=1e-10)


def test_welch_identical_and_equal_variance():
    r = welch_ttest([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
    assert r.t == 0 and r.p_two_sided == 1.0
    r = welch_ttest([1.0, 2.0, 3.0, 4.0], [11.0, 12.0, 13.0, 14.0])
    assert r.df == pytest.approx(6.0, abs=1e-12)
    with pytest.raises(DegenerateTestError):
        welch_ttest([1.0, 1.0], [2.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_welch_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=rng.integers(2, 9)), rng.normal(2, 3, size=rng.integers(2, 9))
    r, ref = welch_ttest(a, b), stats.ttest_ind(a, b, equal_var=False)
    assert r.t == pytest.approx(ref.statistic, rel=1e-10)
    assert r.p_two_sided == pytest.approx(ref.pvalue, abs=1e-10)
    assert 0 <= r.p_one_sided <= 1
    assert r.p_two_sided == pytest.approx(2 * min(r.p_one_sided, 1 - r.p_one_sided))


def test_t_sf_examples():
    assert student_t_sf(0.0, 3.7) == 0.5
    assert student_t_sf(2.776, 4) == pytest.approx(0.025, abs=1e-4)
    assert student_t_sf(1.96, 1e6) == pytest.approx(0.025, abs=1e-4)
    with pytest.raises(MetricError):
        student_t_sf(1.0, 0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-50, 50), st.floats(0.5, 1e5))
def test_t_sf_against_scipy(t, df):
    assert abs(student_t_sf(t, df) - stats.t.sf(t, df)) < 1e-10
    assert student_t_sf(t, df) + student_t_sf(-t, df) == pytest.approx(1.0, abs=1e-12)


def test_t_sf_monotone():
    vals = [student_t_sf(t, 7) for t in np.linspace(-10, 10, 201)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_betainc_against_scipy():
    from scipy.special import betainc as ref
    for a, b, x in [(0.5, 0.5, 0.3), (2, 3, 0.9), (50, 0.5, 0.99), (1e4, 0.5, 0.9999)]:
        assert betainc(a, b, x) == pytest.approx(ref(a, b, x), abs=1e-12)


# ---------------------------------------------------------------- evaluate

class _Constant:
    def __init__(self, model, value=0.5):
        self.m, self.value = model, value
        self.channels, self.topology, self.kind = model.channels, model.topology, model.kind

    def predict(self, x, batch_size=512, heads=False):
        f = np.full(len(x), self.value)
        return (f, np.empty((len(x), 0))) if heads else f


def _epochs(labels, channels=("abdores", "thorres", "hr", "sao2"), signal=False, seed=0):
    y = np.asarray(labels, dtype=np.int8)
    x = np.random.default_rng(seed).normal(size=(len(y), 150, len(channels)))
    if signal:
        x += 5 * y[:, None, None]
    return EpochSet(x, y, np.array(["p"] * len(y), dtype=object), np.arange(len(y)), tuple(channels))


def test_evaluate_constant_model_gives_prevalence():
    m = _Constant(assemble(Topology.parse("MIM"), "CNN", gc.TINY_ARCH, 0))
    data = _epochs(np.arange(40) % 5 == 0)
    rep = evaluate(m, data)
    assert rep.aupr == rep.baseline_aupr == rep.prevalence == 0.2
    assert len(rep.curve.thresholds) == 1


def test_evaluate_bfm_sc_reports_every_head():
    m = assemble(Topology.parse("BFM_SC"), "LSTM", gc.TINY_ARCH, 0)
    rep = evaluate(m, _epochs(np.arange(12) % 2))
    assert len(rep.branch_aupr) + 1 == 5
    assert set(rep.branch_aupr) == set(m.channels)
    assert rep.n_windows == 12 and rep.n_pos == 6
    assert '"branch_aupr"' in rep.to_json()


def test_evaluate_perfect_separation():
    m = assemble(Topology.parse("SIM-abdores"), "CNN", gc.TINY_ARCH, 0)
    sep = _Constant(m)
    data = _epochs(np.arange(10) % 2, ("abdores",), signal=True)
    sep.predict = lambda x, batch_size=512, heads=False: (
        (x.mean(axis=(1, 2)), np.empty((len(x), 0))) if heads else x.mean(axis=(1, 2)))
    assert evaluate(sep, data).aupr == 1.0


def test_evaluate_channel_mismatch():
    m = assemble(Topology.parse("BFM"), "CNN", gc.TINY_ARCH, 0)
    with pytest.raises(ConfigurationError):
        evaluate(m, _epochs([0, 1], ("abdores",)))
