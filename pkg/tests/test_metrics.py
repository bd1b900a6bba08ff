import itertools

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import gammaln

from groupprompt.data import NucleusInstance as N
from groupprompt.errors import ParameterError, StatisticsError
from groupprompt.metrics import (Counts, EvalReport, ImageMatch, evaluate, f_score, f_scores,
                                 match_detections, welch_t_test)


def t_pdf(x, df):
    logc = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi)
    return np.exp(logc - (df + 1) / 2 * np.log1p(x * x / df))


def p_oracle(a, b):
    """Welch statistic by hand, two-sided tail mass by quadrature of the t density."""
    a, b = np.asarray(a), np.asarray(b)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    t = (a.mean() - b.mean()) / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    centre, _ = quad(t_pdf, 0.0, abs(t), args=(df,), epsabs=1e-13, epsrel=1e-13)
    return 1.0 - 2.0 * centre, t, df


def random_points(rng, n, c=3):
    return [N(float(x), float(y), int(k)) for x, y, k in
            zip(rng.uniform(0, 40, n), rng.uniform(0, 40, n), rng.integers(1, c + 1, n))]


def brute_matches(preds, gts, r):
    """Largest number of within-radius pairs by exhaustive search."""
    for k in range(min(len(preds), len(gts)), 0, -1):
        for ps in itertools.permutations(range(len(preds)), k):
            for gs in itertools.combinations(range(len(gts)), k):
                if all(np.hypot(preds[p].x - gts[g].x, preds[p].y - gts[g].y) <= r for p, g in zip(ps, gs)):
                    return k
    return 0


class TestMatching:
    def test_within_radius(self):
        m = match_detections([N(10, 10, 1)], [N(10, 14, 1)], 6.0)
        assert m.pairs == [(0, 0)] and not m.false_positives and not m.false_negatives

    def test_outside_radius(self):
        m = match_detections([N(10, 10, 1)], [N(10, 14, 1)], 3.0)
        assert m.pairs == [] and m.false_positives == [0] and m.false_negatives == [0]

    def test_two_preds_one_gt(self):
        m = match_detections([N(10, 11, 1), N(10, 9.5, 1)], [N(10, 10, 1)], 3.0)
        assert m.pairs == [(1, 0)] and m.false_positives == [0]

    def test_maximises_matches_not_nearest(self):
        # greedy nearest would pair p0 with g1 and leave g0 unmatched
        preds = [N(5.0, 0, 1), N(9.0, 0, 1)]
        gts = [N(2.0, 0, 1), N(6.0, 0, 1)]
        assert len(match_detections(preds, gts, 3.5).pairs) == 2

    def test_bad_radius(self):
        with pytest.raises(ParameterError):
            match_detections([], [], 0.0)

    @given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 10_000))
    def test_match_count_is_maximal(self, n, m, seed):
        rng = np.random.default_rng(seed)
        preds = [N(float(x), float(y), 1) for x, y in rng.uniform(0, 12, (n, 2))]
        gts = [N(float(x), float(y), 1) for x, y in rng.uniform(0, 12, (m, 2))]
        assert len(match_detections(preds, gts, 4.0).pairs) == brute_matches(preds, gts, 4.0)

    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        preds, gts = random_points(rng, rng.integers(0, 8)), random_points(rng, rng.integers(0, 8))
        a = match_detections(preds, gts, 6.0)
        b = match_detections(gts, preds, 6.0)
        assert len(a.pairs) == len(b.pairs)
        assert len(a.false_positives) == len(b.false_negatives)
        assert len(a.false_negatives) == len(b.false_positives)


class TestFScores:
    def test_formula(self):
        assert f_score(2, 1, 1) == pytest.approx(2 / 3)
        assert f_score(0, 0, 0) == 0.0

    def test_counts_example(self):
        m = ImageMatch([(0, 0), (1, 1)], [2], [2], [1, 1, 1], [1, 1, 1])
        rep = f_scores([m], 1)
        assert rep.f_d == pytest.approx(2 / 3)
        assert rep.detection == Counts(2, 1, 1)

    def test_zero_predictions(self):
        rep = evaluate([[]], [[N(1, 1, 1), N(5, 5, 2)]], 3.0, 2)
        assert rep.f_d == 0.0 and rep.detection.fn == 2 and rep.mean_f_c == 0.0

    def test_class_disagreement(self):
        rep = evaluate([[N(1, 1, 2)]], [[N(1, 1, 1)]], 3.0, 2)
        assert rep.f_d == 1.0
        assert rep.per_class[0] == Counts(0, 0, 1) and rep.per_class[1] == Counts(0, 1, 0)

    def test_dataset_level_aggregation(self):
        preds = [[N(1, 1, 1)], [N(1, 1, 1), N(20, 20, 1)]]
        gts = [[N(1, 1, 1)], [N(1, 1, 1)]]
        rep = evaluate(preds, gts, 3.0, 1)
        assert rep.f_d == pytest.approx(f_score(2, 1, 0))
        assert rep.per_image_f_d == [1.0, pytest.approx(2 / 3)]

    @given(st.integers(0, 10_000))
    def test_random_counts_match_hand_formula(self, seed):
        rng = np.random.default_rng(seed)
        c = 3
        preds = [random_points(rng, rng.integers(0, 10), c) for _ in range(3)]
        gts = [random_points(rng, rng.integers(0, 10), c) for _ in range(3)]
        rep = evaluate(preds, gts, 5.0, c)
        matches = [match_detections(p, g, 5.0) for p, g in zip(preds, gts)]
        tp = sum(len(m.pairs) for m in matches)
        fp = sum(len(p) for p in preds) - tp
        fn = sum(len(g) for g in gts) - tp
        assert rep.f_d == pytest.approx(2 * tp / max(2 * tp + fp + fn, 1))
        for k in range(1, c + 1):
            hit = sum(1 for m, p, g in zip(matches, preds, gts) for i, j in m.pairs
                      if p[i].class_id == k and g[j].class_id == k)
            np_ = sum(1 for p in preds for n in p if n.class_id == k)
            ng = sum(1 for g in gts for n in g if n.class_id == k)
            assert rep.f_c[k - 1] == pytest.approx(f_score(hit, np_ - hit, ng - hit))
        assert rep.mean_f_c == pytest.approx(np.mean(rep.f_c))
        assert 0 <= rep.f_d <= 1 and all(0 <= v <= 1 for v in rep.f_c)

    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        preds = [random_points(rng, rng.integers(0, 8)) for _ in range(3)]
        gts = [random_points(rng, rng.integers(0, 8)) for _ in range(3)]
        base = evaluate(preds, gts, 5.0, 3)
        order = rng.permutation(3)
        shuffled = evaluate([list(reversed(preds[i])) for i in order],
                            [list(reversed(gts[i])) for i in order], 5.0, 3)
        assert shuffled.f_d == base.f_d and shuffled.f_c == base.f_c

    @given(st.integers(0, 10_000))
    def test_correct_prediction_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        gts = random_points(rng, rng.integers(1, 8))
        preds = random_points(rng, rng.integers(0, 8))
        before = evaluate([preds], [gts], 3.0, 3).f_d
        missed = match_detections(preds, gts, 3.0).false_negatives
        assume(missed)
        # a duplicate of an already matched truth is a false positive, so hit a missed one
        extra = gts[missed[int(rng.integers(len(missed)))]]
        assert evaluate([preds + [extra]], [gts], 3.0, 3).f_d >= before - 1e-15

    def test_gt_against_itself(self, nprng):
        gts = [random_points(nprng, 6) for _ in range(4)]
        rep = evaluate(gts, gts, 3.0, 3)
        assert rep.f_d == 1.0 and rep.f_c == [1.0, 1.0, 1.0]

    def test_report_round_trip(self, nprng):
        rep = evaluate([random_points(nprng, 5)], [random_points(nprng, 5)], 6.0, 3)
        back = EvalReport.from_json(rep.to_json())
        assert back == rep and back.to_json() == rep.to_json()

    def test_needs_images(self):
        with pytest.raises(ParameterError):
            f_scores([], 3)
        with pytest.raises(ParameterError):
            evaluate([[]], [], 3.0, 1)


class TestWelch:
    def test_identical_samples(self):
        res = welch_t_test([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
        assert res.t == 0.0 and res.p == 1.0

    def test_jittered_constant_samples(self):
        jitter = np.array([1, -1, 2, -2]) * 1e-9
        assert welch_t_test(np.zeros(4) + jitter, np.ones(4) + jitter[::-1]).p < 1e-6

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.normal(0, rng.uniform(0.5, 2), rng.integers(2, 12))
            b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), rng.integers(2, 12))
            p, t, df = p_oracle(a, b)
            res = welch_t_test(a, b)
            assert res.t == pytest.approx(t, rel=1e-12) and res.df == pytest.approx(df, rel=1e-12)
            assert abs(res.p - p) < 1e-6

    def test_matches_scipy(self, nprng):
        from scipy.stats import ttest_ind
        a, b = nprng.normal(size=7), nprng.normal(0.5, 2.0, size=9)
        ref = ttest_ind(a, b, equal_var=False)
        res = welch_t_test(a, b)
        assert res.t == pytest.approx(ref.statistic) and res.p == pytest.approx(ref.pvalue)

    def test_degenerate(self):
        with pytest.raises(StatisticsError):
            welch_t_test([1.0, 1.0], [2.0, 2.0])
        with pytest.raises(StatisticsError):
            welch_t_test([1.0], [2.0, 3.0])
