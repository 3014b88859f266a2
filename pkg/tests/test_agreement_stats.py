"""
Agreement Statistics Tests
一致性统计测试：以穷举、闭式解和生成模型作为对照
"""

import math
import os
import sys
import unittest
from itertools import permutations, product

import numpy as np
import pandas as pd
from scipy import stats

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.agreement_stats import (  # noqa: E402
    ICC_NOTE, AgreementConfig, PairedSample, bh_fdr, bland_altman, compare_conditions, friedman,
    gated_battery, gpr_curve, gpr_fit, gpr_predict, icc3_parametric, icc_nonparametric, levene_median,
    linear_regression, shapiro_wilk, spearman, vif, wilcoxon_rank_sum, wilcoxon_signed_rank,
)
from src.errors import (  # noqa: E402
    AllZeroDifferences, ConstantColumn, DataError, DegenerateX, IncompleteRows, TooFewSamples,
    TooFewSubjects, ZeroVariance,
)


def make_pairs(manual, automated):
    return [PairedSample(f"s{i:04d}", float(m), float(a)) for i, (m, a) in enumerate(zip(manual, automated))]


class TestDistributionGates(unittest.TestCase):
    """正态性与方差齐性检验测试"""

    def test_shapiro_bimodal_rejected(self):
        result = shapiro_wilk([-10.0] * 25 + [10.0] * 25)
        self.assertLess(result.p_value, 0.01)

    def test_shapiro_normal_sample(self):
        sample = np.random.default_rng(0).standard_normal(50)
        result = shapiro_wilk(sample)
        w, p = stats.shapiro(sample)
        self.assertAlmostEqual(result.statistic, w)
        self.assertAlmostEqual(result.p_value, p)
        self.assertGreater(result.statistic, 0.9)

    def test_shapiro_errors(self):
        with self.assertRaises(TooFewSamples):
            shapiro_wilk([1.0, 2.0])
        with self.assertRaises(ZeroVariance):
            shapiro_wilk([3.0] * 10)
        with self.assertRaises(DataError):
            shapiro_wilk(np.arange(5001, dtype=float))
        with self.assertRaises(DataError):
            shapiro_wilk([1.0, float("nan"), 2.0])

    def test_levene_median(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(0, 1, 40), rng.normal(0, 5, 40)
        result = levene_median(a, b)
        expected = stats.levene(a, b, center="median")
        self.assertAlmostEqual(result.statistic, expected.statistic)
        self.assertLess(result.p_value, 0.01)
        self.assertEqual(result.df, (1, 78))

    def test_levene_constant_groups(self):
        result = levene_median([1.0, 1.0, 1.0], [2.0, 2.0, 2.0])
        self.assertEqual(result.p_value, 1.0)


class TestRankTests(unittest.TestCase):
    """秩检验测试"""

    @staticmethod
    def brute_signed_rank_p(d):
        ranks = stats.rankdata(np.abs(d))
        observed = ranks[d > 0].sum()
        totals = np.array([sum(r for r, s in zip(ranks, signs) if s) for signs in product([0, 1], repeat=len(d))])
        lower = np.mean(totals <= observed + 1e-9)
        upper = np.mean(totals >= observed - 1e-9)
        return min(1.0, 2.0 * min(lower, upper))

    def test_signed_rank_matches_enumeration(self):
        """n <= 12 时与 2^n 符号穷举一致"""
        rng = np.random.default_rng(7)
        for n in (1, 4, 7, 10, 12):
            for _ in range(3):
                d = rng.normal(0.3, 1.0, n)
                result = wilcoxon_signed_rank(d)
                self.assertEqual(result.extra["method"], "exact")
                self.assertAlmostEqual(result.p_value, self.brute_signed_rank_p(d), places=12)

    def test_signed_rank_with_ties_matches_enumeration(self):
        d = np.array([1.0, -1.0, 2.0, 2.0, 3.0, -4.0, 5.0, 5.0])
        self.assertAlmostEqual(wilcoxon_signed_rank(d).p_value, self.brute_signed_rank_p(d), places=12)

    def test_signed_rank_paired_form_and_zero_drop(self):
        x = np.array([5.0, 3.0, 8.0, 1.0, 7.0, 2.0])
        y = np.array([4.0, 3.0, 6.0, 2.0, 4.0, 0.0])
        paired = wilcoxon_signed_rank(x, y)
        self.assertEqual(paired.extra["n"], 5)
        self.assertEqual(paired.p_value, wilcoxon_signed_rank(x - y).p_value)
        self.assertEqual(paired.p_value, wilcoxon_signed_rank(y, x).p_value)

    def test_signed_rank_large_sample(self):
        rng = np.random.default_rng(8)
        d = rng.normal(1.0, 1.0, 60)
        result = wilcoxon_signed_rank(d)
        self.assertEqual(result.extra["method"], "approx")
        self.assertLess(result.p_value, 1e-4)

    def test_signed_rank_all_zero(self):
        with self.assertRaises(AllZeroDifferences):
            wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])

    def test_rank_sum(self):
        result = wilcoxon_rank_sum([1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0])
        self.assertEqual(result.statistic, 0.0)
        self.assertAlmostEqual(result.p_value, 2.0 / 70.0)
        with self.assertRaises(TooFewSamples):
            wilcoxon_rank_sum([], [1.0])

    def test_friedman_statistic_matches_scipy(self):
        rng = np.random.default_rng(3)
        data = rng.integers(0, 4, size=(12, 4)).astype(float)
        result = friedman(data, exact=False)
        expected = stats.friedmanchisquare(*data.T)
        self.assertAlmostEqual(result.statistic, expected.statistic, places=10)
        self.assertAlmostEqual(result.p_value, expected.pvalue, places=10)
        self.assertEqual(result.df, 3)

    def test_friedman_exact_p_matches_enumeration(self):
        """n=6, k=3：与 (3!)^6 行内置换穷举一致"""
        data = np.array([
            [1.0, 2.0, 3.0], [2.0, 1.0, 3.0], [1.0, 3.0, 2.0],
            [1.0, 2.0, 3.0], [3.0, 1.0, 2.0], [1.0, 2.0, 3.0],
        ])
        result = friedman(data, exact=True)
        self.assertAlmostEqual(result.p_value, stats.friedmanchisquare(*data.T).pvalue, places=12)
        ranks = stats.rankdata(data, axis=1)
        observed = float(np.sum(ranks.sum(axis=0) ** 2))
        row_perms = [list(permutations(row)) for row in ranks]
        hits = total = 0
        for choice in product(*row_perms):
            sums = np.sum(choice, axis=0)
            hits += float(np.sum(sums ** 2)) >= observed - 1e-9
            total += 1
        self.assertEqual(total, 6 ** 6)
        self.assertAlmostEqual(result.extra["p_exact"], hits / total, places=12)

    def test_friedman_p_is_chi_square(self):
        """小样本 n=6, k=3 时 p 值仍取 χ²(k-1)"""
        rng = np.random.default_rng(21)
        data = rng.normal(size=(6, 3)) + np.array([0.0, 0.3, 0.6])
        result = friedman(data)
        expected = stats.friedmanchisquare(*data.T)
        self.assertAlmostEqual(result.p_value, expected.pvalue, places=12)
        self.assertNotIn("p_exact", result.extra)
        auto = friedman(data, exact="auto")
        self.assertAlmostEqual(auto.p_value, expected.pvalue, places=12)
        self.assertIn("p_exact", auto.extra)

    def test_friedman_all_tied(self):
        result = friedman(np.ones((5, 3)))
        self.assertEqual(result.statistic, 0.0)
        self.assertEqual(result.p_value, 1.0)

    def test_friedman_errors(self):
        with self.assertRaises(IncompleteRows):
            friedman([[1.0, np.nan], [2.0, 3.0]])
        with self.assertRaises(TooFewSamples):
            friedman([[1.0, 2.0, 3.0]])

    def test_bh_known_values(self):
        adjusted = bh_fdr([0.01, 0.04, 0.03, 0.005])
        np.testing.assert_allclose(adjusted, [0.02, 0.04, 0.04, 0.02])

    def test_bh_matches_brute_force(self):
        """adj_i = min_{j: p_j >= p_i} min(1, p_j·m/rank_j)"""
        rng = np.random.default_rng(12)
        for m in (1, 2, 5, 20):
            p = rng.random(m) ** 2
            order = np.argsort(p, kind="stable")
            rank = np.empty(m, dtype=int)
            rank[order] = np.arange(1, m + 1)
            expected = [min(1.0, min(p[j] * m / rank[j] for j in range(m) if rank[j] >= rank[i])) for i in range(m)]
            adjusted = bh_fdr(p)
            np.testing.assert_allclose(adjusted, expected, rtol=0, atol=1e-15)
            self.assertTrue(np.all(adjusted >= p - 1e-15))
            self.assertTrue(np.all(np.diff(adjusted[order]) >= -1e-15))

    def test_bh_edge_cases(self):
        self.assertEqual(bh_fdr([]).size, 0)
        np.testing.assert_allclose(bh_fdr([0.5, 0.5]), [0.5, 0.5])
        with self.assertRaises(DataError):
            bh_fdr([1.5])


class TestSpearman(unittest.TestCase):
    """Spearman 秩相关测试"""

    def test_rho_matches_scipy(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=30)
        y = x + rng.normal(size=30)
        result = spearman(x, y)
        expected = stats.spearmanr(x, y)
        self.assertAlmostEqual(result.statistic, expected.correlation, places=12)
        self.assertAlmostEqual(result.p_value, expected.pvalue, places=10)
        self.assertEqual(result.extra["method"], "t")

    def test_exact_p_matches_enumeration(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        y = np.array([2.0, 1.0, 4.0, 3.0, 6.0, 5.0])
        result = spearman(x, y)
        self.assertEqual(result.extra["method"], "exact")
        ra, rb = stats.rankdata(x), stats.rankdata(y)
        rhos = np.array([np.corrcoef(ra, np.array(perm))[0, 1] for perm in permutations(rb)])
        observed = np.corrcoef(ra, rb)[0, 1]
        greater = np.mean(rhos >= observed - 1e-12)
        less = np.mean(rhos <= observed + 1e-12)
        self.assertAlmostEqual(result.p_value, min(1.0, 2 * min(greater, less)), places=10)

    def test_monotone_gives_unit_rho(self):
        x = np.arange(12, dtype=float)
        self.assertAlmostEqual(spearman(x, np.exp(x)).statistic, 1.0)
        self.assertAlmostEqual(spearman(x, -x ** 3).statistic, -1.0)

    def test_errors(self):
        with self.assertRaises(ZeroVariance):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        with self.assertRaises(TooFewSamples):
            spearman([1.0, 2.0], [1.0, 2.0])


class TestRegression(unittest.TestCase):
    """线性回归与 GPR 测试"""

    def test_linear_exact_line(self):
        x = np.arange(10, dtype=float)
        result = linear_regression(x, 2.0 * x + 1.0)
        self.assertAlmostEqual(result.slope, 2.0)
        self.assertAlmostEqual(result.intercept, 1.0)
        self.assertAlmostEqual(result.r, 1.0)
        with self.assertRaises(DegenerateX):
            linear_regression([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_gpr_interpolates_with_pinned_noise(self):
        """noise 固定为 1e-8 时训练点残差 < 1e-4"""
        x = np.linspace(0.0, 10.0, 15)
        y = np.sin(x) + 0.1 * x
        model = gpr_fit(x, y, noise_grid=[1e-8])
        prediction = gpr_predict(model, x)
        self.assertLess(float(np.max(np.abs(prediction.y_pred - y))), 1e-4)

    def test_gpr_far_field_reverts_to_mean(self):
        x = np.linspace(0.0, 10.0, 15)
        y = np.sin(x) + 3.0
        model = gpr_fit(x, y, noise_grid=[1e-8])
        far = gpr_predict(model, [1e6])
        self.assertAlmostEqual(float(far.y_pred[0]), float(np.mean(y)), delta=1e-6)

    def test_gpr_curve_and_interval(self):
        rng = np.random.default_rng(5)
        x = np.sort(rng.uniform(0, 5, 25))
        y = 1.5 * x + rng.normal(0, 0.3, 25)
        model = gpr_fit(x, y)
        curve = gpr_curve(model, 40)
        lo, hi = curve.ci95
        self.assertEqual(curve.x.size, 40)
        self.assertAlmostEqual(curve.x[0], x.min())
        self.assertAlmostEqual(curve.x[-1], x.max())
        np.testing.assert_allclose(hi - curve.y_pred, 1.96 * curve.y_std)
        self.assertTrue(np.all(lo <= hi))
        self.assertIn("length_scale", model.to_dict())

    def test_gpr_errors(self):
        with self.assertRaises(DegenerateX):
            gpr_fit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
        with self.assertRaises(TooFewSamples):
            gpr_fit([1.0, 2.0], [1.0, 2.0])
        with self.assertRaises(DataError):
            gpr_fit([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], noise_grid=[0.0])


class TestIcc(unittest.TestCase):
    """ICC 测试"""

    def test_icc3_closed_form(self):
        """手算：MS_r = 4.75, MS_e = 0.25 -> ICC = 0.9, F = 19"""
        pairs = make_pairs([1, 2, 3, 4, 5], [2, 3, 5, 4, 6])
        result = icc3_parametric(pairs)
        self.assertAlmostEqual(result.icc, 0.9)
        self.assertAlmostEqual(result.f_statistic, 19.0)
        self.assertEqual(result.df, (4, 4))
        self.assertAlmostEqual(result.p_value, stats.f.sf(19.0, 4, 4))
        self.assertLess(result.ci95[0], 0.9)
        self.assertGreater(result.ci95[1], 0.9)

    def test_icc3_constant_offset(self):
        manual = np.arange(10, dtype=float)
        result = icc3_parametric(make_pairs(manual, manual + 2.0))
        self.assertEqual(result.icc, 1.0)
        self.assertTrue(result.degenerate)

    def test_icc3_independent_noise_near_zero(self):
        rng = np.random.default_rng(30)
        result = icc3_parametric(make_pairs(rng.normal(size=2000), rng.normal(size=2000)))
        self.assertLess(abs(result.icc), 0.1)

    def test_icc_errors(self):
        with self.assertRaises(TooFewSubjects):
            icc3_parametric(make_pairs([1, 2, 3, 4], [1, 2, 3, 4]))
        with self.assertRaises(ZeroVariance):
            icc3_parametric(make_pairs([1] * 6, [1] * 6))
        with self.assertRaises(DataError):
            icc3_parametric([PairedSample("a", 1, 2)] * 6)

    def test_nonparametric_recovers_variance_ratio(self):
        """受试者间方差占比 0.9，n = 60"""
        rng = np.random.default_rng(31)
        subject = rng.normal(0, math.sqrt(0.9), 60)
        pairs = make_pairs(subject + rng.normal(0, math.sqrt(0.1), 60), subject + rng.normal(0, math.sqrt(0.1), 60))
        result = icc_nonparametric(pairs, n_boot=1000, seed=4)
        self.assertLess(abs(result.icc - 0.9), 0.1)
        self.assertLessEqual(result.ci95[0], result.icc)
        self.assertGreaterEqual(result.ci95[1], result.icc)
        self.assertEqual(result.n_boot, 1000)

    def test_nonparametric_deterministic(self):
        rng = np.random.default_rng(32)
        pairs = make_pairs(rng.normal(size=20), rng.normal(size=20))
        self.assertEqual(icc_nonparametric(pairs, 300, seed=9).to_dict(),
                         icc_nonparametric(pairs, 300, seed=9).to_dict())

    def test_nonparametric_identical_raters(self):
        values = [3.0, 3.0, 3.0, 3.0, 3.0, 3.0]
        result = icc_nonparametric(make_pairs(values, values), n_boot=50)
        self.assertEqual(result.icc, 1.0)


class TestBlandAltman(unittest.TestCase):
    """Bland-Altman 测试"""

    def test_planted_bias(self):
        manual = np.arange(20) * 0.25
        result = bland_altman(make_pairs(manual, manual + 0.5))
        self.assertAlmostEqual(result.bias, 0.5, places=12)
        self.assertAlmostEqual(result.loa[0], 0.5, places=12)
        self.assertAlmostEqual(result.loa[1], 0.5, places=12)

    def test_parametric_three_point_differences(self):
        """差值 {-1, 0, +1}：LoA = ±1.96·sd（ddof=1），n 大时趋近 ±1.96·√(2/3)"""
        for repeats, tolerance in ((100, None), (10000, 1e-4)):
            diffs = np.tile([-1.0, 0.0, 1.0], repeats)
            n = diffs.size
            result = bland_altman(make_pairs(np.zeros(n), diffs))
            sd = math.sqrt(2.0 / 3.0 * n / (n - 1))
            self.assertAlmostEqual(result.bias, 0.0, places=12)
            self.assertAlmostEqual(result.loa[1], 1.96 * sd, places=10)
            self.assertAlmostEqual(result.loa[0], -1.96 * sd, places=10)
            if tolerance:
                self.assertLess(abs(result.loa[1] - 1.96 * math.sqrt(2.0 / 3.0)), tolerance)
            self.assertLess(result.ci_bias[0], 0.0)
            self.assertGreater(result.ci_loa_hi[1], result.loa[1])

    def test_percentile_limits_are_type7_quantiles(self):
        rng = np.random.default_rng(40)
        manual = rng.normal(10, 2, 1000)
        automated = manual + rng.standard_t(3, 1000)
        result = bland_altman(make_pairs(manual, automated), method="percentile", n_boot=200, seed=1)
        diffs = automated - manual
        lo, hi = np.quantile(diffs, [0.025, 0.975])
        self.assertEqual(result.loa, (lo, hi))
        self.assertEqual(result.bias, float(np.median(diffs)))
        inside = np.mean((diffs >= lo) & (diffs <= hi))
        self.assertGreaterEqual(inside, 0.95)
        self.assertLessEqual(result.ci_bias[0], result.ci_bias[1])
        self.assertEqual(result.n_boot, 200)

    def test_points_and_unknown_method(self):
        pairs = make_pairs([1.0, 2.0, 3.0], [2.0, 2.0, 5.0])
        result = bland_altman(pairs)
        np.testing.assert_allclose(result.means, [1.5, 2.0, 4.0])
        np.testing.assert_allclose(result.differences, [1.0, 0.0, 2.0])
        with self.assertRaises(DataError):
            bland_altman(pairs, method="bayesian")
        with self.assertRaises(TooFewSamples):
            bland_altman(pairs[:2])


class TestVif(unittest.TestCase):
    """VIF 测试"""

    def test_independent_columns(self):
        rng = np.random.default_rng(50)
        report = vif(rng.normal(size=(500, 3)))
        for value in report.vif.values():
            self.assertLess(value, 1.1)
        self.assertEqual(report.flagged, [])

    def test_exact_collinearity(self):
        rng = np.random.default_rng(51)
        frame = pd.DataFrame(rng.normal(size=(50, 2)), columns=["te", "tr"])
        frame["sum"] = frame["te"] + frame["tr"]
        report = vif(frame)
        self.assertTrue(math.isinf(report.vif["sum"]))
        self.assertEqual(set(report.flagged), {"te", "tr", "sum"})

    def test_known_correlation(self):
        """两列相关系数 r -> VIF = 1/(1-r²)"""
        rng = np.random.default_rng(52)
        a = rng.normal(size=400)
        b = 0.9 * a + math.sqrt(1 - 0.81) * rng.normal(size=400)
        report = vif(np.column_stack([a, b]), names=["a", "b"])
        r = np.corrcoef(a, b)[0, 1]
        self.assertAlmostEqual(report.vif["a"], 1.0 / (1.0 - r * r), places=6)

    def test_errors(self):
        with self.assertRaises(ConstantColumn):
            vif(np.column_stack([np.ones(10), np.arange(10.0), np.arange(10.0) ** 2]))
        with self.assertRaises(TooFewSamples):
            vif(np.zeros((2, 2)))


class TestGatedBattery(unittest.TestCase):
    """门控组合测试"""

    def test_bimodal_takes_nonparametric_path(self):
        manual = np.array([-10.0] * 20 + [10.0] * 20) + np.linspace(0, 1, 40)
        automated = manual + np.random.default_rng(60).normal(0, 0.5, 40)
        outcome = gated_battery(make_pairs(manual, automated), AgreementConfig(n_boot=200))
        report = outcome.report
        self.assertEqual(report["path"], "nonparametric")
        self.assertEqual(report["icc"]["method"], "nonparametric_bootstrap")
        self.assertEqual(report["bland_altman"]["method"], "percentile")
        self.assertEqual(report["regression"]["model"], "gpr")
        self.assertEqual(list(outcome.regression_curve.columns), ["x", "y_pred", "y_lo", "y_hi"])
        self.assertEqual(len(outcome.regression_curve), 100)
        self.assertEqual(len(outcome.bland_altman_points), 40)
        self.assertIsNotNone(report["spearman"])

    def test_override_forces_parametric(self):
        manual = np.array([-10.0] * 20 + [10.0] * 20) + np.linspace(0, 1, 40)
        automated = manual + 0.5
        config = AgreementConfig(path_override="parametric", gpr_curve_points=10)
        report = gated_battery(make_pairs(manual, automated), config).report
        self.assertEqual(report["path"], "parametric")
        self.assertIn("path overridden: gate selected nonparametric", report["notes"])
        self.assertIn(ICC_NOTE, report["notes"])
        self.assertEqual(report["regression"]["model"], "linear")
        self.assertAlmostEqual(report["bland_altman"]["bias"], 0.5)

    def test_config_from_dict(self):
        config = AgreementConfig.from_dict({"alpha": 0.01, "n_boot": 50})
        self.assertEqual((config.alpha, config.n_boot, config.path_override), (0.01, 50, None))


class TestCompareConditions(unittest.TestCase):
    """多条件比较测试"""

    def test_friedman_and_pairwise(self):
        rng = np.random.default_rng(70)
        base = rng.normal(0.8, 0.05, 12)
        table = pd.DataFrame({
            "unet": base,
            "sam": base - 0.1 + rng.normal(0, 0.01, 12),
            "medsam": base + rng.normal(0, 0.01, 12),
        })
        table.loc[3, "sam"] = np.nan
        with self.assertLogs("src.agreement_stats", level="WARNING"):
            result = compare_conditions(table)
        self.assertEqual(result["n_subjects"], 11)
        self.assertEqual(len(result["pairwise"]), 3)
        for row in result["pairwise"]:
            self.assertGreaterEqual(row["p_bh"], row["p"] - 1e-15)
        self.assertLess(result["friedman"]["p_value"], 0.01)


if __name__ == "__main__":
    unittest.main()
