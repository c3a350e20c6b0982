"""
合成データでのベンチマーク全体の再現テスト

既定の学習設定で全手法・全 n 水準を実行します。実現数は机上で回せるよう
R=20 に減らしているので、数値の許容幅は実現数50の結果より少し広めです。
"""
import os
import sys

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from analysis import (  # noqa: E402
    convergence_rates,
    mdd,
    power_law_fit,
    rank_consistency,
    rank_probability,
    summarize_tau,
    summary_table,
)
from data_manager import DataManager  # noqa: E402
from main import BenchmarkApp  # noqa: E402
from models import ExperimentConfig, MethodId, MetricId  # noqa: E402

pytestmark = [pytest.mark.slow, pytest.mark.integration]

MAP, MCD, ENSEMBLE, SWAG, BBB, CP = (MethodId.MAP, MethodId.MCD, MethodId.ENSEMBLE,
                                     MethodId.SWAG, MethodId.BBB, MethodId.CP)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """(指標テーブル, BHM あてはめ) を返します"""
    config = ExperimentConfig(R=20)
    app = BenchmarkApp(config, DataManager(output_dir=str(tmp_path_factory.mktemp("runs"))))
    app.open_run()
    dataset = app.stage_generate()
    table = app.stage_cells(dataset)
    fits = app.stage_fits(table)
    return table, fits


def _means(table, metric, n):
    frame = summary_table(table, metric)
    rows = frame[frame['n'] == n]
    return {MethodId.parse(m): v for m, v in zip(rows['method'], rows['mean'])}


def _sds(table, metric, n):
    frame = summary_table(table, metric)
    rows = frame[frame['n'] == n]
    return {MethodId.parse(m): v for m, v in zip(rows['method'], rows['sd'])}


class TestMethodRanking:
    """n=500 での CRPS の順位"""

    def test_crps_ordering_at_largest_n(self, benchmark):
        table, _ = benchmark
        means = _means(table, MetricId.CRPS, 500)
        assert means[MCD] < means[BBB]
        assert means[ENSEMBLE] < means[MAP]
        assert min((MAP, MCD, ENSEMBLE, BBB, CP), key=means.get) == MCD
        assert 0.12 <= means[MCD] <= 0.18


class TestVarianceShrinkage:
    """実現間のばらつきの縮小"""

    def test_crps_sd_shrinks(self, benchmark):
        table, _ = benchmark
        small = _sds(table, MetricId.CRPS, 50)
        large = _sds(table, MetricId.CRPS, 500)
        for method in (MAP, MCD, ENSEMBLE, BBB, CP):
            assert large[method] < small[method], method.value

    def test_power_law_exponents(self, benchmark):
        table, _ = benchmark
        assert 0.6 <= power_law_fit(table, MCD, MetricId.CRPS).alpha <= 1.0
        assert 0.3 <= power_law_fit(table, MAP, MetricId.CRPS).alpha <= 0.7


class TestRankReversal:
    """MCD と Ensemble の順位確率"""

    def test_reversal_after_smallest_n(self, benchmark):
        _, fits = benchmark
        assert rank_probability(fits[(MetricId.CRPS, 30)], MCD, ENSEMBLE) < 0.5
        for n in (50, 100, 200, 500):
            assert rank_probability(fits[(MetricId.CRPS, n)], MCD, ENSEMBLE) > 0.95, n


class TestDetectability:
    """予測的 MDD"""

    def test_gap_below_mdd_at_n50(self, benchmark):
        _, fits = benchmark
        point = mdd(fits[(MetricId.CRPS, 50)], MCD, ENSEMBLE, gamma=0.80)
        assert point.mdd > point.observed_gap
        assert 0.6 <= point.detect_prob <= 0.85

    def test_detectable_by_n200(self, benchmark):
        _, fits = benchmark
        assert mdd(fits[(MetricId.CRPS, 200)], MCD, ENSEMBLE, gamma=0.80).detect_prob >= 0.80


class TestCoverage:
    """PICP の水準"""

    def test_map_undercovers(self, benchmark):
        table, _ = benchmark
        for n in (30, 50, 100, 200):
            assert _means(table, MetricId.PICP, n)[MAP] < 0.10, n

    def test_conformal_near_nominal(self, benchmark):
        table, _ = benchmark
        assert 0.85 <= _means(table, MetricId.PICP, 50)[CP] <= 0.98

    def test_mcd_coverage_at_n50(self, benchmark):
        table, _ = benchmark
        assert _means(table, MetricId.PICP, 50)[MCD] == pytest.approx(0.689, abs=0.1)


class TestSwagFailures:
    """SWAG の収束失敗の扱い"""

    def test_rate_improves_with_n(self, benchmark):
        table, _ = benchmark
        rates = convergence_rates(table)
        assert rates[(SWAG, 30)] < rates[(SWAG, 200)]

    def test_failed_runs_never_enter_fits(self, benchmark):
        table, fits = benchmark
        for (metric, n), samples in fits.items():
            if SWAG not in samples.methods:
                continue
            for r in samples.realizations:
                assert table.convergence_flags.get((SWAG, r, n), True), (metric.value, n, r)


class TestRankConsistency:
    """CRPS と Interval Score の順位の一致"""

    def test_agreement_grows_with_n(self, benchmark):
        table, _ = benchmark
        small = summarize_tau([c.tau for c in rank_consistency(table, 30)])['median']
        large = summarize_tau([c.tau for c in rank_consistency(table, 500)])['median']
        assert small < large < 1.0
        assert np.isfinite(small)
