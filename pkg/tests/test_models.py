"""
ドメインモデルのテスト
"""
import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import (  # noqa: E402
    SCHEMA_VERSION,
    BenchmarkError,
    ConfigError,
    DuplicateKeyError,
    ExperimentConfig,
    InsufficientDataError,
    MethodId,
    MetricId,
    MetricKey,
    MetricTable,
    RngStream,
    RunManifest,
    derive_child_seed,
    derive_realization_seed,
)


class TestIdentifiers:
    """手法・指標 ID のテスト"""

    def test_parse_is_case_insensitive(self):
        assert MethodId.parse("ensemble") == MethodId.ENSEMBLE
        assert MethodId.parse("mcd") == MethodId.MCD
        assert MetricId.parse("intervalscore") == MetricId.INTERVAL_SCORE
        assert MetricId.parse("INTERVAL_SCORE") == MetricId.INTERVAL_SCORE

    def test_unknown_identifier_raises_config_error(self):
        with pytest.raises(ConfigError):
            MethodId.parse("GP")
        with pytest.raises(ConfigError):
            MetricId.parse("RMSE")

    def test_method_order_follows_definition(self):
        assert [m.order for m in MethodId] == list(range(6))

    def test_metric_key_str(self):
        assert str(MetricKey(MethodId.MCD, 3, 50, MetricId.CRPS)) == "(MCD, 3, 50, CRPS)"


class TestSeeds:
    """シード導出と乱数ストリームのテスト"""

    def test_compat_mode_is_r_plus_n(self):
        assert derive_realization_seed(42, 1, 30, compat=True) == 31
        assert derive_realization_seed(42, 2, 29, compat=True) == 31

    def test_mixed_mode_avoids_collisions(self):
        seeds = {derive_realization_seed(42, r, n) for r in range(1, 51) for n in (30, 50, 100, 200, 500)}
        assert len(seeds) == 250
        assert derive_realization_seed(42, 2, 29) != derive_realization_seed(42, 1, 30)

    def test_mixed_mode_depends_on_global_seed(self):
        assert derive_realization_seed(42, 1, 30) != derive_realization_seed(43, 1, 30)

    def test_invalid_index_rejected(self):
        with pytest.raises(ConfigError):
            derive_realization_seed(42, 0, 30)

    def test_child_seed_zero_is_parent(self):
        assert derive_child_seed(1234, 0) == 1234
        assert derive_child_seed(1234, 1) != derive_child_seed(1234, 2)

    def test_stream_is_reproducible(self):
        a = RngStream(7, "subsample").generator().normal(size=5)
        b = RngStream(7, "subsample").generator().normal(size=5)
        c = RngStream(7, "other").generator().normal(size=5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_child_label_is_distinct(self):
        parent = RngStream(7, "network")
        assert parent.child("init").label == "network/init"
        assert not np.array_equal(parent.generator().normal(size=3),
                                  parent.child("init").generator().normal(size=3))


class TestMetricTable:
    """MetricTable のテスト"""

    def test_duplicate_key_rejected(self):
        table = MetricTable()
        key = MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS)
        table.store_metric(key, 0.5)
        with pytest.raises(DuplicateKeyError) as excinfo:
            table.store_metric(key, 0.6)
        assert "(MAP, 1, 30, CRPS)" in str(excinfo.value)
        assert table.get(key) == 0.5

    def test_coverage_stores_fraction(self):
        table = MetricTable()
        table.store_coverage(MethodId.CP, 1, 50, 333, 360)
        assert table.picp_fraction(MethodId.CP, 1, 50) == pytest.approx(333 / 360)
        assert table.get(MetricKey(MethodId.CP, 1, 50, MetricId.PICP)) == pytest.approx(0.925)

    def test_invalid_coverage_rejected(self):
        with pytest.raises(BenchmarkError):
            MetricTable().store_coverage(MethodId.CP, 1, 50, 400, 360)

    def test_frozen_table_is_read_only(self, metric_table):
        metric_table.freeze()
        with pytest.raises(BenchmarkError):
            metric_table.store_metric(MetricKey(MethodId.MAP, 99, 30, MetricId.CRPS), 0.1)

    def test_freeze_rejects_unpaired_realizations(self):
        table = MetricTable()
        table.store_metric(MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS), 0.1)
        table.store_metric(MetricKey(MethodId.MAP, 2, 30, MetricId.CRPS), 0.1)
        table.store_metric(MetricKey(MethodId.MCD, 1, 30, MetricId.CRPS), 0.1)
        with pytest.raises(BenchmarkError):
            table.freeze()

    def test_merge_combines_partial_tables(self):
        left, right = MetricTable(), MetricTable()
        left.store_metric(MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS), 0.1)
        right.store_metric(MetricKey(MethodId.MAP, 2, 30, MetricId.CRPS), 0.2)
        left.merge(right)
        assert left.realizations(MethodId.MAP, 30, MetricId.CRPS) == [1, 2]
        with pytest.raises(DuplicateKeyError):
            left.merge(right)

    def test_merge_duplicate_leaves_table_untouched(self):
        left, right = MetricTable(), MetricTable()
        left.store_metric(MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS), 0.1)
        right.store_metric(MetricKey(MethodId.MAP, 2, 30, MetricId.CRPS), 0.2)
        right.store_metric(MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS), 0.3)
        right.set_converged(MethodId.MAP, 2, 30, True)
        with pytest.raises(DuplicateKeyError) as excinfo:
            left.merge(right)
        assert excinfo.value.key == MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS)
        assert left.realizations(MethodId.MAP, 30, MetricId.CRPS) == [1]
        assert left.get(MetricKey(MethodId.MAP, 1, 30, MetricId.CRPS)) == 0.1
        assert (MethodId.MAP, 2, 30) not in left.convergence_flags

    def test_slice_shape_and_order(self, metric_table):
        matrix = metric_table.slice_for_bhm(50, MetricId.CRPS)
        assert matrix.values.shape == (3, 6)
        assert matrix.methods == [MethodId.MAP, MethodId.MCD, MethodId.ENSEMBLE]
        assert matrix.realizations == list(range(1, 7))
        assert matrix.values[1, 2] == metric_table.get(MetricKey(MethodId.MCD, 3, 50, MetricId.CRPS))

    def test_slice_picp_uses_counts(self, metric_table):
        matrix = metric_table.slice_for_bhm(30, MetricId.PICP)
        assert matrix.n_test == 100
        assert np.all(matrix.values == np.round(matrix.values))

    def test_slice_drops_failed_realization_rows(self, metric_table):
        # 1実現だけ失敗させる (収束率 5/6 ≥ 0.8 なので手法は残る)
        metric_table.set_converged(MethodId.ENSEMBLE, 4, 100, False)
        matrix = metric_table.slice_for_bhm(100, MetricId.CRPS)
        assert 4 not in matrix.realizations
        assert matrix.dropped_realizations == [4]
        assert MethodId.ENSEMBLE in matrix.methods

    def test_slice_keeps_flagged_rows_when_not_excluding(self, metric_table):
        metric_table.set_converged(MethodId.ENSEMBLE, 4, 100, False)
        matrix = metric_table.slice_for_bhm(100, MetricId.CRPS, exclude_unconverged=False)
        assert matrix.realizations == list(range(1, 7))
        assert matrix.dropped_realizations == []

    def test_slice_drops_method_below_rate(self, metric_table):
        for r in (1, 2):
            metric_table.set_converged(MethodId.MCD, r, 100, False)
        matrix = metric_table.slice_for_bhm(100, MetricId.CRPS, min_rate=0.80)
        assert MethodId.MCD not in matrix.methods
        assert matrix.dropped_methods == [MethodId.MCD]
        assert matrix.realizations == list(range(1, 7))

    def test_slice_requires_two_methods(self):
        table = MetricTable()
        for r in (1, 2, 3):
            table.store_metric(MetricKey(MethodId.MAP, r, 30, MetricId.CRPS), 0.1 * r)
        with pytest.raises(InsufficientDataError):
            table.slice_for_bhm(30, MetricId.CRPS)

    def test_convergence_rate_and_values(self, metric_table):
        metric_table.set_converged(MethodId.MAP, 1, 30, False)
        assert metric_table.convergence_rate(MethodId.MAP, 30) == pytest.approx(5 / 6)
        assert metric_table.values(MethodId.MAP, 30, MetricId.CRPS).size == 5
        assert metric_table.values(MethodId.MAP, 30, MetricId.CRPS, converged_only=False).size == 6
        assert metric_table.convergence_rate(MethodId.SWAG, 30) is None

    def test_dataframe_round_trip(self, metric_table):
        metric_table.set_converged(MethodId.MCD, 2, 50, False)
        df = metric_table.to_dataframe()
        assert list(df.columns) == ['method', 'realization', 'n', 'metric', 'value',
                                    'converged', 'covered', 'n_test']
        restored = MetricTable.from_dataframe(df)
        assert restored.entries == metric_table.entries
        assert restored.covered_counts == metric_table.covered_counts
        assert restored.convergence_flags == metric_table.convergence_flags

    def test_record_cell_with_nan_metric(self):
        table = MetricTable()
        table.record_cell(MethodId.SWAG, 1, 30, {MetricId.CRPS: float('nan')}, None, False)
        assert math.isnan(table.get(MetricKey(MethodId.SWAG, 1, 30, MetricId.CRPS)))
        assert table.values(MethodId.SWAG, 30, MetricId.CRPS, converged_only=False).size == 0


class TestRunManifest:
    """RunManifest のテスト"""

    def test_stage_tracking(self):
        manifest = RunManifest(config_hash="abc", dataset_id="synthetic", n_levels=[30], R=2)
        assert not manifest.stage_done("cells", "k1")
        manifest.record_stage("cells", "k1", paths={'metric_table': "runs/x/metric_table.csv"})
        assert manifest.stage_done("cells", "k1")
        assert not manifest.stage_done("cells", "k2")
        assert manifest.artifact_paths['metric_table'] == "runs/x/metric_table.csv"

    def test_dict_round_trip(self):
        manifest = RunManifest(config_hash="abc", dataset_id="synthetic", n_levels=[30, 50], R=5,
                               seeds={'global': 42})
        restored = RunManifest.from_dict(manifest.to_dict())
        assert restored.to_dict() == manifest.to_dict()
        assert restored.schema_version == SCHEMA_VERSION

    def test_newer_schema_rejected(self):
        data = RunManifest(config_hash="abc", dataset_id="d", n_levels=[30], R=1).to_dict()
        data['schema_version'] = SCHEMA_VERSION + 1
        with pytest.raises(ConfigError):
            RunManifest.from_dict(data)


class TestExperimentConfig:
    """ExperimentConfig のテスト"""

    def test_defaults(self):
        config = ExperimentConfig()
        assert config.n_levels == [30, 50, 100, 200, 500]
        assert config.R == 50
        assert config.global_seed == 42
        assert config.gamma == 0.80
        config.validate()

    def test_quick_mode(self):
        config = ExperimentConfig().apply_quick()
        assert config.R == 10
        assert config.n_levels == [30, 100]

    @pytest.mark.parametrize("field_name,value", [
        ("R", 0),
        ("gamma", 0.3),
        ("seed_mode", "raw"),
        ("n_levels", []),
        ("workers", 0),
    ])
    def test_invalid_values_rejected(self, field_name, value):
        config = ExperimentConfig()
        setattr(config, field_name, value)
        with pytest.raises(ConfigError):
            config.validate()

    @pytest.mark.parametrize("field_name,value", [
        ("predict_var_min", 0.0),
        ("predict_var_min", 1e-2),
        ("swag_max_spread_ratio", -1.0),
    ])
    def test_invalid_method_values_rejected(self, field_name, value):
        config = ExperimentConfig()
        setattr(config.method_config, field_name, value)
        with pytest.raises(ConfigError):
            config.validate()

    def test_csv_requires_target(self):
        config = ExperimentConfig()
        config.dataset.kind = "csv"
        config.dataset.path = "data.csv"
        with pytest.raises(ConfigError):
            config.validate()

    def test_dict_round_trip_and_hash(self):
        config = ExperimentConfig()
        config.method_config.epochs = 50
        restored = ExperimentConfig.from_dict(config.to_dict())
        assert restored.to_dict() == config.to_dict()
        assert restored.config_hash() == config.config_hash()

    def test_hash_ignores_workers(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        b.workers = 8
        assert a.config_hash() == b.config_hash()
        b.R = 20
        assert a.config_hash() != b.config_hash()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({'epochs': 10})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({'method_config': {'epoch': 10}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({'dataset': {'file': 'x.csv'}})

    def test_comparison_of_same_method_rejected(self):
        config = ExperimentConfig.from_dict({'comparisons': [['MCD', 'MCD']]})
        with pytest.raises(ConfigError):
            config.validate()

    def test_table_frame_is_dataframe(self, metric_table):
        assert isinstance(metric_table.to_dataframe(), pd.DataFrame)
