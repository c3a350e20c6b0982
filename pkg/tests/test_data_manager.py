"""
実行ディレクトリの成果物管理のテスト
"""
import json
import os
import sys

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data_manager import DataManager  # noqa: E402
from hier_model import PosteriorSamples, compute_diagnostics, mu_name  # noqa: E402
from models import (  # noqa: E402
    ConfigError,
    ExperimentConfig,
    MethodId,
    MetricId,
    MissingArtifactError,
    RunManifest,
)


@pytest.fixture
def manager(tmp_path):
    dm = DataManager(output_dir=str(tmp_path / "runs"))
    dm.use_run(ExperimentConfig())
    return dm


def _samples(metric=MetricId.INTERVAL_SCORE, n=50):
    rng = np.random.default_rng(0)
    draws = {mu_name(MethodId.MAP): rng.normal(size=(2, 20)),
             mu_name(MethodId.CP): rng.normal(size=(2, 20))}
    return PosteriorSamples("gaussian", [MethodId.MAP, MethodId.CP], draws, compute_diagnostics(draws),
                            realizations=[1, 2, 3], metric=metric, n=n)


class TestConfig:
    """設定ファイルの読み込み"""

    def test_defaults_without_file(self, tmp_path):
        config = DataManager(str(tmp_path)).load_config()
        assert config.to_dict() == ExperimentConfig().to_dict()

    def test_nested_merge(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({'R': 5, 'method_config': {'epochs': 20}}), encoding="utf-8")
        config = DataManager(str(tmp_path)).load_config(str(path))
        assert config.R == 5
        assert config.method_config.epochs == 20
        # 未指定の項目は既定値のまま
        assert config.method_config.hidden == ExperimentConfig().method_config.hidden

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            DataManager(str(tmp_path)).load_config(str(tmp_path / "none.json"))

    def test_broken_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{R: 5", encoding="utf-8")
        with pytest.raises(ConfigError):
            DataManager(str(tmp_path)).load_config(str(path))

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError):
            DataManager(str(tmp_path)).load_config(str(path))


class TestRunDirectory:
    """実行ディレクトリとマニフェスト"""

    def test_run_dir_from_config_hash(self, tmp_path):
        config = ExperimentConfig()
        dm = DataManager(output_dir=str(tmp_path))
        assert dm.use_run(config).endswith(f"run-{config.config_hash()[:12]}")
        for sub in ("cells", "fits", "analysis", "report", "debug"):
            assert os.path.isdir(os.path.join(dm.run_dir, sub))

    def test_path_requires_run(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            DataManager(str(tmp_path)).path("x")

    def test_manifest_and_history(self, manager):
        manifest = RunManifest(config_hash="abc", dataset_id="synthetic", n_levels=[30], R=2)
        manager.save_manifest(manifest)
        manifest.record_stage("cells", "k1")
        manager.save_manifest(manifest)
        assert manager.load_manifest().stage_done("cells", "k1")
        history = manager.manifest_history()
        assert len(history) == 2
        assert history[0]['stages'] == {}

    def test_missing_manifest(self, manager):
        with pytest.raises(MissingArtifactError):
            manager.load_manifest()


class TestArtifacts:
    """セル・指標テーブル・あてはめ結果"""

    def test_cell_reused_only_with_matching_key(self, manager):
        record = {'method': 'MCD', 'n': 30, 'realization': 2, 'stage_key': 'abc', 'values': {}}
        manager.save_cell(record)
        assert manager.load_cell(MethodId.MCD, 30, 2, 'abc') == record
        assert manager.load_cell(MethodId.MCD, 30, 2, 'other') is None
        assert manager.load_cell(MethodId.MCD, 30, 3, 'abc') is None

    def test_broken_cell_ignored(self, manager):
        with open(manager.cell_path(MethodId.MAP, 30, 1), 'w', encoding='utf-8') as file:
            file.write("{")
        assert manager.load_cell(MethodId.MAP, 30, 1, 'abc') is None

    def test_metric_table_round_trip(self, manager, metric_table):
        metric_table.set_converged(MethodId.MCD, 1, 30, False)
        manager.save_metric_table(metric_table)
        restored = manager.load_metric_table()
        assert restored.covered_counts == metric_table.covered_counts
        assert restored.convergence_flags == metric_table.convergence_flags
        for key, value in metric_table.entries.items():
            assert restored.entries[key] == pytest.approx(value, rel=1e-12)

    def test_missing_metric_table(self, manager):
        with pytest.raises(MissingArtifactError):
            manager.load_metric_table()

    def test_fit_round_trip(self, manager):
        samples = _samples()
        manager.save_fit(samples, stage_key="fit-key")
        assert manager.fit_metadata(MetricId.INTERVAL_SCORE, 50)['stage_key'] == "fit-key"
        restored = manager.load_fit(MetricId.INTERVAL_SCORE, 50)
        assert restored.metric == MetricId.INTERVAL_SCORE
        assert restored.realizations == [1, 2, 3]
        np.testing.assert_allclose(restored.mu(MethodId.CP), samples.mu(MethodId.CP))

    def test_list_fits_sorted(self, manager):
        manager.save_fit(_samples(MetricId.INTERVAL_SCORE, 30), "k")
        manager.save_fit(_samples(MetricId.CRPS, 100), "k")
        manager.save_fit(_samples(MetricId.CRPS, 30), "k")
        assert manager.list_fits() == [(MetricId.CRPS, 30), (MetricId.CRPS, 100),
                                       (MetricId.INTERVAL_SCORE, 30)]

    def test_missing_fit(self, manager):
        with pytest.raises(MissingArtifactError):
            manager.load_fit(MetricId.CRPS, 30)

    def test_debug_dumps(self, manager):
        path = manager.dump_loss_trace(MethodId.MAP, 30, 1, [1.0, 0.5])
        assert os.path.exists(path)
        path = manager.dump_predictive(MethodId.MAP, 30, 1, [{'index': 0, 'mu': [0.1]}])
        with open(path, encoding='utf-8') as file:
            assert json.loads(file.readline())['index'] == 0
