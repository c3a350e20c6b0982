"""
テスト共通のフィクスチャ
"""
import os
import sys

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import MethodConfig, MethodId, MetricId, MetricKey, MetricTable  # noqa: E402


@pytest.fixture
def tiny_method_config():
    """学習を数秒で終える小さな設定"""
    return MethodConfig(
        epochs=30,
        bbb_epochs=30,
        hidden=8,
        test_samples=8,
        ensemble_size=2,
        swag_start_epoch=15,
        crps_samples=256,
    )


@pytest.fixture
def regression_data():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    y = X @ np.array([1.0, -0.5, 0.25]) + 0.1 * rng.normal(size=40)
    X_test = rng.normal(size=(15, 3))
    y_test = X_test @ np.array([1.0, -0.5, 0.25]) + 0.1 * rng.normal(size=15)
    return X, y, X_test, y_test


def build_table(methods=(MethodId.MAP, MethodId.MCD, MethodId.ENSEMBLE), n_levels=(30, 50, 100),
                R=6, seed=1, n_test=100):
    """手法ごとに平均をずらした人工の指標テーブル"""
    rng = np.random.default_rng(seed)
    table = MetricTable()
    for n in n_levels:
        for r in range(1, R + 1):
            shared = rng.normal(scale=0.01)
            for offset, method in enumerate(methods):
                scale = 0.2 / np.sqrt(n)
                crps = 0.3 + 0.05 * offset + shared + rng.normal(scale=scale)
                table.store_metric(MetricKey(method, r, n, MetricId.CRPS), crps)
                table.store_metric(MetricKey(method, r, n, MetricId.INTERVAL_SCORE),
                                   2.0 + 0.3 * offset + rng.normal(scale=scale))
                covered = int(rng.binomial(n_test, 0.5 + 0.1 * offset))
                table.store_coverage(method, r, n, covered, n_test)
                table.set_converged(method, r, n, True)
    return table


@pytest.fixture
def metric_table():
    return build_table()
