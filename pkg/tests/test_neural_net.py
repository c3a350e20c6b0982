"""
MLP の順伝播・逆伝播と最適化のテスト
"""
import math
import os
import sys

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import ConvergenceFailure  # noqa: E402
from neural_net import (  # noqa: E402
    AdamOptimizer,
    Dropout,
    MlpParams,
    MomentumSGD,
    backward,
    clamp_variance,
    cosine_lr,
    forward,
    forward_with_cache,
    gaussian_nll_grad,
    gaussian_nll_loss,
    train_epochs,
)


def _loss_at(params, X, y):
    mu, logvar, _ = forward_with_cache(params, X)
    return gaussian_nll_loss(mu, logvar, y)


class TestForward:
    """順伝播のテスト"""

    def test_zero_network_outputs_unit_variance(self):
        params = MlpParams.zeros(3, hidden=4)
        mu, logvar = forward(params, np.ones(3))
        assert mu == 0.0
        assert logvar == 0.0

    def test_batch_shapes(self):
        params = MlpParams.init(5, np.random.default_rng(0), hidden=16)
        mu, logvar = forward(params, np.zeros((7, 5)))
        assert mu.shape == (7,)
        assert logvar.shape == (7,)

    def test_dimension_mismatch(self):
        params = MlpParams.init(3, np.random.default_rng(0), hidden=4)
        with pytest.raises(ValueError):
            forward(params, np.zeros(4))

    def test_variance_clamped(self):
        var = clamp_variance(np.array([-50.0, 0.0, 50.0, 1e6]))
        np.testing.assert_allclose(var, [1e-3, 1.0, 1e3, 1e3])

    def test_flat_round_trip(self):
        params = MlpParams.init(3, np.random.default_rng(1), hidden=4)
        restored = params.with_flat(params.flatten())
        for a, b in zip(params.tensors(), restored.tensors()):
            np.testing.assert_array_equal(a, b)
        assert params.flatten().size == 3 * 4 + 4 + 4 * 4 + 4 + 4 * 2 + 2


class TestDropout:
    """ドロップアウトマスクのテスト"""

    def test_zero_rate_is_identity(self):
        assert Dropout(0.0, np.random.default_rng(0)).mask((3, 4)) is None

    def test_full_rate_zeros(self):
        mask = Dropout(1.0, np.random.default_rng(0)).mask((3, 4))
        assert not mask.any()

    def test_inverted_scaling(self):
        mask = Dropout(0.5, np.random.default_rng(0)).mask((1000, 10))
        assert set(np.unique(mask)) <= {0.0, 2.0}
        assert abs(mask.mean() - 1.0) < 0.05


class TestGradients:
    """解析的勾配と中心差分の比較"""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_matches_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        params = MlpParams.init(3, rng, hidden=4)
        X = rng.normal(size=(6, 3))
        y = rng.normal(size=6)

        mu, logvar, cache = forward_with_cache(params, X)
        dmu, dlogvar = gaussian_nll_grad(mu, logvar, y)
        analytic = backward(params, cache, dmu, dlogvar).flatten()

        flat = params.flatten()
        numeric = np.zeros_like(flat)
        h = 1e-6
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            numeric[i] = (_loss_at(params.with_flat(plus), X, y)
                          - _loss_at(params.with_flat(minus), X, y)) / (2 * h)

        scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-4)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-5

    def test_clamped_variance_passes_gradient_through(self):
        params = MlpParams.zeros(2, hidden=3)
        params.biases[2][1] = 20.0  # σ² が上限に張り付く
        mu, logvar, cache = forward_with_cache(params, np.ones((4, 2)))
        assert np.exp(logvar) == pytest.approx(np.full(4, 1e3))
        grads = backward(params, cache, *gaussian_nll_grad(mu, logvar, np.ones(4)))
        # 上限 1e3 で評価した勾配 ½(1 − r²/σ²) がそのまま流れる
        assert grads.biases[2][1] == pytest.approx(0.5 * (1.0 - 1e-3))

    def test_collapsed_variance_keeps_shrinking(self):
        params = MlpParams.zeros(2, hidden=3)
        params.biases[2][1] = -10.0  # 下限 1e-3 より下
        mu, logvar, cache = forward_with_cache(params, np.ones((4, 2)))
        grads = backward(params, cache, *gaussian_nll_grad(mu, logvar, np.zeros(4)))
        # 残差ゼロなら下限を越えても対数分散を下げ続ける向き
        assert grads.biases[2][1] == pytest.approx(0.5)

    def test_prediction_floor_below_training_clamp(self):
        params = MlpParams.zeros(2, hidden=3)
        params.biases[2][1] = -10.0
        _, logvar = forward(params, np.ones(2), var_min=1e-10)
        assert logvar == pytest.approx(-10.0)


class TestOptimizers:
    """最適化と学習ループのテスト"""

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(0.01, 0, 100) == pytest.approx(0.01)
        assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005)
        assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0, abs=1e-15)

    def test_sgd_reaches_zero_lr_on_last_epoch(self):
        sgd = MomentumSGD(lr=0.1, total_epochs=10)
        assert sgd.lr_at(10) == pytest.approx(0.0, abs=1e-15)

    def test_adam_reduces_loss(self, regression_data):
        X, y, _, _ = regression_data
        params = MlpParams.init(3, np.random.default_rng(0), hidden=16)
        result = train_epochs(params, X, y, AdamOptimizer(lr=1e-2), 150)
        assert len(result.loss_trace) == 150
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_training_does_not_mutate_input(self, regression_data):
        X, y, _, _ = regression_data
        params = MlpParams.init(3, np.random.default_rng(0), hidden=8)
        before = params.flatten()
        train_epochs(params, X, y, AdamOptimizer(lr=1e-2), 5)
        np.testing.assert_array_equal(params.flatten(), before)

    def test_deterministic(self, regression_data):
        X, y, _, _ = regression_data
        runs = []
        for _ in range(2):
            params = MlpParams.init(3, np.random.default_rng(5), hidden=8)
            runs.append(train_epochs(params, X, y, AdamOptimizer(lr=1e-2), 20,
                                     rng=np.random.default_rng(9), dropout_rate=0.1).params.flatten())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_non_finite_loss_raises_with_epoch(self, regression_data):
        X, y, _, _ = regression_data
        calls = {'count': 0}

        def exploding(mu, logvar, target):
            calls['count'] += 1
            loss = math.inf if calls['count'] == 4 else 1.0
            return loss, np.zeros_like(mu), np.zeros_like(logvar)

        params = MlpParams.init(3, np.random.default_rng(0), hidden=4)
        with pytest.raises(ConvergenceFailure) as excinfo:
            train_epochs(params, X, y, AdamOptimizer(), 10, loss_fn=exploding)
        assert excinfo.value.epoch == 3

    def test_on_epoch_callback(self, regression_data):
        X, y, _, _ = regression_data
        seen = []
        params = MlpParams.init(3, np.random.default_rng(0), hidden=4)
        train_epochs(params, X, y, MomentumSGD(total_epochs=5), 5,
                     on_epoch=lambda epoch, p: seen.append(epoch))
        assert seen == [0, 1, 2, 3, 4]
