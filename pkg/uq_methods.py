"""
6つの不確実性定量化 (UQ) 手法の学習器

各学習器は (学習データ, テスト特徴量, シード, MethodConfig) の純粋関数で、
固定テスト集合上の予測分布 PredictiveDistribution を返します。
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from models import (
    ConvergenceFailure,
    InsufficientDataError,
    MethodConfig,
    MethodId,
    RngStream,
    derive_child_seed,
)
from neural_net import (
    AdamOptimizer,
    Dropout,
    MlpParams,
    MomentumSGD,
    backward,
    forward,
    forward_with_cache,
    gaussian_nll,
    train_epochs,
)

logger = logging.getLogger(__name__)


class PredictiveKind(Enum):
    GAUSSIAN = "gaussian"
    MIXTURE = "mixture"
    INTERVAL = "interval"


@dataclass
class PredictiveDistribution:
    # mu / sigma は (成分数 K, テスト点数)。ガウスと区間は K=1

    kind: PredictiveKind
    mu: np.ndarray
    sigma: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    level: float = 0.90
    method: Optional[MethodId] = None
    loss_trace: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"μ と σ の形状が一致しません: {self.mu.shape} vs {self.sigma.shape}")
        if not np.all(self.sigma > 0):
            raise ValueError("σ は全テスト点で正である必要があります")
        if self.kind == PredictiveKind.INTERVAL:
            if self.lower is None or self.upper is None:
                raise ValueError("区間型の予測分布には lower と upper が必要です")
            if np.any(self.lower > self.upper):
                raise ValueError("区間の下限が上限を超えています")

    @classmethod
    def gaussian(cls, mu, sigma, **kwargs) -> 'PredictiveDistribution':
        return cls(PredictiveKind.GAUSSIAN, mu, sigma, **kwargs)

    @classmethod
    def mixture(cls, mus: List[np.ndarray], sigmas: List[np.ndarray],
                **kwargs) -> 'PredictiveDistribution':
        return cls(PredictiveKind.MIXTURE, np.vstack(mus), np.vstack(sigmas), **kwargs)

    @property
    def n_components(self) -> int:
        return self.mu.shape[0]

    @property
    def test_size(self) -> int:
        return self.mu.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_components, 1.0 / self.n_components)

    def mean(self) -> np.ndarray:
        return self.mu.mean(axis=0)

    def to_records(self) -> List[Dict[str, Any]]:
        records = []
        for i in range(self.test_size):
            record: Dict[str, Any] = {
                'index': i,
                'kind': self.kind.value,
                'mu': self.mu[:, i].tolist(),
                'sigma': self.sigma[:, i].tolist(),
            }
            if self.kind == PredictiveKind.INTERVAL:
                record['lower'] = float(self.lower[i])
                record['upper'] = float(self.upper[i])
            records.append(record)
        return records


def _check_train(X: np.ndarray, y: np.ndarray, minimum: int = 2) -> None:
    if len(y) < minimum:
        raise InsufficientDataError(f"学習データが不足しています: {len(y)} 点 (最低 {minimum} 点)")
    if X.shape[0] != len(y):
        raise ValueError(f"X と y の行数が一致しません: {X.shape[0]} vs {len(y)}")


def _make_optimizer(name: str, cfg: MethodConfig, epochs: int, weight_decay: Optional[float] = None):
    if name == "adam":
        decay = cfg.weight_decay if weight_decay is None else weight_decay
        return AdamOptimizer(lr=cfg.adam_lr, weight_decay=decay)
    if name == "sgd":
        return MomentumSGD(lr=cfg.sgd_lr, momentum=cfg.momentum, total_epochs=epochs)
    raise ValueError(f"未知の最適化手法です: {name}")


def _gaussian_head(params: MlpParams, X: np.ndarray, cfg: MethodConfig,
                   dropout: Optional[Dropout] = None):
    # 予測時の下限は学習時のクランプより広く、分散の崩壊をそのまま報告する
    mu, logvar = forward(params, X, dropout, cfg.predict_var_min, cfg.var_max)
    return mu, np.exp(0.5 * logvar)


def fit_network(X: np.ndarray, y: np.ndarray, seed: int, cfg: MethodConfig,
                dropout_rate: float = 0.0):
    stream = RngStream(seed, "network")
    params = MlpParams.init(X.shape[1], stream.child("init").generator(), cfg.hidden)
    optimizer = _make_optimizer(cfg.optimizer, cfg, cfg.epochs)
    rng = stream.child("dropout-train").generator() if dropout_rate > 0 else None
    return train_epochs(params, X, y, optimizer, cfg.epochs, rng=rng, dropout_rate=dropout_rate,
                        var_min=cfg.var_min, var_max=cfg.var_max)


def train_map(X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
              cfg: MethodConfig) -> PredictiveDistribution:
    _check_train(X, y)
    result = fit_network(X, y, seed, cfg)
    mu, sigma = _gaussian_head(result.params, X_test, cfg)
    return PredictiveDistribution.gaussian(mu, sigma, method=MethodId.MAP,
                                           loss_trace=result.loss_trace)


def train_mcd(X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
              cfg: MethodConfig) -> PredictiveDistribution:
    _check_train(X, y)
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ValueError(f"dropout_rate は [0,1) の範囲です: {cfg.dropout_rate}")
    result = fit_network(X, y, seed, cfg, dropout_rate=cfg.dropout_rate)
    dropout = Dropout(cfg.dropout_rate, RngStream(seed, "network").child("dropout-test").generator())
    mus, sigmas = [], []
    for _ in range(cfg.test_samples):
        mu, sigma = _gaussian_head(result.params, X_test, cfg, dropout)
        mus.append(mu)
        sigmas.append(sigma)
    return PredictiveDistribution.mixture(mus, sigmas, method=MethodId.MCD,
                                          loss_trace=result.loss_trace)


def train_ensemble(X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
                   cfg: MethodConfig) -> PredictiveDistribution:
    _check_train(X, y)
    mus, sigmas = [], []
    trace: List[float] = []
    for member in range(cfg.ensemble_size):
        # メンバー 0 は MAP と同じシードを使う
        result = fit_network(X, y, derive_child_seed(seed, member), cfg)
        mu, sigma = _gaussian_head(result.params, X_test, cfg)
        mus.append(mu)
        sigmas.append(sigma)
        if member == 0:
            trace = result.loss_trace
    return PredictiveDistribution.mixture(mus, sigmas, method=MethodId.ENSEMBLE, loss_trace=trace)


class SwagCollector:
    def __init__(self, start_epoch: int = 300):
        self.start_epoch = start_epoch
        self.count = 0
        self.mean: Optional[np.ndarray] = None
        self.m2: Optional[np.ndarray] = None

    def collect(self, epoch: int, params: MlpParams) -> None:
        if epoch < self.start_epoch:
            return
        weights = params.flatten()
        if self.mean is None or self.m2 is None:
            self.mean = np.zeros_like(weights)
            self.m2 = np.zeros_like(weights)
        self.count += 1
        delta = weights - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (weights - self.mean)

    def variance(self) -> np.ndarray:
        if self.m2 is None or self.count == 0:
            raise ConvergenceFailure("SWAG のスナップショットがありません")
        return np.maximum(self.m2 / self.count, 0.0)


def diverged_epoch(loss_trace: List[float], start_epoch: int) -> Optional[int]:
    """平均化区間で損失が学習開始時の値を上回った最初のエポック"""
    if not loss_trace:
        return None
    baseline = loss_trace[0]
    for epoch in range(max(start_epoch, 1), len(loss_trace)):
        if loss_trace[epoch] > baseline:
            return epoch
    return None


def train_swag(X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
               cfg: MethodConfig) -> PredictiveDistribution:
    """
    SGD 軌跡の対角ガウス近似から重みをサンプリングします

    Raises:
        ConvergenceFailure: 損失の発散、スナップショット不足、重み分散の膨張
    """
    _check_train(X, y)
    stream = RngStream(seed, "swag")
    params = MlpParams.init(X.shape[1], stream.child("init").generator(), cfg.hidden)
    optimizer = _make_optimizer(cfg.swag_optimizer, cfg, cfg.epochs)
    collector = SwagCollector(cfg.swag_start_epoch)
    result = train_epochs(params, X, y, optimizer, cfg.epochs, on_epoch=collector.collect,
                          var_min=cfg.var_min, var_max=cfg.var_max)
    if collector.count < 2:
        raise ConvergenceFailure(f"SWAG のスナップショットが不足しています: {collector.count}")
    epoch = diverged_epoch(result.loss_trace, cfg.swag_start_epoch)
    if epoch is not None:
        raise ConvergenceFailure(
            f"SWAG の損失が初期値を上回りました (epoch {epoch}: "
            f"{result.loss_trace[epoch]:.4g} > {result.loss_trace[0]:.4g})", epoch=epoch)

    std = np.sqrt(collector.variance())
    rng = stream.child("sample").generator()
    mus, sigmas, fitted = [], [], []
    for _ in range(cfg.test_samples):
        sample = result.params.with_flat(collector.mean + std * rng.standard_normal(std.size))
        mu, sigma = _gaussian_head(sample, X_test, cfg)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ConvergenceFailure("SWAG のサンプル予測が有限ではありません")
        mus.append(mu)
        sigmas.append(sigma)
        fitted.append(_gaussian_head(sample, X, cfg)[0])

    spread = float(np.mean(np.var(np.vstack(fitted), axis=0)))
    limit = cfg.swag_max_spread_ratio * float(np.var(y))
    if not spread <= limit:
        raise ConvergenceFailure(
            f"SWAG の重み分散が膨らみすぎています (学習点での予測分散 {spread:.4g} > {limit:.4g})")
    return PredictiveDistribution.mixture(mus, sigmas, method=MethodId.SWAG,
                                          loss_trace=result.loss_trace)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def kl_to_standard_normal(mean: np.ndarray, sigma: np.ndarray) -> float:
    return float(np.sum(-np.log(sigma) + 0.5 * (sigma ** 2 + mean ** 2) - 0.5))


@dataclass
class VariationalParams:
    means: MlpParams
    rhos: MlpParams

    def sigmas(self) -> List[np.ndarray]:
        return [softplus(r) for r in self.rhos.tensors()]

    def kl(self) -> float:
        return sum(kl_to_standard_normal(m, s)
                   for m, s in zip(self.means.tensors(), self.sigmas()))

    def sample(self, rng: np.random.Generator) -> MlpParams:
        drawn = [m + s * rng.standard_normal(m.shape)
                 for m, s in zip(self.means.tensors(), self.sigmas())]
        return MlpParams(drawn[0::2], drawn[1::2])


def fit_bbb(X: np.ndarray, y: np.ndarray, seed: int, cfg: MethodConfig,
            kl_weight: Optional[float] = None):
    # 目的関数: 平均 NLL + kl_weight · ΣKL / n_train
    kl_weight = cfg.kl_weight if kl_weight is None else kl_weight
    if kl_weight <= 0:
        raise ValueError(f"kl_weight は正である必要があります: {kl_weight}")
    stream = RngStream(seed, "bbb")
    means = MlpParams.init(X.shape[1], stream.child("init").generator(), cfg.hidden)
    rhos = MlpParams([np.full_like(w, cfg.bbb_rho_init) for w in means.weights],
                     [np.full_like(b, cfg.bbb_rho_init) for b in means.biases])
    variational = VariationalParams(means, rhos)
    tensors = means.tensors() + rhos.tensors()
    optimizer = _make_optimizer("adam", cfg, cfg.bbb_epochs, weight_decay=0.0)
    rng = stream.child("reparam").generator()
    scale = kl_weight / len(y)
    trace: List[float] = []

    for epoch in range(cfg.bbb_epochs):
        mean_tensors = means.tensors()
        rho_tensors = rhos.tensors()
        sigmas = [softplus(r) for r in rho_tensors]
        eps = [rng.standard_normal(m.shape) for m in mean_tensors]
        drawn = [m + s * e for m, s, e in zip(mean_tensors, sigmas, eps)]
        weights = MlpParams(drawn[0::2], drawn[1::2])

        mu, logvar, cache = forward_with_cache(weights, X, None, cfg.var_min, cfg.var_max)
        nll, dmu, dlogvar = gaussian_nll(mu, logvar, y)
        loss = nll + scale * variational.kl()
        if not math.isfinite(loss):
            raise ConvergenceFailure(f"BBB の損失が有限ではありません (epoch {epoch})", epoch=epoch)
        trace.append(loss)

        grad_w = backward(weights, cache, dmu, dlogvar).tensors()
        grad_means = [g + scale * m for g, m in zip(grad_w, mean_tensors)]
        grad_rhos = [(g * e + scale * (s - 1.0 / s)) * expit(r)
                     for g, e, s, r in zip(grad_w, eps, sigmas, rho_tensors)]
        optimizer.step(tensors, grad_means + grad_rhos, epoch)
        if not (means.is_finite() and rhos.is_finite()):
            raise ConvergenceFailure(f"BBB のパラメータが発散しました (epoch {epoch})", epoch=epoch)
    return variational, trace


def train_bbb(X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
              cfg: MethodConfig, kl_weight: Optional[float] = None) -> PredictiveDistribution:
    _check_train(X, y)
    variational, trace = fit_bbb(X, y, seed, cfg, kl_weight)
    rng = RngStream(seed, "bbb").child("predict").generator()
    mus, sigmas = [], []
    for _ in range(cfg.test_samples):
        mu, sigma = _gaussian_head(variational.sample(rng), X_test, cfg)
        mus.append(mu)
        sigmas.append(sigma)
    return PredictiveDistribution.mixture(mus, sigmas, method=MethodId.BBB, loss_trace=trace)


def conformal_quantile_index(n_cal: int, alpha: float) -> int:
    """⌈(1−α)(n_cal+1)⌉ をそのまま返します (n_cal を超えることがあります)"""
    return math.ceil((1 - Fraction(str(alpha))) * (n_cal + 1))


def conformal_half_width(scores: np.ndarray, alpha: float) -> float:
    ordered = np.sort(np.asarray(scores, dtype=float))
    k = conformal_quantile_index(ordered.size, alpha)
    if k > ordered.size:
        logger.debug(f"較正点が少ないため最大スコアを使用します (k={k}, n_cal={ordered.size})")
        k = ordered.size
    return float(ordered[k - 1])


def calibration_size(n: int, fraction: float) -> int:
    return int(Fraction(str(fraction)) * n + Fraction(1, 2))


def train_cp(X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
             cfg: MethodConfig) -> PredictiveDistribution:
    _check_train(X, y)
    n_cal = calibration_size(len(y), cfg.cp_calibration_fraction)
    if n_cal < 2 or len(y) - n_cal < 2:
        raise InsufficientDataError(
            f"較正集合が小さすぎます: n={len(y)}, n_cal={n_cal} (最低2点ずつ必要)")
    order = RngStream(seed, "cp-split").generator().permutation(len(y))
    cal, proper = order[:n_cal], order[n_cal:]

    result = fit_network(X[proper], y[proper], seed, cfg)
    mu_cal, _ = _gaussian_head(result.params, X[cal], cfg)
    q = conformal_half_width(np.abs(y[cal] - mu_cal), cfg.cp_alpha)

    mu, _ = _gaussian_head(result.params, X_test, cfg)
    z = float(norm.ppf(1.0 - cfg.cp_alpha / 2.0))
    sigma = np.full_like(mu, max(q / z, 1e-12))
    return PredictiveDistribution(PredictiveKind.INTERVAL, mu, sigma, lower=mu - q, upper=mu + q,
                                  level=1.0 - cfg.cp_alpha, method=MethodId.CP,
                                  loss_trace=result.loss_trace)


Trainer = Callable[[np.ndarray, np.ndarray, np.ndarray, int, MethodConfig], PredictiveDistribution]

TRAINERS: Dict[MethodId, Trainer] = {
    MethodId.MAP: train_map,
    MethodId.MCD: train_mcd,
    MethodId.ENSEMBLE: train_ensemble,
    MethodId.SWAG: train_swag,
    MethodId.BBB: train_bbb,
    MethodId.CP: train_cp,
}


def train_method(method: MethodId, X: np.ndarray, y: np.ndarray, X_test: np.ndarray,
                 seed: int, cfg: MethodConfig) -> PredictiveDistribution:
    return TRAINERS[method](X, y, X_test, seed, cfg)
