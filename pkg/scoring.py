"""
適正スコアリングルールと区間指標

予測分布とテスト目的変数から CRPS / NLL / PICP / MPIW / Interval Score を
計算します。すべて純粋関数で、サンプルベースの CRPS だけがシード付きの
乱数ストリームを使います。
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import kendalltau, norm

from models import MethodConfig, MethodId, MetricId, RngStream
from uq_methods import PredictiveDistribution, PredictiveKind

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
BISECTION_TOL = 1e-8


@dataclass
class MetricResult:
    metric: MetricId
    value: float
    covered: Optional[Tuple[int, int]] = None


@dataclass
class CoverageResult:
    covered: int
    n_test: int
    mpiw: float

    @property
    def picp(self) -> float:
        return self.covered / self.n_test


def crps_gaussian(mu, sigma, y):
    """σ[z(2Φ(z)−1) + 2φ(z) − 1/√π], z = (y−μ)/σ"""
    mu, sigma, y = np.asarray(mu, float), np.asarray(sigma, float), np.asarray(y, float)
    if np.any(sigma <= 0):
        raise ValueError("CRPS の σ は正である必要があります")
    z = (y - mu) / sigma
    value = sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - INV_SQRT_PI)
    return float(value) if value.ndim == 0 else value


def crps_sample(samples, y):
    # 第2項は i=j を含む全 N² 組の平均。整列済みサンプルから O(N log N)
    x = np.sort(np.asarray(samples, dtype=float), axis=0)
    if x.shape[0] < 2:
        raise ValueError(f"CRPS のサンプルが不足しています: {x.shape[0]}")
    y = np.asarray(y, dtype=float)
    size = x.shape[0]
    first = np.mean(np.abs(x - y), axis=0)
    coeff = (2.0 * np.arange(1, size + 1) - size - 1).reshape((size,) + (1,) * (x.ndim - 1))
    spread = np.sum(coeff * x, axis=0) / size ** 2
    value = first - spread
    return float(value) if np.ndim(value) == 0 else value


def sample_mixture(dist: PredictiveDistribution, size: int, rng: np.random.Generator) -> np.ndarray:
    component = rng.integers(0, dist.n_components, size=(size, dist.test_size))
    columns = np.arange(dist.test_size)
    mu = dist.mu[component, columns]
    sigma = dist.sigma[component, columns]
    return mu + sigma * rng.standard_normal((size, dist.test_size))


def crps(dist: PredictiveDistribution, y: np.ndarray, rng: Optional[np.random.Generator] = None,
         samples: int = 2048) -> float:
    if dist.kind == PredictiveKind.MIXTURE and dist.n_components > 1:
        if rng is None:
            raise ValueError("混合分布の CRPS には乱数ストリームが必要です")
        return float(np.mean(crps_sample(sample_mixture(dist, samples, rng), y)))
    return float(np.mean(crps_gaussian(dist.mu[0], dist.sigma[0], y)))


def nll(dist: PredictiveDistribution, y: np.ndarray, sigma_floor: Optional[float] = None) -> float:
    sigma = dist.sigma
    if sigma_floor is not None:
        sigma = np.maximum(sigma, sigma_floor)
    log_pdf = norm.logpdf(np.asarray(y, float)[None, :], loc=dist.mu, scale=sigma)
    log_density = logsumexp(log_pdf, axis=0) - math.log(dist.n_components)
    return float(-np.mean(log_density))


def mixture_cdf(dist: PredictiveDistribution, t: np.ndarray) -> np.ndarray:
    return np.mean(norm.cdf((np.asarray(t)[None, :] - dist.mu) / dist.sigma), axis=0)


def mixture_quantile(dist: PredictiveDistribution, p: float, tol: float = BISECTION_TOL) -> np.ndarray:
    lo = np.min(dist.mu - 40.0 * dist.sigma, axis=0)
    hi = np.max(dist.mu + 40.0 * dist.sigma, axis=0)
    for _ in range(200):
        if np.max(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(dist, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def interval_at(dist: PredictiveDistribution, level: float = 0.90):
    if not 0.0 < level < 1.0:
        raise ValueError(f"区間の水準は (0,1) の範囲です: {level}")
    if dist.kind == PredictiveKind.INTERVAL:
        return dist.lower, dist.upper
    tail = (1.0 - level) / 2.0
    if dist.n_components == 1:
        z = norm.ppf(1.0 - tail)
        return dist.mu[0] - z * dist.sigma[0], dist.mu[0] + z * dist.sigma[0]
    return mixture_quantile(dist, tail), mixture_quantile(dist, 1.0 - tail)


def picp_mpiw(dist: PredictiveDistribution, ys: np.ndarray, level: float = 0.90) -> CoverageResult:
    ys = np.asarray(ys, dtype=float)
    if ys.size != dist.test_size:
        raise ValueError(f"テスト点数が一致しません: {ys.size} vs {dist.test_size}")
    lower, upper = interval_at(dist, level)
    covered = int(np.sum((lower <= ys) & (ys <= upper)))
    return CoverageResult(covered=covered, n_test=int(ys.size), mpiw=float(np.mean(upper - lower)))


def winkler_score(lower, upper, ys, alpha: float = 0.10) -> float:
    lower, upper, ys = np.asarray(lower), np.asarray(upper), np.asarray(ys)
    penalty = (2.0 / alpha) * (np.maximum(lower - ys, 0.0) + np.maximum(ys - upper, 0.0))
    return float(np.mean((upper - lower) + penalty))


def interval_score(dist: PredictiveDistribution, ys: np.ndarray, alpha: float = 0.10) -> float:
    lower, upper = interval_at(dist, 1.0 - alpha)
    return winkler_score(lower, upper, ys, alpha)


def rank_methods(values: Dict[MethodId, float]) -> List[MethodId]:
    """小さい順 (良い順)。同値は MethodId の定義順で並べます"""
    return sorted(values, key=lambda m: (values[m], m.order))


def kendall_tau(ranking_a: Sequence[MethodId], ranking_b: Sequence[MethodId]) -> float:
    if set(ranking_a) != set(ranking_b) or len(ranking_a) != len(ranking_b):
        raise ValueError(
            f"ランキングの手法集合が一致しません: {[m.value for m in ranking_a]} "
            f"vs {[m.value for m in ranking_b]}")
    position_b = {m: i for i, m in enumerate(ranking_b)}
    tau, _ = kendalltau(np.arange(len(ranking_a)), [position_b[m] for m in ranking_a])
    return float(tau)


def evaluate(dist: PredictiveDistribution, y_test: np.ndarray, metrics: Sequence[MetricId],
             cfg: MethodConfig, seed: int) -> List[MetricResult]:
    results = []
    for metric in metrics:
        if metric == MetricId.CRPS:
            label = f"crps/{dist.method.value if dist.method else 'dist'}"
            rng = RngStream(seed, label).generator()
            results.append(MetricResult(metric, crps(dist, y_test, rng, cfg.crps_samples)))
        elif metric == MetricId.NLL:
            floor = cfg.nll_sigma_floor if dist.method == MethodId.MAP else None
            results.append(MetricResult(metric, nll(dist, y_test, floor)))
        elif metric in (MetricId.PICP, MetricId.MPIW):
            coverage = picp_mpiw(dist, y_test, cfg.interval_level)
            if metric == MetricId.PICP:
                results.append(MetricResult(metric, coverage.picp,
                                            (coverage.covered, coverage.n_test)))
            else:
                results.append(MetricResult(metric, coverage.mpiw))
        elif metric == MetricId.INTERVAL_SCORE:
            results.append(MetricResult(metric, interval_score(dist, y_test,
                                                               1.0 - cfg.interval_level)))
    return results
