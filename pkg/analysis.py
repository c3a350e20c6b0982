"""
事後分布を使った下流の解析

順位確率 P(A≺B)、予測的最小検出差 (MDD)、分散のべき乗則あてはめ、
収束率、分散分解、R 感度などをまとめています。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from hier_model import PosteriorSamples, fit_bhm
from models import (
    BhmMatrix,
    HierConfig,
    InsufficientDataError,
    MethodId,
    MetricId,
    MetricKey,
    MetricTable,
    RngStream,
)
from scoring import kendall_tau, rank_methods

logger = logging.getLogger(__name__)

CONCLUSIVE_LOW = 0.05
CONCLUSIVE_HIGH = 0.95


@dataclass
class ComparisonResult:
    pair_prob: Dict[Tuple[MethodId, MethodId], float]
    methods: List[MethodId]
    n: Optional[int]
    metric: Optional[MetricId]
    sample_count: int

    def prob(self, a: MethodId, b: MethodId) -> float:
        if a == b:
            return float('nan')
        return self.pair_prob[(a, b)]

    def to_frame(self) -> pd.DataFrame:
        labels = [m.value for m in self.methods]
        matrix = [[self.prob(a, b) for b in self.methods] for a in self.methods]
        return pd.DataFrame(matrix, index=labels, columns=labels)


def _ordered_prob(samples: PosteriorSamples, a: MethodId, b: MethodId) -> float:
    mu_a, mu_b = samples.mu(a), samples.mu(b)
    less = np.count_nonzero(mu_a < mu_b)
    ties = np.count_nonzero(mu_a == mu_b)
    return (less + 0.5 * ties) / mu_a.size


def rank_probability(samples: PosteriorSamples, a: MethodId, b: MethodId) -> float:
    """
    同じ draw 番号の μ_A と μ_B を比べた P(μ_A < μ_B)

    同値は 1/2 として数えます。手法の定義順で片方向だけを計算し、
    逆方向は 1 − p とするので補数関係は厳密に成り立ちます。
    """
    if a == b:
        raise ValueError(f"同じ手法同士は比較できません: {a.value}")
    samples.require_converged()
    if a.order < b.order:
        return _ordered_prob(samples, a, b)
    return 1.0 - _ordered_prob(samples, b, a)


def pairwise_matrix(samples: PosteriorSamples,
                    methods: Optional[Sequence[MethodId]] = None) -> ComparisonResult:
    samples.require_converged()
    methods = list(methods or samples.methods)
    pair_prob = {}
    for a in methods:
        for b in methods:
            if a != b:
                pair_prob[(a, b)] = rank_probability(samples, a, b)
    return ComparisonResult(pair_prob=pair_prob, methods=methods, n=samples.n,
                            metric=samples.metric, sample_count=samples.mu(methods[0]).size)


def conclusive_marker(prob: float) -> str:
    if prob <= CONCLUSIVE_LOW or prob >= CONCLUSIVE_HIGH:
        return "*"
    return "?"


@dataclass
class MddPoint:
    n: Optional[int]
    gamma: float
    mdd: float
    observed_gap: float
    detect_prob: float
    sigma_pred: float
    mean_diff: float
    per_draw: Optional[Dict[str, float]] = None

    @property
    def detectable(self) -> bool:
        return self.observed_gap >= self.mdd

    def to_dict(self) -> Dict[str, float]:
        row = {
            'n': self.n,
            'gamma': self.gamma,
            'mdd': self.mdd,
            'observed_gap': self.observed_gap,
            'detect_prob': self.detect_prob,
            'sigma_pred': self.sigma_pred,
            'mean_diff': self.mean_diff,
            'detectable': self.detectable,
        }
        if self.per_draw:
            row.update({f"mdd_{k}": v for k, v in self.per_draw.items()})
        return row


def method_variance(samples: PosteriorSamples, method: MethodId) -> np.ndarray:
    """1実現あたりの観測分散 (draw ごと)"""
    if samples.model == "betabinom":
        mu = samples.mu(method)
        phi = samples.flat('phi')
        n_test = samples.n_test
        return mu * (1.0 - mu) * (n_test + phi) / (n_test * (1.0 + phi))
    return samples.sigma(method) ** 2


def mdd(samples: PosteriorSamples, a: MethodId, b: MethodId, gamma: float = 0.80,
        per_draw: bool = False) -> MddPoint:
    """
    σ_pred² = Var(μ_A − μ_B | y) + E[σ_A²] + E[σ_B²] から MDD を求めます

    per_draw を指定すると σ_A², σ_B² を draw ごとに使った MDD の分布
    (中央値と 5%/95% 分位点) も返します。
    """
    if a == b:
        raise ValueError(f"同じ手法同士は比較できません: {a.value}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"γ は (0,1) の範囲です: {gamma}")
    samples.require_converged()
    diff = samples.mu(a) - samples.mu(b)
    var_a = method_variance(samples, a)
    var_b = method_variance(samples, b)
    diff_var = float(np.var(diff, ddof=1))
    sigma_pred = math.sqrt(diff_var + float(np.mean(var_a)) + float(np.mean(var_b)))
    z = float(norm.ppf(gamma))
    mean_diff = float(np.mean(diff))
    gap = abs(mean_diff)
    extra = None
    if per_draw:
        draws = z * np.sqrt(diff_var + var_a + var_b)
        extra = {'median': float(np.median(draws)),
                 'q05': float(np.quantile(draws, 0.05)),
                 'q95': float(np.quantile(draws, 0.95))}
    if sigma_pred > 0:
        detect_prob = float(norm.cdf(gap / sigma_pred))
    else:
        # 予測的なばらつきがゼロ (被覆が飽和した場合など)
        logger.warning(f"σ_pred が0です ({a.value} vs {b.value}, n={samples.n})")
        detect_prob = 1.0 if gap > 0 else 0.5
    return MddPoint(n=samples.n, gamma=gamma, mdd=z * sigma_pred, observed_gap=gap,
                    detect_prob=detect_prob, sigma_pred=sigma_pred,
                    mean_diff=mean_diff, per_draw=extra)


@dataclass
class MddCurve:
    a: MethodId
    b: MethodId
    metric: Optional[MetricId]
    gamma: float
    points: List[MddPoint] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([p.to_dict() for p in self.points])


def mdd_curve(posteriors: Dict[int, PosteriorSamples], a: MethodId, b: MethodId,
              gamma: float = 0.80, per_draw: bool = False) -> MddCurve:
    metric = None
    points = []
    for n in sorted(posteriors):
        samples = posteriors[n]
        metric = samples.metric
        points.append(mdd(samples, a, b, gamma, per_draw))
    return MddCurve(a=a, b=b, metric=metric, gamma=gamma, points=points)


@dataclass
class PowerLawFit:
    method: Optional[MethodId]
    metric: Optional[MetricId]
    alpha: float
    log_c: float
    r2: float
    n_levels: List[int]
    variances: List[float]

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    def to_dict(self) -> Dict[str, object]:
        return {
            'method': self.method.value if self.method else None,
            'metric': self.metric.value if self.metric else None,
            'alpha': self.alpha,
            'C': self.c,
            'r2': self.r2,
            'n_levels': " ".join(str(n) for n in self.n_levels),
        }


def fit_power_law(n_levels: Sequence[int], variances: Sequence[float]) -> Tuple[float, float, float]:
    """log Var = log C − α log n の最小二乗あてはめ。(α, log C, r²) を返します"""
    x = np.log(np.asarray(n_levels, dtype=float))
    y = np.log(np.asarray(variances, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(intercept), r2


def power_law_fit(table: MetricTable, method: MethodId, metric: MetricId) -> PowerLawFit:
    levels, variances = [], []
    for n in table.n_levels():
        values = table.values(method, n, metric)
        if values.size < 2:
            continue
        variance = float(np.var(values, ddof=1))
        if variance <= 0:
            raise InsufficientDataError(
                f"分散がゼロの水準があります: {method.value}, {metric.value}, n={n}")
        levels.append(n)
        variances.append(variance)
    if len(levels) < 3:
        raise InsufficientDataError(
            f"べき乗則のあてはめには3水準以上が必要です: {method.value}, {metric.value} "
            f"(利用可能な水準 {levels})")
    alpha, log_c, r2 = fit_power_law(levels, variances)
    return PowerLawFit(method=method, metric=metric, alpha=alpha, log_c=log_c, r2=r2,
                       n_levels=levels, variances=variances)


@dataclass
class MddScalingReport:
    status: str
    slope: float = float('nan')
    expected: float = float('nan')
    deviation: float = float('nan')

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def mdd_scaling_check(fit: PowerLawFit, curve: MddCurve) -> MddScalingReport:
    """log MDD の log n に対する傾きを −α/2 と比べます (記述的な比較のみ)"""
    points = [p for p in curve.points if p.mdd > 0 and p.n]
    expected = -fit.alpha / 2.0
    if len(points) < 3:
        return MddScalingReport(status="insufficient levels", expected=expected)
    slope = -fit_power_law([p.n for p in points], [p.mdd for p in points])[0]
    return MddScalingReport(status="ok", slope=slope, expected=expected,
                            deviation=slope - expected)


def convergence_rates(table: MetricTable) -> Dict[Tuple[MethodId, int], float]:
    rates = {}
    for method in MethodId:
        for n in table.n_levels():
            rate = table.convergence_rate(method, n)
            if rate is not None:
                rates[(method, n)] = rate
    return rates


@dataclass
class VarianceDecomposition:
    data: float
    algorithm: float

    @property
    def total(self) -> float:
        return self.data + self.algorithm


def variance_decomposition(values: np.ndarray) -> VarianceDecomposition:
    """
    全分散の法則による分解 (行 = データ実現, 列 = 初期化シード)

    データ由来 = 実現ごとの平均の分散、アルゴリズム由来 = 実現内分散の平均。
    どちらも不偏分散 (ddof=1) です。
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2 or values.shape[1] < 2:
        raise InsufficientDataError(f"分散分解には2実現×2シード以上が必要です: {values.shape}")
    data = float(np.var(values.mean(axis=1), ddof=1))
    algorithm = float(np.mean(np.var(values, axis=1, ddof=1)))
    return VarianceDecomposition(data=data, algorithm=algorithm)


@dataclass
class SensitivityPoint:
    R: int
    prob: float
    converged: bool
    delta: float = float('nan')


def r_sensitivity(matrix: BhmMatrix, a: MethodId, b: MethodId, hier: HierConfig, seed: int,
                  subset_sizes: Iterable[int] = (20, 30, 40, 50)) -> List[SensitivityPoint]:
    """入れ子の実現部分集合で BHM をあてはめ直し、P(A≺B) の変化を追います"""
    available = len(matrix.realizations)
    order = RngStream(seed, "r-sensitivity").generator().permutation(available)
    points: List[SensitivityPoint] = []
    for size in sorted(subset_sizes):
        if size > available:
            logger.warning(f"R={size} は利用可能な実現数 {available} を超えるためスキップします")
            continue
        columns = np.sort(order[:size])
        sub = BhmMatrix(values=matrix.values[:, columns], methods=list(matrix.methods),
                        realizations=[matrix.realizations[c] for c in columns], n=matrix.n,
                        metric=matrix.metric, n_test=matrix.n_test)
        samples = fit_bhm(sub, hier, seed)
        prob = rank_probability(samples, a, b) if samples.converged else float('nan')
        point = SensitivityPoint(R=size, prob=prob, converged=samples.converged)
        if points:
            point.delta = abs(prob - points[-1].prob)
        points.append(point)
    return points


@dataclass
class RankConsistency:
    realization: int
    tau: float


def rank_consistency(table: MetricTable, n: int,
                     first: MetricId = MetricId.CRPS,
                     second: MetricId = MetricId.INTERVAL_SCORE) -> List[RankConsistency]:
    """実現ごとに2指標の手法ランキング間の Kendall τ を計算します"""
    results = []
    methods = table.methods()
    realizations = sorted({r for m in methods for r in table.realizations(m, n, first)})
    for r in realizations:
        scores_a, scores_b = {}, {}
        for method in methods:
            if not table.convergence_flags.get((method, r, n), True):
                continue
            key_a = (method, r, n, first)
            key_b = (method, r, n, second)
            value_a = _lookup(table, *key_a)
            value_b = _lookup(table, *key_b)
            if value_a is not None and value_b is not None:
                scores_a[method] = value_a
                scores_b[method] = value_b
        if len(scores_a) >= 2:
            results.append(RankConsistency(r, kendall_tau(rank_methods(scores_a),
                                                          rank_methods(scores_b))))
    return results


def _lookup(table: MetricTable, method: MethodId, r: int, n: int,
            metric: MetricId) -> Optional[float]:
    value = table.entries.get(MetricKey(method, r, n, metric))
    if value is None or not math.isfinite(value):
        return None
    return value


def summarize_tau(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return {'median': float('nan'), 'q25': float('nan'), 'q75': float('nan'), 'count': 0}
    return {'median': float(np.median(arr)), 'q25': float(np.quantile(arr, 0.25)),
            'q75': float(np.quantile(arr, 0.75)), 'count': int(arr.size)}


def summary_table(table: MetricTable, metric: MetricId) -> pd.DataFrame:
    """(手法, n) ごとの平均と標準偏差。収束したセルのみを使います"""
    rows = []
    for method in table.methods():
        for n in table.n_levels():
            present = table.realizations(method, n, metric)
            if not present:
                continue
            values = table.values(method, n, metric)
            rows.append({
                'method': method.value,
                'n': n,
                'mean': float(np.mean(values)) if values.size else float('nan'),
                'sd': float(np.std(values, ddof=1)) if values.size > 1 else float('nan'),
                'count': int(values.size),
                'unconverged': len(present) - int(values.size),
            })
    return pd.DataFrame(rows, columns=['method', 'n', 'mean', 'sd', 'count', 'unconverged'])


def kl_sensitivity(scores: Dict[float, Sequence[float]]) -> pd.DataFrame:
    rows = []
    for weight in sorted(scores):
        values = np.asarray(scores[weight], dtype=float)
        values = values[np.isfinite(values)]
        rows.append({
            'kl_weight': weight,
            'mean_crps': float(np.mean(values)) if values.size else float('nan'),
            'sd_crps': float(np.std(values, ddof=1)) if values.size > 1 else float('nan'),
            'count': int(values.size),
        })
    return pd.DataFrame(rows, columns=['kl_weight', 'mean_crps', 'sd_crps', 'count'])
