"""
ベイズ階層比較モデルと MCMC エンジン

- ガウス BHM: y_{m,i} ~ N(μ_m + γ_i, σ_m²), μ_m ~ N(μ₀, τ²), γ_i ~ N(0, σ_γ²)
- ベータ二項モデル: k_{m,i} ~ BetaBinomial(N_test, μ_m, φ)

サンプラーは Metropolis-within-Gibbs です。位置パラメータ (μ, γ, μ₀) は
ガウス完全条件付き分布から一括で引き、尺度パラメータは対数スケールの
適応的ランダムウォーク Metropolis で更新します。収束診断 (順位正規化
split-R̂ とバルク ESS) は arviz で計算します。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import arviz as az
import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import betaln, expit
from scipy.stats import norm

from models import (
    BhmMatrix,
    HierConfig,
    InsufficientDataError,
    MethodId,
    MetricId,
    RngStream,
    UnconvergedPosteriorError,
)

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.01
ESS_THRESHOLD = 400.0
QUANTILE_LEVELS = (0.05, 0.25, 0.50, 0.75, 0.95)
SUMMARY_NAMES = ['mean', 'sd', 'q05', 'q25', 'q50', 'q75', 'q95']


def mu_name(method: MethodId) -> str:
    return f"mu[{method.value}]"


def sigma_name(method: MethodId) -> str:
    return f"sigma[{method.value}]"


def gamma_name(realization: int) -> str:
    return f"gamma[{realization}]"


# ---------------------------------------------------------------------------
# 収束診断
# ---------------------------------------------------------------------------

@dataclass
class Diagnostics:
    r_hat: Dict[str, float] = field(default_factory=dict)
    ess: Dict[str, float] = field(default_factory=dict)
    degenerate: List[str] = field(default_factory=list)

    @property
    def max_r_hat(self) -> float:
        values = list(self.r_hat.values())
        if not values or any(math.isnan(v) for v in values):
            return float('nan')
        return max(values)

    @property
    def min_ess(self) -> float:
        return min(self.ess.values()) if self.ess else float('nan')

    @property
    def passed(self) -> bool:
        max_r_hat = self.max_r_hat
        min_ess = self.min_ess
        if math.isnan(max_r_hat) or math.isnan(min_ess):
            return False
        return max_r_hat <= RHAT_THRESHOLD and min_ess >= ESS_THRESHOLD

    def to_dict(self) -> Dict[str, Any]:
        return {
            'r_hat': {k: _json_float(v) for k, v in self.r_hat.items()},
            'ess': {k: _json_float(v) for k, v in self.ess.items()},
            'degenerate': list(self.degenerate),
            'max_r_hat': _json_float(self.max_r_hat),
            'min_ess': _json_float(self.min_ess),
            'passed': self.passed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Diagnostics':
        return cls(
            r_hat={k: _from_json_float(v) for k, v in data.get('r_hat', {}).items()},
            ess={k: _from_json_float(v) for k, v in data.get('ess', {}).items()},
            degenerate=list(data.get('degenerate', [])),
        )


def _json_float(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else float(value)


def _from_json_float(value: Optional[float]) -> float:
    return float('nan') if value is None else float(value)


def compute_diagnostics(draws: Dict[str, np.ndarray], exclude: Optional[List[str]] = None) -> Diagnostics:
    """全チェーンで値が一定のパラメータは ESS=0, R̂=NaN とし縮退フラグを立てます"""
    diagnostics = Diagnostics()
    skip = set(exclude or [])
    for name, values in draws.items():
        if name in skip:
            continue
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 2:
            raise ValueError(f"診断には2本以上のチェーンが必要です: {name} {values.shape}")
        if values.shape[1] < 4:
            raise ValueError(f"チェーンが短すぎます: {name} ({values.shape[1]} draws)")
        if not np.all(np.isfinite(values)) or np.ptp(values) == 0:
            diagnostics.r_hat[name] = float('nan')
            diagnostics.ess[name] = 0.0
            diagnostics.degenerate.append(name)
            continue
        # (chain, draw) の2次元配列を渡すと arviz はスカラーを返す
        diagnostics.r_hat[name] = float(az.rhat(values, method="rank"))
        diagnostics.ess[name] = float(az.ess(values, method="bulk"))
    return diagnostics


# ---------------------------------------------------------------------------
# 事後サンプル
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSamples:
    model: str
    methods: List[MethodId]
    draws: Dict[str, np.ndarray]
    diagnostics: Diagnostics
    realizations: List[int] = field(default_factory=list)
    metric: Optional[MetricId] = None
    n: Optional[int] = None
    n_test: Optional[int] = None
    fixed: List[str] = field(default_factory=list)
    acceptance: Dict[str, float] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.diagnostics.passed

    @property
    def chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def draws_per_chain(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    def require_converged(self) -> 'PosteriorSamples':
        if not self.converged:
            raise UnconvergedPosteriorError(
                f"収束診断に不合格の事後サンプルは使用できません "
                f"({self.metric.value if self.metric else '-'}, n={self.n}, "
                f"max R̂={self.diagnostics.max_r_hat:.4f}, min ESS={self.diagnostics.min_ess:.0f})")
        return self

    def flat(self, name: str) -> np.ndarray:
        return self.draws[name].reshape(-1)

    def mu(self, method: MethodId) -> np.ndarray:
        return self.flat(mu_name(method))

    def sigma(self, method: MethodId) -> np.ndarray:
        return self.flat(sigma_name(method))

    def summary(self) -> pd.DataFrame:
        rows = []
        for name, values in self.draws.items():
            flat = values.reshape(-1)
            rows.append({
                'parameter': name,
                'mean': float(np.mean(flat)),
                'sd': float(np.std(flat, ddof=1)),
                'q05': float(np.quantile(flat, 0.05)),
                'q95': float(np.quantile(flat, 0.95)),
                'r_hat': self.diagnostics.r_hat.get(name, float('nan')),
                'ess': self.diagnostics.ess.get(name, float('nan')),
            })
        return pd.DataFrame(rows)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for name, values in self.draws.items():
            chains, per_chain = values.shape
            frames.append(pd.DataFrame({
                'chain': np.repeat(np.arange(chains), per_chain),
                'draw': np.tile(np.arange(per_chain), chains),
                'parameter': name,
                'value': values.reshape(-1),
            }))
        return pd.concat(frames, ignore_index=True)

    def metadata(self) -> Dict[str, Any]:
        return {
            'model': self.model,
            'methods': [m.value for m in self.methods],
            'realizations': list(self.realizations),
            'metric': self.metric.value if self.metric else None,
            'n': self.n,
            'n_test': self.n_test,
            'fixed': list(self.fixed),
            'acceptance': self.acceptance,
            'diagnostics': self.diagnostics.to_dict(),
        }

    @classmethod
    def from_frame(cls, df: pd.DataFrame, metadata: Dict[str, Any]) -> 'PosteriorSamples':
        draws: Dict[str, np.ndarray] = {}
        for name in pd.unique(df['parameter']):
            part = df[df['parameter'] == name]
            chains = int(part['chain'].max()) + 1
            values = np.empty((chains, int(part['draw'].max()) + 1))
            values[part['chain'].to_numpy(), part['draw'].to_numpy()] = part['value'].to_numpy()
            draws[str(name)] = values
        return cls(
            model=metadata['model'],
            methods=[MethodId.parse(m) for m in metadata['methods']],
            draws=draws,
            diagnostics=Diagnostics.from_dict(metadata.get('diagnostics', {})),
            realizations=[int(r) for r in metadata.get('realizations', [])],
            metric=MetricId.parse(metadata['metric']) if metadata.get('metric') else None,
            n=metadata.get('n'),
            n_test=metadata.get('n_test'),
            fixed=list(metadata.get('fixed', [])),
            acceptance=dict(metadata.get('acceptance', {})),
        )


# ---------------------------------------------------------------------------
# 適応的ランダムウォーク
# ---------------------------------------------------------------------------

class AdaptiveStep:
    def __init__(self, target: float = 0.44, initial: float = 0.5):
        self.target = target
        self.log_step = math.log(initial)
        self.accepted = 0
        self.proposed = 0

    @property
    def step(self) -> float:
        return math.exp(self.log_step)

    def propose(self, current: float, rng: np.random.Generator) -> float:
        return current + self.step * rng.standard_normal()

    def record(self, accepted: bool, iteration: int, adapting: bool) -> None:
        if adapting:
            self.log_step += (float(accepted) - self.target) / (iteration + 1) ** 0.6
        else:
            self.proposed += 1
            self.accepted += int(accepted)

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float('nan')


def _metropolis(current: float, log_target, step: AdaptiveStep, rng: np.random.Generator,
                iteration: int, adapting: bool) -> float:
    proposal = step.propose(current, rng)
    log_ratio = log_target(proposal) - log_target(current)
    accepted = math.log(rng.random()) < log_ratio
    step.record(accepted, iteration, adapting)
    return proposal if accepted else current


def _log_scale_target(log_scale: float, count: int, sum_sq: float) -> float:
    # HalfNormal(1) 事前分布 + 正規尤度 + 対数変換のヤコビアン
    return (-count * log_scale - 0.5 * sum_sq * math.exp(-2.0 * log_scale)
            - 0.5 * math.exp(2.0 * log_scale) + log_scale)


# ---------------------------------------------------------------------------
# ガウス BHM
# ---------------------------------------------------------------------------

@dataclass
class FixedHyperparameters:
    sigma: np.ndarray
    tau: float
    mu0: float


@dataclass
class GaussianBhmSpec:
    y: np.ndarray
    methods: List[MethodId]
    realizations: List[int]
    standardize: bool = True
    fixed: Optional[FixedHyperparameters] = None
    metric: Optional[MetricId] = None
    n: Optional[int] = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float)
        M, R = self.y.shape
        if M < 2 or R < 2:
            raise InsufficientDataError(f"BHM には2手法・2実現以上が必要です (手法={M}, 実現={R})")
        if len(self.methods) != M or len(self.realizations) != R:
            raise ValueError("観測行列の形状と手法・実現のラベル数が一致しません")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("観測行列に有限でない値があります")

    @classmethod
    def from_matrix(cls, matrix: BhmMatrix, standardize: bool = True) -> 'GaussianBhmSpec':
        return cls(matrix.values, list(matrix.methods), list(matrix.realizations),
                   standardize=standardize, metric=matrix.metric, n=matrix.n)


def _draw_location(y: np.ndarray, sigma: np.ndarray, tau: float, sigma_gamma: float,
                   rng: np.random.Generator, use_gamma: bool = True,
                   mu0_fixed: Optional[float] = None) -> np.ndarray:
    M, R = y.shape
    weight = 1.0 / sigma ** 2
    size = M + (R if use_gamma else 0) + (1 if mu0_fixed is None else 0)
    precision = np.zeros((size, size))
    linear = np.zeros(size)

    precision[np.arange(M), np.arange(M)] += R * weight + 1.0 / tau ** 2
    linear[:M] += weight * y.sum(axis=1)
    if use_gamma:
        g = np.arange(M, M + R)
        precision[g, g] += weight.sum() + 1.0 / sigma_gamma ** 2
        precision[:M, M:M + R] += weight[:, None]
        precision[M:M + R, :M] += weight[None, :]
        linear[M:M + R] += (weight[:, None] * y).sum(axis=0)
    if mu0_fixed is None:
        j = size - 1
        precision[j, j] += M / tau ** 2 + 1.0
        precision[:M, j] -= 1.0 / tau ** 2
        precision[j, :M] -= 1.0 / tau ** 2
    else:
        linear[:M] += mu0_fixed / tau ** 2

    chol = np.linalg.cholesky(precision)
    mean = cho_solve((chol, True), linear)
    return mean + solve_triangular(chol.T, rng.standard_normal(size), lower=False)


def _gaussian_chain(y: np.ndarray, chain: int, rng: np.random.Generator, iterations: int,
                    warmup: int, target: float, fixed: Optional[FixedHyperparameters]):
    M, R = y.shape
    scale = 1.0 + chain / 2.0
    kept = iterations - warmup
    use_gamma = fixed is None

    if fixed is None:
        sigma = np.abs(rng.standard_normal(M)) * scale + 1e-3
        tau = abs(rng.standard_normal()) * scale + 1e-3
        sigma_gamma = abs(rng.standard_normal()) * scale + 1e-3
        mu0: Optional[float] = None
    else:
        sigma = np.asarray(fixed.sigma, dtype=float)
        tau = float(fixed.tau)
        sigma_gamma = 1.0
        mu0 = float(fixed.mu0)

    out_mu = np.empty((kept, M))
    out_gamma = np.empty((kept, R))
    out_mu0 = np.empty(kept)
    out_sigma = np.empty((kept, M))
    out_tau = np.empty(kept)
    out_sigma_gamma = np.empty(kept)

    sigma_steps = [AdaptiveStep(target) for _ in range(M)]
    tau_step = AdaptiveStep(target)
    sg_step = AdaptiveStep(target)

    for it in range(iterations):
        adapting = it < warmup
        theta = _draw_location(y, sigma, tau, sigma_gamma, rng, use_gamma, mu0)
        mu = theta[:M]
        gamma = theta[M:M + R] if use_gamma else np.zeros(R)
        current_mu0 = theta[-1] if fixed is None else mu0

        if fixed is None:
            resid = y - mu[:, None] - gamma[None, :]
            for m in range(M):
                ss = float(np.sum(resid[m] ** 2))
                new = _metropolis(math.log(sigma[m]), lambda s: _log_scale_target(s, R, ss),
                                  sigma_steps[m], rng, it, adapting)
                sigma[m] = math.exp(new)
            ss_tau = float(np.sum((mu - current_mu0) ** 2))
            tau = math.exp(_metropolis(math.log(tau), lambda s: _log_scale_target(s, M, ss_tau),
                                       tau_step, rng, it, adapting))
            ss_gamma = float(np.sum(gamma ** 2))
            sigma_gamma = math.exp(_metropolis(
                math.log(sigma_gamma), lambda s: _log_scale_target(s, R, ss_gamma),
                sg_step, rng, it, adapting))

        if not adapting:
            k = it - warmup
            out_mu[k] = mu
            out_gamma[k] = gamma
            out_mu0[k] = current_mu0
            out_sigma[k] = sigma
            out_tau[k] = tau
            out_sigma_gamma[k] = sigma_gamma

    acceptance = {f"sigma{m}": s.rate for m, s in enumerate(sigma_steps)}
    acceptance.update({'tau': tau_step.rate, 'sigma_gamma': sg_step.rate})
    return out_mu, out_gamma, out_mu0, out_sigma, out_tau, out_sigma_gamma, acceptance


def fit_gaussian_bhm(spec: GaussianBhmSpec, seed: int, chains: int = 4, iterations: int = 2000,
                     warmup: int = 1000, target_acceptance: float = 0.44) -> PosteriorSamples:
    """
    ガウス BHM をあてはめます

    standardize が有効な場合は全体平均・標準偏差で標準化してからあてはめ、
    事後サンプルを元の尺度に戻します。固定ハイパーパラメータモードでは
    σ_m・τ・μ₀ を固定し、実現切片 γ_i を使わずに元の尺度であてはめます。
    """
    if chains < 2:
        raise ValueError(f"チェーン数は2以上である必要があります: {chains}")
    if not 0 <= warmup < iterations:
        raise ValueError(f"warmup が不正です: warmup={warmup}, iterations={iterations}")
    fixed = spec.fixed
    center, spread = 0.0, 1.0
    if spec.standardize and fixed is None:
        center = float(np.mean(spec.y))
        spread = float(np.std(spec.y, ddof=1))
        if spread == 0:
            raise InsufficientDataError("観測値の分散がゼロのため BHM をあてはめられません")
    y = (spec.y - center) / spread

    results = []
    stream = RngStream(seed, "gaussian-bhm")
    for c in range(chains):
        rng = stream.child(f"chain{c}").generator()
        results.append(_gaussian_chain(y, c, rng, iterations, warmup, target_acceptance, fixed))

    draws: Dict[str, np.ndarray] = {}
    for m, method in enumerate(spec.methods):
        draws[mu_name(method)] = np.stack([center + spread * r[0][:, m] for r in results])
    for m, method in enumerate(spec.methods):
        draws[sigma_name(method)] = np.stack([spread * r[3][:, m] for r in results])
    draws['mu0'] = np.stack([center + spread * r[2] for r in results])
    draws['tau'] = np.stack([spread * r[4] for r in results])
    fixed_names: List[str] = []
    if fixed is None:
        for i, realization in enumerate(spec.realizations):
            draws[gamma_name(realization)] = np.stack([spread * r[1][:, i] for r in results])
        draws['sigma_gamma'] = np.stack([spread * r[5] for r in results])
    else:
        fixed_names = [sigma_name(m) for m in spec.methods] + ['mu0', 'tau']

    acceptance = {k: float(np.nanmean([r[6][k] for r in results])) for k in results[0][6]}
    diagnostics = compute_diagnostics(draws, exclude=fixed_names)
    samples = PosteriorSamples(
        model="gaussian", methods=list(spec.methods), draws=draws, diagnostics=diagnostics,
        realizations=list(spec.realizations), metric=spec.metric, n=spec.n,
        fixed=fixed_names, acceptance=acceptance,
    )
    _log_fit(samples)
    return samples


def _log_fit(samples: PosteriorSamples) -> None:
    label = f"{samples.metric.value if samples.metric else '-'}, n={samples.n}"
    if samples.converged:
        logger.info(f"BHM ({samples.model}) 収束: {label}, max R̂={samples.diagnostics.max_r_hat:.4f}, "
                    f"min ESS={samples.diagnostics.min_ess:.0f}")
    else:
        logger.warning(f"BHM ({samples.model}) が収束診断に不合格です: {label}, "
                       f"max R̂={samples.diagnostics.max_r_hat}, min ESS={samples.diagnostics.min_ess}, "
                       f"縮退={samples.diagnostics.degenerate}")


# ---------------------------------------------------------------------------
# ベータ二項モデル
# ---------------------------------------------------------------------------

@dataclass
class BetaBinomSpec:
    k: np.ndarray
    n_test: int
    methods: List[MethodId]
    realizations: List[int]
    phi_scale: float = 100.0
    mu0_prior_sd: float = 2.0
    n: Optional[int] = None

    def __post_init__(self) -> None:
        self.k = np.asarray(self.k, dtype=float)
        M, R = self.k.shape
        if M < 2 or R < 2:
            raise InsufficientDataError(f"BHM には2手法・2実現以上が必要です (手法={M}, 実現={R})")
        if self.n_test < 1 or np.any(self.k < 0) or np.any(self.k > self.n_test):
            raise ValueError(f"被覆数が範囲外です (N_test={self.n_test})")

    @classmethod
    def from_matrix(cls, matrix: BhmMatrix, phi_scale: float = 100.0) -> 'BetaBinomSpec':
        if matrix.n_test is None:
            raise ValueError("ベータ二項モデルには N_test が必要です")
        return cls(matrix.values, int(matrix.n_test), list(matrix.methods),
                   list(matrix.realizations), phi_scale=phi_scale, n=matrix.n)


def _betabinom_loglik(k: np.ndarray, n_test: int, mu: float, phi: float) -> float:
    a = mu * phi
    b = (1.0 - mu) * phi
    return float(np.sum(betaln(k + a, n_test - k + b) - betaln(a, b)))


def _betabinom_chain(spec: BetaBinomSpec, chain: int, rng: np.random.Generator,
                     iterations: int, warmup: int, target: float):
    M, _ = spec.k.shape
    scale = 1.0 + chain / 2.0
    kept = iterations - warmup
    mu0 = rng.standard_normal() * spec.mu0_prior_sd * scale
    tau = abs(rng.standard_normal()) * scale + 1e-2
    logit_mu = mu0 + tau * rng.standard_normal(M)
    log_phi = math.log(abs(rng.standard_normal()) * spec.phi_scale * scale + 1.0)

    out_mu = np.empty((kept, M))
    out_phi = np.empty(kept)
    out_mu0 = np.empty(kept)
    out_tau = np.empty(kept)
    mu_steps = [AdaptiveStep(target) for _ in range(M)]
    phi_step = AdaptiveStep(target)
    tau_step = AdaptiveStep(target)

    def log_mu_target(m: int, value: float, phi: float) -> float:
        return (_betabinom_loglik(spec.k[m], spec.n_test, float(expit(value)), phi)
                - 0.5 * ((value - mu0) / tau) ** 2)

    def log_phi_target(value: float) -> float:
        phi = math.exp(value)
        loglik = sum(_betabinom_loglik(spec.k[m], spec.n_test, float(expit(logit_mu[m])), phi)
                     for m in range(M))
        return loglik - 0.5 * (phi / spec.phi_scale) ** 2 + value

    for it in range(iterations):
        adapting = it < warmup
        phi = math.exp(log_phi)
        for m in range(M):
            logit_mu[m] = _metropolis(logit_mu[m], lambda v: log_mu_target(m, v, phi),
                                      mu_steps[m], rng, it, adapting)
        log_phi = _metropolis(log_phi, log_phi_target, phi_step, rng, it, adapting)

        # μ₀ は正規-正規の共役更新
        precision = M / tau ** 2 + 1.0 / spec.mu0_prior_sd ** 2
        mean = (np.sum(logit_mu) / tau ** 2) / precision
        mu0 = mean + rng.standard_normal() / math.sqrt(precision)

        ss = float(np.sum((logit_mu - mu0) ** 2))
        tau = math.exp(_metropolis(math.log(tau), lambda s: _log_scale_target(s, M, ss),
                                   tau_step, rng, it, adapting))
        if not adapting:
            k = it - warmup
            out_mu[k] = expit(logit_mu)
            out_phi[k] = math.exp(log_phi)
            out_mu0[k] = mu0
            out_tau[k] = tau

    acceptance = {f"mu{m}": s.rate for m, s in enumerate(mu_steps)}
    acceptance.update({'phi': phi_step.rate, 'tau': tau_step.rate})
    return out_mu, out_phi, out_mu0, out_tau, acceptance


def fit_beta_binom(spec: BetaBinomSpec, seed: int, chains: int = 4, iterations: int = 2000,
                   warmup: int = 1000, target_acceptance: float = 0.44) -> PosteriorSamples:
    if chains < 2:
        raise ValueError(f"チェーン数は2以上である必要があります: {chains}")
    stream = RngStream(seed, "beta-binom")
    results = [_betabinom_chain(spec, c, stream.child(f"chain{c}").generator(),
                                iterations, warmup, target_acceptance)
               for c in range(chains)]
    draws: Dict[str, np.ndarray] = {}
    for m, method in enumerate(spec.methods):
        draws[mu_name(method)] = np.stack([r[0][:, m] for r in results])
    draws['phi'] = np.stack([r[1] for r in results])
    draws['mu0'] = np.stack([r[2] for r in results])
    draws['tau'] = np.stack([r[3] for r in results])
    acceptance = {k: float(np.nanmean([r[4][k] for r in results])) for k in results[0][4]}
    samples = PosteriorSamples(
        model="betabinom", methods=list(spec.methods), draws=draws,
        diagnostics=compute_diagnostics(draws), realizations=list(spec.realizations),
        metric=MetricId.PICP, n=spec.n, n_test=spec.n_test, acceptance=acceptance,
    )
    _log_fit(samples)
    return samples


def fit_bhm(matrix: BhmMatrix, hier: HierConfig, seed: int) -> PosteriorSamples:
    if matrix.metric == MetricId.PICP:
        return fit_beta_binom(BetaBinomSpec.from_matrix(matrix, hier.phi_scale), seed,
                              hier.chains, hier.iterations, hier.warmup, hier.target_acceptance)
    spec = GaussianBhmSpec.from_matrix(matrix, standardize=hier.standardize)
    return fit_gaussian_bhm(spec, seed, hier.chains, hier.iterations, hier.warmup,
                            hier.target_acceptance)


# ---------------------------------------------------------------------------
# 閉形式オラクル
# ---------------------------------------------------------------------------

@dataclass
class ClosedFormPosterior:
    mean: np.ndarray
    variance: np.ndarray
    shrinkage: np.ndarray


def closed_form_posterior(y_bar, sigma, tau: float, mu0: float, R: int) -> ClosedFormPosterior:
    """
    ハイパーパラメータ既知のときの μ_m の事後分布

    V_m = (R/σ_m² + 1/τ²)⁻¹, λ_m = (R/σ_m²)·V_m, μ̂_m = λ_m ȳ_m + (1−λ_m) μ₀
    """
    y_bar = np.asarray(y_bar, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y_bar.shape)
    if np.any(sigma <= 0) or tau <= 0:
        raise ValueError("σ_m と τ は正である必要があります")
    data_precision = R / sigma ** 2
    variance = 1.0 / (data_precision + 1.0 / tau ** 2)
    shrinkage = data_precision * variance
    mean = shrinkage * y_bar + (1.0 - shrinkage) * mu0
    return ClosedFormPosterior(mean=mean, variance=variance, shrinkage=shrinkage)


def closed_form_rank_prob(mean_a: float, var_a: float, mean_b: float, var_b: float) -> float:
    if var_a <= 0 or var_b <= 0:
        raise ValueError("事後分散は正である必要があります")
    return float(norm.cdf((mean_b - mean_a) / math.sqrt(var_a + var_b)))


# ---------------------------------------------------------------------------
# 事後予測チェック
# ---------------------------------------------------------------------------

@dataclass
class PpcSummary:
    observed: Dict[str, float]
    replicates: pd.DataFrame
    tail_observed: float
    tail_replicates: np.ndarray
    tail_p_value: float
    tail_flag: bool
    band_hits: int
    replicate_values: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        observed = pd.DataFrame([{'replicate': 'observed', **self.observed,
                                  'tail_fraction': self.tail_observed}])
        replicates = self.replicates.copy()
        replicates.insert(0, 'replicate', [str(i) for i in range(len(replicates))])
        replicates['tail_fraction'] = self.tail_replicates
        return pd.concat([observed, replicates], ignore_index=True)


def _summaries(values: np.ndarray) -> Dict[str, float]:
    flat = np.asarray(values, dtype=float).reshape(-1)
    quantiles = np.quantile(flat, QUANTILE_LEVELS)
    return dict(zip(SUMMARY_NAMES, [float(flat.mean()), float(flat.std(ddof=1))]
                    + [float(q) for q in quantiles]))


def _replicate_gaussian(samples: PosteriorSamples, index: int, shape, rng) -> np.ndarray:
    M, R = shape
    mu = np.array([samples.mu(m)[index] for m in samples.methods])
    sigma = np.array([samples.sigma(m)[index] for m in samples.methods])
    if samples.realizations and gamma_name(samples.realizations[0]) in samples.draws:
        gamma = np.array([samples.flat(gamma_name(r))[index] for r in samples.realizations])
    else:
        gamma = np.zeros(R)
    return mu[:, None] + gamma[None, :] + sigma[:, None] * rng.standard_normal((M, R))


def _replicate_betabinom(samples: PosteriorSamples, index: int, shape, rng) -> np.ndarray:
    M, R = shape
    mu = np.array([samples.mu(m)[index] for m in samples.methods])
    phi = samples.flat('phi')[index]
    p = rng.beta(np.repeat((mu * phi)[:, None], R, axis=1),
                 np.repeat(((1.0 - mu) * phi)[:, None], R, axis=1))
    return rng.binomial(samples.n_test, p).astype(float)


def posterior_predictive_check(samples: PosteriorSamples, observed: np.ndarray, seed: int,
                               replicates: int = 50) -> PpcSummary:
    """
    事後予測分布から replicates 個の複製データを引き、要約統計を比較します

    裾の不一致統計量は、セルごとの複製平均から複製標準偏差の3倍を超えて
    離れた点の割合です。観測値の割合が複製の95%以上を上回る場合
    (p < 0.05) にフラグを立てます。
    """
    samples.require_converged()
    observed = np.asarray(observed, dtype=float)
    rng = RngStream(seed, "ppc").generator()
    total = samples.chains * samples.draws_per_chain
    indices = rng.choice(total, size=replicates, replace=total < replicates)
    replicate = _replicate_betabinom if samples.model == "betabinom" else _replicate_gaussian
    reps = np.stack([replicate(samples, int(i), observed.shape, rng) for i in indices])

    center = reps.mean(axis=0)
    spread = reps.std(axis=0, ddof=1)
    spread = np.where(spread > 0, spread, np.finfo(float).eps)

    def tail_fraction(values: np.ndarray) -> float:
        return float(np.mean(np.abs(values - center) > 3.0 * spread))

    tail_obs = tail_fraction(observed)
    tail_reps = np.array([tail_fraction(r) for r in reps])
    p_value = float(np.mean(tail_reps >= tail_obs))

    rep_frame = pd.DataFrame([_summaries(r) for r in reps], columns=SUMMARY_NAMES)
    obs_summary = _summaries(observed)
    hits = 0
    for name in SUMMARY_NAMES[2:]:
        low, high = np.quantile(rep_frame[name], [0.05, 0.95])
        hits += int(low <= obs_summary[name] <= high)

    flag = p_value < 0.05
    if flag:
        logger.warning(f"事後予測チェックで裾の不一致を検出しました (p={p_value:.3f}, "
                       f"観測={tail_obs:.3f})")
    return PpcSummary(observed=obs_summary, replicates=rep_frame, tail_observed=tail_obs,
                      tail_replicates=tail_reps, tail_p_value=p_value, tail_flag=flag,
                      band_hits=hits, replicate_values=reps)
