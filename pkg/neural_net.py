"""
2隠れ層の異分散 MLP (d → 64 → 64 → 2) と学習ループ

出力は平均 μ(x) と対数分散 log σ²(x)。逆伝播は手書きで、最適化には
Adam 型 (分離型 weight decay) とコサインアニーリング付きモーメンタム SGD を
用意しています。学習はすべてフルバッチです。
σ² のクランプは学習中の損失にだけ掛かり、勾配は素通しします。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from models import ConvergenceFailure

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
VAR_MIN = 1e-3
VAR_MAX = 1e3


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, hidden: int = 64) -> 'MlpParams':
        # He 初期化 (fan-in スケーリング)
        sizes = [d, hidden, hidden, 2]
        weights = [rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
                   for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
        return cls(weights, biases)

    @classmethod
    def zeros(cls, d: int, hidden: int = 64) -> 'MlpParams':
        sizes = [d, hidden, hidden, 2]
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def tensors(self) -> List[np.ndarray]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def copy(self) -> 'MlpParams':
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, flat: np.ndarray) -> 'MlpParams':
        tensors = []
        offset = 0
        for t in self.tensors():
            tensors.append(flat[offset:offset + t.size].reshape(t.shape).copy())
            offset += t.size
        return MlpParams(tensors[0::2], tensors[1::2])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass
class Dropout:
    rate: float
    rng: np.random.Generator

    def mask(self, shape: Tuple[int, ...]) -> Optional[np.ndarray]:
        if self.rate <= 0.0:
            return None
        if self.rate >= 1.0:
            return np.zeros(shape)
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


def clamp_variance(raw_logvar: np.ndarray, var_min: float = VAR_MIN,
                   var_max: float = VAR_MAX) -> np.ndarray:
    """指数変換した後の σ² を [var_min, var_max] に収めます"""
    return np.clip(np.exp(np.minimum(raw_logvar, 700.0)), var_min, var_max)


def forward_with_cache(params: MlpParams, X: np.ndarray, dropout: Optional[Dropout] = None,
                       var_min: float = VAR_MIN, var_max: float = VAR_MAX):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.input_dim:
        raise ValueError(f"入力次元が一致しません: x={X.shape[1]}, ネットワーク={params.input_dim}")
    W1, W2, W3 = params.weights
    b1, b2, b3 = params.biases

    z1 = X @ W1 + b1
    m1 = dropout.mask(z1.shape) if dropout is not None else None
    h1 = np.maximum(z1, 0.0)
    if m1 is not None:
        h1 = h1 * m1
    z2 = h1 @ W2 + b2
    m2 = dropout.mask(z2.shape) if dropout is not None else None
    h2 = np.maximum(z2, 0.0)
    if m2 is not None:
        h2 = h2 * m2
    out = h2 @ W3 + b3

    mu = out[:, 0]
    raw = out[:, 1]
    logvar = np.log(clamp_variance(raw, var_min, var_max))
    cache = {'X': X, 'z1': z1, 'h1': h1, 'm1': m1, 'z2': z2, 'h2': h2, 'm2': m2}
    return mu, logvar, cache


def forward(params: MlpParams, x: np.ndarray, dropout: Optional[Dropout] = None,
            var_min: float = VAR_MIN, var_max: float = VAR_MAX):
    """
    順伝播して (μ, log σ²) を返します

    1次元の x に対してはスカラー、2次元のバッチに対しては配列を返します。
    """
    single = np.asarray(x).ndim == 1
    mu, logvar, _ = forward_with_cache(params, x, dropout, var_min, var_max)
    if single:
        return float(mu[0]), float(logvar[0])
    return mu, logvar


def backward(params: MlpParams, cache: Dict[str, np.ndarray], dmu: np.ndarray,
             dlogvar: np.ndarray) -> MlpParams:
    W1, W2, W3 = params.weights
    # クランプは損失の値だけを抑え、対数分散の勾配はそのまま素通しする
    dout = np.stack([dmu, dlogvar], axis=1)

    dW3 = cache['h2'].T @ dout
    db3 = dout.sum(axis=0)
    dh2 = dout @ W3.T
    if cache['m2'] is not None:
        dh2 = dh2 * cache['m2']
    dz2 = dh2 * (cache['z2'] > 0)

    dW2 = cache['h1'].T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ W2.T
    if cache['m1'] is not None:
        dh1 = dh1 * cache['m1']
    dz1 = dh1 * (cache['z1'] > 0)

    dW1 = cache['X'].T @ dz1
    db1 = dz1.sum(axis=0)
    return MlpParams([dW1, dW2, dW3], [db1, db2, db3])


def gaussian_nll_loss(mu, logvar, y) -> float:
    """½(log σ² + (y−μ)²/σ²) + ½ log 2π の平均"""
    mu, logvar, y = np.asarray(mu), np.asarray(logvar), np.asarray(y)
    values = 0.5 * (logvar + (y - mu) ** 2 * np.exp(-logvar)) + 0.5 * LOG_2PI
    return float(np.mean(values))


def gaussian_nll_grad(mu: np.ndarray, logvar: np.ndarray, y: np.ndarray):
    size = mu.size
    inv_var = np.exp(-logvar)
    resid = y - mu
    dmu = -resid * inv_var / size
    dlogvar = 0.5 * (1.0 - resid ** 2 * inv_var) / size
    return dmu, dlogvar


def gaussian_nll(mu: np.ndarray, logvar: np.ndarray, y: np.ndarray):
    loss = gaussian_nll_loss(mu, logvar, y)
    dmu, dlogvar = gaussian_nll_grad(mu, logvar, y)
    return loss, dmu, dlogvar


LossFn = Callable[[np.ndarray, np.ndarray, np.ndarray], Tuple[float, np.ndarray, np.ndarray]]


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(epoch, total_epochs) / total_epochs))


class AdamOptimizer:
    def __init__(self, lr: float = 1e-3, weight_decay: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, tensors: List[np.ndarray], grads: List[np.ndarray], epoch: int = 0) -> None:
        if self.m is None or self.v is None:
            self.m = [np.zeros_like(t) for t in tensors]
            self.v = [np.zeros_like(t) for t in tensors]
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            # 分離型 weight decay は適応ステップの後に適用する
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p


class MomentumSGD:
    def __init__(self, lr: float = 1e-2, momentum: float = 0.9, total_epochs: int = 500,
                 weight_decay: float = 0.0):
        self.lr0 = lr
        self.momentum = momentum
        self.total_epochs = total_epochs
        self.weight_decay = weight_decay
        self.step_count = 0
        self.velocity: Optional[List[np.ndarray]] = None

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(self.lr0, epoch, self.total_epochs)

    def step(self, tensors: List[np.ndarray], grads: List[np.ndarray], epoch: int = 0) -> None:
        if self.velocity is None:
            self.velocity = [np.zeros_like(t) for t in tensors]
        self.step_count += 1
        # epoch は0始まり。最終エポックで学習率が下限 0 に達する
        lr = self.lr_at(epoch + 1)
        for p, g, v in zip(tensors, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= lr * v


@dataclass
class TrainResult:
    params: MlpParams
    loss_trace: List[float] = field(default_factory=list)


def train_epochs(params: MlpParams, X: np.ndarray, y: np.ndarray, optimizer, epochs: int,
                 rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0,
                 loss_fn: LossFn = gaussian_nll,
                 on_epoch: Optional[Callable[[int, MlpParams], None]] = None,
                 var_min: float = VAR_MIN, var_max: float = VAR_MAX) -> TrainResult:
    """
    フルバッチ勾配法で epochs 回更新します

    Raises:
        ConvergenceFailure: 損失またはパラメータが NaN/Inf になった場合
    """
    if len(y) == 0:
        raise ValueError("学習データが空です")
    params = params.copy()
    dropout = None
    if dropout_rate > 0.0:
        if rng is None:
            raise ValueError("ドロップアウトには乱数ストリームが必要です")
        dropout = Dropout(dropout_rate, rng)
    tensors = params.tensors()
    trace: List[float] = []
    for epoch in range(epochs):
        mu, logvar, cache = forward_with_cache(params, X, dropout, var_min, var_max)
        loss, dmu, dlogvar = loss_fn(mu, logvar, y)
        if not math.isfinite(loss):
            raise ConvergenceFailure(f"損失が有限ではありません (epoch {epoch})", epoch=epoch)
        trace.append(loss)
        grads = backward(params, cache, dmu, dlogvar).tensors()
        optimizer.step(tensors, grads, epoch)
        if not params.is_finite():
            raise ConvergenceFailure(f"パラメータが発散しました (epoch {epoch})", epoch=epoch)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return TrainResult(params=params, loss_trace=trace)
