import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from models import DEFAULT_N_LEVELS, DatasetError, RngStream, derive_realization_seed

logger = logging.getLogger(__name__)

SYNTHETIC_WEIGHTS = np.array([1.5, -2.0, 0.5, 1.0, -0.5, 0.3, -1.2, 0.8])
SYNTHETIC_TOTAL = 1200


def noise_scale_of(x1: np.ndarray) -> np.ndarray:
    return 0.3 + 0.5 * np.abs(x1)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    test_mask: np.ndarray
    pool_indices: np.ndarray
    dataset_id: str
    feature_names: List[str] = field(default_factory=list)
    target_name: str = "y"
    split_seed: Optional[int] = None
    stats: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def pool_size(self) -> int:
        return int(self.pool_indices.size)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.test_mask]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test_mask]

    def test_digest(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.X_test).tobytes())
        digest.update(np.ascontiguousarray(self.y_test).tobytes())
        return digest.hexdigest()

    def feasible_n_levels(self, candidates: Optional[List[int]] = None) -> List[int]:
        return [n for n in (candidates or DEFAULT_N_LEVELS) if n <= self.pool_size]

    def save(self, path: str) -> None:
        np.savez(
            path,
            X=self.X, y=self.y, test_mask=self.test_mask, pool_indices=self.pool_indices,
            dataset_id=np.array(self.dataset_id),
            feature_names=np.array(self.feature_names),
            target_name=np.array(self.target_name),
            split_seed=np.array(-1 if self.split_seed is None else self.split_seed, dtype=np.int64),
            **{f"stat_{k}": v for k, v in self.stats.items()},
        )

    @classmethod
    def load(cls, path: str) -> 'Dataset':
        with np.load(path, allow_pickle=False) as data:
            split_seed = int(data['split_seed'])
            stats = {k[len("stat_"):]: data[k] for k in data.files if k.startswith("stat_")}
            return cls(
                X=data['X'], y=data['y'], test_mask=data['test_mask'],
                pool_indices=data['pool_indices'], dataset_id=str(data['dataset_id']),
                feature_names=[str(s) for s in data['feature_names']],
                target_name=str(data['target_name']),
                split_seed=None if split_seed < 0 else split_seed,
                stats=stats,
            )


@dataclass
class Realization:
    r: int
    n: int
    train_indices: np.ndarray
    seed: int


def held_out_size(total: int, test_fraction: float) -> int:
    # 0.3 * 1030 のような境界で浮動小数の丸めに左右されないよう有理数で計算する
    return math.ceil(Fraction(str(test_fraction)) * total)


def standardize(X: np.ndarray, y: np.ndarray, pool: np.ndarray):
    x_mean = X[pool].mean(axis=0)
    x_std = X[pool].std(axis=0)
    constant = x_std == 0
    if constant.any():
        logger.warning(f"分散ゼロの特徴量を検出しました (列 {np.flatnonzero(constant).tolist()})")
        x_std = np.where(constant, 1.0, x_std)
    y_mean = y[pool].mean()
    y_std = y[pool].std()
    if y_std == 0:
        raise DatasetError("目的変数の分散がゼロです")
    stats = {'x_mean': x_mean, 'x_std': x_std,
             'y_mean': np.array(y_mean), 'y_std': np.array(y_std)}
    return (X - x_mean) / x_std, (y - y_mean) / y_std, stats


def generate_synthetic(global_seed: int = 42, n_total: int = SYNTHETIC_TOTAL,
                       noise_scale: float = 1.0, test_fraction: float = 0.30,
                       standardize_data: bool = True) -> Dataset:
    """
    異分散ノイズ σ(x) = 0.3 + 0.5|x1| を持つ合成回帰データを生成します

    末尾の 30% (既定では 360 行) を固定テスト集合、残り 840 行をプールとします。
    """
    rng = RngStream(global_seed, "synthetic").generator()
    d = SYNTHETIC_WEIGHTS.size
    X = rng.standard_normal((n_total, d))
    eps = rng.standard_normal(n_total) * noise_scale_of(X[:, 0]) * noise_scale
    y = X @ SYNTHETIC_WEIGHTS + eps

    n_test = held_out_size(n_total, test_fraction)
    test_mask = np.zeros(n_total, dtype=bool)
    test_mask[n_total - n_test:] = True
    pool = np.flatnonzero(~test_mask)

    stats: Dict[str, np.ndarray] = {}
    if standardize_data:
        X, y, stats = standardize(X, y, pool)

    return Dataset(
        X=X, y=y, test_mask=test_mask, pool_indices=pool,
        dataset_id=f"synthetic-seed{global_seed}",
        feature_names=[f"x{i + 1}" for i in range(d)],
        split_seed=global_seed, stats=stats,
    )


def load_csv_dataset(path: str, target_column: str, test_fraction: float = 0.30,
                     global_seed: int = 42) -> Dataset:
    """
    ヘッダー付きCSVを読み込み、シード付きシャッフルで固定テスト分割を作ります

    標準化にはプールの統計量のみを使います。
    """
    if not os.path.exists(path):
        raise DatasetError(f"CSVファイルが見つかりません: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DatasetError(f"CSVの解析に失敗しました: {path}: {e}") from e
    raw.columns = [c.strip() for c in raw.columns]
    if target_column not in raw.columns:
        raise DatasetError(f"目的変数の列がありません: {target_column} (列: {list(raw.columns)})")
    if len(raw) < 2:
        raise DatasetError(f"データ行が不足しています: {path}")

    numeric = raw.apply(lambda col: pd.to_numeric(col.str.strip(), errors='coerce'))
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise DatasetError(
            f"数値でないセルがあります: 行 {row + 1}, 列 '{raw.columns[col]}' "
            f"(値 '{raw.iat[row, col]}')")

    features = [c for c in raw.columns if c != target_column]
    X = numeric[features].to_numpy(dtype=float)
    y = numeric[target_column].to_numpy(dtype=float)

    total = len(y)
    order = RngStream(global_seed, "csv-split").generator().permutation(total)
    X, y = X[order], y[order]
    n_test = held_out_size(total, test_fraction)
    test_mask = np.zeros(total, dtype=bool)
    test_mask[total - n_test:] = True
    pool = np.flatnonzero(~test_mask)
    X, y, stats = standardize(X, y, pool)

    with open(path, 'rb') as file:
        file_hash = hashlib.sha256(file.read()).hexdigest()[:12]
    base = os.path.splitext(os.path.basename(path))[0]
    logger.info(f"CSVデータセットを読み込みました: {base} (N={total}, d={X.shape[1]}, プール={pool.size})")
    return Dataset(
        X=X, y=y, test_mask=test_mask, pool_indices=pool,
        dataset_id=f"csv-{base}-{file_hash}", feature_names=features,
        target_name=target_column, split_seed=global_seed, stats=stats,
    )


def draw_realizations(ds: Dataset, n: int, R: int, global_seed: int = 42,
                      compat: bool = False) -> List[Realization]:
    if R < 1:
        raise DatasetError(f"R は1以上である必要があります: {R}")
    if n > ds.pool_size:
        raise DatasetError(
            f"n={n} はプールサイズ {ds.pool_size} を超えています "
            f"(実行可能な n: {ds.feasible_n_levels()})")
    realizations = []
    for r in range(1, R + 1):
        seed = derive_realization_seed(global_seed, r, n, compat=compat)
        rng = RngStream(seed, "subsample").generator()
        indices = rng.choice(ds.pool_indices, size=n, replace=False)
        realizations.append(Realization(r=r, n=n, train_indices=indices, seed=seed))
    return realizations
