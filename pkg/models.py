"""
ベンチマークのドメインモデル定義

手法・指標の列挙型、指標テーブル、乱数ストリーム、実行マニフェスト、
実験設定をまとめたモジュールです。他のすべてのモジュールはここで定義した
型を介してデータを受け渡します。
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

SCHEMA_VERSION = 1
MASK64 = 0xFFFFFFFFFFFFFFFF


class BenchmarkError(Exception):
    """ベンチマーク全体で共通の基底例外"""


class DuplicateKeyError(BenchmarkError):
    def __init__(self, key: "MetricKey"):
        super().__init__(f"指標キーが重複しています: {key}")
        self.key = key


class InsufficientDataError(BenchmarkError):
    pass


class DatasetError(BenchmarkError):
    pass


class ConfigError(BenchmarkError):
    pass


class ConvergenceFailure(BenchmarkError):
    """学習中の損失がNaN/Infになった、またはSWAGの軌跡が発散・不安定"""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class UnconvergedPosteriorError(BenchmarkError):
    pass


class MissingArtifactError(BenchmarkError):
    pass


class MethodId(Enum):
    MAP = "MAP"
    MCD = "MCD"
    ENSEMBLE = "Ensemble"
    SWAG = "SWAG"
    BBB = "BBB"
    CP = "CP"

    @classmethod
    def parse(cls, text: str) -> "MethodId":
        for method in cls:
            if method.value.lower() == text.lower() or method.name.lower() == text.lower():
                return method
        raise ConfigError(f"未知の手法です: {text}")

    @property
    def order(self) -> int:
        return list(MethodId).index(self)


class MetricId(Enum):
    CRPS = "CRPS"
    NLL = "NLL"
    PICP = "PICP"
    MPIW = "MPIW"
    INTERVAL_SCORE = "IntervalScore"

    @classmethod
    def parse(cls, text: str) -> "MetricId":
        for metric in cls:
            if metric.value.lower() == text.lower() or metric.name.lower() == text.lower():
                return metric
        raise ConfigError(f"未知の指標です: {text}")


@dataclass(frozen=True)
class MetricKey:
    method: MethodId
    realization: int
    n: int
    metric: MetricId

    def __str__(self) -> str:
        return f"({self.method.value}, {self.realization}, {self.n}, {self.metric.value})"


def splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & MASK64
    z = value
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_realization_seed(global_seed: int, r: int, n: int, compat: bool = False) -> int:
    """
    データ実現 r・学習サイズ n 用のシードを導出します

    Args:
        global_seed (int): 全体シード (既定 42)
        r (int): 実現番号 (1始まり)
        n (int): 学習サイズ
        compat (bool): True の場合は r + n をそのまま返す互換モード

    Note:
        互換モードでは (r=2, n=29) と (r=1, n=30) が衝突します。
        既定モードは (global_seed, r, n) を個別に混合するため衝突しません。
    """
    if r < 1 or n < 1:
        raise ConfigError(f"r と n は1以上である必要があります: r={r}, n={n}")
    if compat:
        return r + n
    mixed = splitmix64(global_seed & MASK64)
    mixed = splitmix64(mixed ^ (r & MASK64))
    mixed = splitmix64(mixed ^ ((n << 20) & MASK64))
    return mixed


def derive_child_seed(seed: int, index: int) -> int:
    # index 0 は親シードそのもの (Ensemble の M=1 が MAP と一致する)
    if index == 0:
        return seed
    return splitmix64((seed ^ splitmix64(index)) & MASK64)


@dataclass(frozen=True)
class RngStream:
    seed: int
    label: str

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        label_words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        seed = self.seed & MASK64
        entropy = [seed & 0xFFFFFFFF, seed >> 32] + label_words
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")


@dataclass
class BhmMatrix:
    """BHM に渡す (手法 × 実現) の完全な長方形行列"""

    values: np.ndarray
    methods: List[MethodId]
    realizations: List[int]
    n: int
    metric: MetricId
    dropped_methods: List[MethodId] = field(default_factory=list)
    dropped_realizations: List[int] = field(default_factory=list)
    n_test: Optional[int] = None

    def column(self, method: MethodId) -> np.ndarray:
        return self.values[self.methods.index(method)]


class MetricTable:
    """
    y_{m,i} と被覆数 k_{m,i} を保持する指標テーブル

    キーは (手法, 実現, n, 指標)。並列に作られた部分テーブルは merge で
    結合し、freeze 以降は読み取り専用になります。
    """

    def __init__(self) -> None:
        self.entries: Dict[MetricKey, float] = {}
        self.covered_counts: Dict[Tuple[MethodId, int, int], Tuple[int, int]] = {}
        self.convergence_flags: Dict[Tuple[MethodId, int, int], bool] = {}
        self.frozen = False

    def _check_writable(self) -> None:
        if self.frozen:
            raise BenchmarkError("凍結済みの指標テーブルには書き込めません")

    def store_metric(self, key: MetricKey, value: float) -> "MetricTable":
        self._check_writable()
        if key in self.entries:
            raise DuplicateKeyError(key)
        self.entries[key] = float(value)
        return self

    def store_coverage(self, method: MethodId, realization: int, n: int,
                       covered: int, n_test: int) -> "MetricTable":
        if n_test < 1 or not 0 <= covered <= n_test:
            raise BenchmarkError(
                f"被覆数が不正です: k={covered}, N_test={n_test} ({method.value}, {realization}, {n})")
        self.store_metric(MetricKey(method, realization, n, MetricId.PICP), covered / n_test)
        self.covered_counts[(method, realization, n)] = (int(covered), int(n_test))
        return self

    def set_converged(self, method: MethodId, realization: int, n: int, converged: bool) -> None:
        self._check_writable()
        self.convergence_flags[(method, realization, n)] = bool(converged)

    def record_cell(self, method: MethodId, realization: int, n: int,
                    values: Dict[MetricId, float], coverage: Optional[Tuple[int, int]],
                    converged: bool) -> None:
        for metric, value in values.items():
            if metric == MetricId.PICP and coverage is not None:
                self.store_coverage(method, realization, n, coverage[0], coverage[1])
            else:
                self.store_metric(MetricKey(method, realization, n, metric), value)
        self.set_converged(method, realization, n, converged)

    def get(self, key: MetricKey) -> float:
        return self.entries[key]

    def picp_fraction(self, method: MethodId, realization: int, n: int) -> float:
        covered, n_test = self.covered_counts[(method, realization, n)]
        return covered / n_test

    def merge(self, other: "MetricTable") -> "MetricTable":
        self._check_writable()
        # 書き込み前に重複を調べ、途中まで統合された状態を残さない
        duplicates = [k for k in other.entries if k in self.entries]
        if duplicates:
            raise DuplicateKeyError(duplicates[0])
        for key, value in other.entries.items():
            self.store_metric(key, value)
        self.covered_counts.update(other.covered_counts)
        self.convergence_flags.update(other.convergence_flags)
        return self

    def freeze(self) -> "MetricTable":
        self.validate_paired()
        self.frozen = True
        return self

    def methods(self) -> List[MethodId]:
        present = {key.method for key in self.entries}
        return [m for m in MethodId if m in present]

    def metrics(self) -> List[MetricId]:
        present = {key.metric for key in self.entries}
        return [m for m in MetricId if m in present]

    def n_levels(self) -> List[int]:
        return sorted({key.n for key in self.entries})

    def realizations(self, method: MethodId, n: int, metric: MetricId) -> List[int]:
        return sorted(k.realization for k in self.entries
                      if k.method == method and k.n == n and k.metric == metric)

    def validate_paired(self) -> None:
        for n in self.n_levels():
            for metric in self.metrics():
                sets = {}
                for method in self.methods():
                    reals = self.realizations(method, n, metric)
                    if reals:
                        sets[method] = tuple(reals)
                if len(set(sets.values())) > 1:
                    detail = ", ".join(f"{m.value}:{len(r)}" for m, r in sets.items())
                    raise BenchmarkError(
                        f"n={n}, {metric.value} で実現集合が手法間で一致しません ({detail})")

    def convergence_rate(self, method: MethodId, n: int) -> Optional[float]:
        flags = [flag for (m, _, size), flag in self.convergence_flags.items()
                 if m == method and size == n]
        if not flags:
            return None
        return sum(flags) / len(flags)

    def values(self, method: MethodId, n: int, metric: MetricId,
               converged_only: bool = True) -> np.ndarray:
        result = []
        for r in self.realizations(method, n, metric):
            if converged_only and not self.convergence_flags.get((method, r, n), True):
                continue
            value = self.entries[MetricKey(method, r, n, metric)]
            if math.isfinite(value):
                result.append(value)
        return np.asarray(result, dtype=float)

    def slice_for_bhm(self, n: int, metric: MetricId, exclude_unconverged: bool = True,
                      min_rate: float = 0.80,
                      methods: Optional[Iterable[MethodId]] = None) -> BhmMatrix:
        """
        (n, 指標) の断面を BHM 用の完全な行列として取り出します

        Note:
            exclude_unconverged が有効な場合、収束率が min_rate 未満の手法は
            丸ごと除外します。残った手法のどれかが失敗した実現は行単位で
            除外し、γ_i のための対応構造を保ちます。
        """
        candidates = [m for m in (methods or self.methods())
                      if self.realizations(m, n, metric)]
        kept: List[MethodId] = []
        dropped: List[MethodId] = []
        for method in candidates:
            rate = self.convergence_rate(method, n)
            if exclude_unconverged and rate is not None and rate < min_rate:
                dropped.append(method)
            else:
                kept.append(method)

        all_reals = sorted({r for m in kept for r in self.realizations(m, n, metric)})
        rows: List[int] = []
        dropped_reals: List[int] = []
        for r in all_reals:
            usable = True
            for method in kept:
                key = MetricKey(method, r, n, metric)
                if key not in self.entries or not math.isfinite(self.entries[key]):
                    usable = False
                elif exclude_unconverged and not self.convergence_flags.get((method, r, n), True):
                    usable = False
            if usable:
                rows.append(r)
            else:
                dropped_reals.append(r)

        if len(kept) < 2 or len(rows) < 2:
            raise InsufficientDataError(
                f"BHM 用のデータが不足しています: n={n}, {metric.value}, "
                f"手法数={len(kept)}, 実現数={len(rows)} (除外手法={[m.value for m in dropped]})")

        values = np.array([[self.entries[MetricKey(m, r, n, metric)] for r in rows] for m in kept])
        n_test = None
        if metric == MetricId.PICP:
            values = np.array([[self.covered_counts[(m, r, n)][0] for r in rows] for m in kept],
                              dtype=float)
            n_test = self.covered_counts[(kept[0], rows[0], n)][1]
        return BhmMatrix(values=values, methods=kept, realizations=rows, n=n, metric=metric,
                         dropped_methods=dropped, dropped_realizations=dropped_reals,
                         n_test=n_test)

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for key in sorted(self.entries, key=lambda k: (k.method.order, k.n, k.realization,
                                                        list(MetricId).index(k.metric))):
            covered = self.covered_counts.get((key.method, key.realization, key.n))
            is_picp = key.metric == MetricId.PICP and covered is not None
            rows.append({
                'method': key.method.value,
                'realization': key.realization,
                'n': key.n,
                'metric': key.metric.value,
                'value': self.entries[key],
                'converged': self.convergence_flags.get((key.method, key.realization, key.n), True),
                'covered': covered[0] if is_picp else None,
                'n_test': covered[1] if is_picp else None,
            })
        columns = ['method', 'realization', 'n', 'metric', 'value', 'converged', 'covered', 'n_test']
        df = pd.DataFrame(rows, columns=columns)
        df['covered'] = df['covered'].astype('Int64')
        df['n_test'] = df['n_test'].astype('Int64')
        return df

    @classmethod
    def from_dataframe(cls, df: pd.DataFrame) -> 'MetricTable':
        table = cls()
        for row in df.itertuples(index=False):
            method = MethodId.parse(str(row.method))
            metric = MetricId.parse(str(row.metric))
            realization, n = int(row.realization), int(row.n)
            if metric == MetricId.PICP and not pd.isna(row.covered):
                table.store_coverage(method, realization, n, int(row.covered), int(row.n_test))
            else:
                table.store_metric(MetricKey(method, realization, n, metric), float(row.value))
            converged = row.converged
            if isinstance(converged, str):
                converged = converged.strip().lower() == 'true'
            table.convergence_flags[(method, realization, n)] = bool(converged)
        return table


@dataclass
class RunManifest:
    config_hash: str
    dataset_id: str
    n_levels: List[int]
    R: int
    seeds: Dict[str, int] = field(default_factory=dict)
    artifact_paths: Dict[str, str] = field(default_factory=dict)
    stage_keys: Dict[str, str] = field(default_factory=dict)
    stages: Dict[str, str] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))

    def record_stage(self, stage: str, key: str, status: str = "completed",
                     paths: Optional[Dict[str, str]] = None) -> None:
        self.stage_keys[stage] = key
        self.stages[stage] = status
        for name, path in (paths or {}).items():
            self.artifact_paths[name] = path

    def stage_done(self, stage: str, key: str) -> bool:
        return self.stages.get(stage) == "completed" and self.stage_keys.get(stage) == key

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': self.schema_version,
            'config_hash': self.config_hash,
            'dataset_id': self.dataset_id,
            'n_levels': list(self.n_levels),
            'R': self.R,
            'seeds': dict(self.seeds),
            'artifact_paths': dict(self.artifact_paths),
            'stage_keys': dict(self.stage_keys),
            'stages': dict(self.stages),
            'config': self.config,
            'created_at': self.created_at,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        version = data.get('schema_version', SCHEMA_VERSION)
        if version > SCHEMA_VERSION:
            raise ConfigError(f"未対応のマニフェスト schema_version です: {version}")
        return cls(
            config_hash=data['config_hash'],
            dataset_id=data.get('dataset_id', ''),
            n_levels=[int(n) for n in data.get('n_levels', [])],
            R=int(data.get('R', 0)),
            seeds={k: int(v) for k, v in data.get('seeds', {}).items()},
            artifact_paths=dict(data.get('artifact_paths', {})),
            stage_keys=dict(data.get('stage_keys', {})),
            stages=dict(data.get('stages', {})),
            config=data.get('config', {}),
            schema_version=version,
            created_at=data.get('created_at', datetime.now().isoformat(timespec='seconds')),
        )


@dataclass
class MethodConfig:
    epochs: int = 500
    bbb_epochs: int = 1000
    optimizer: str = "adam"
    swag_optimizer: str = "sgd"
    adam_lr: float = 1e-3
    weight_decay: float = 1e-5
    sgd_lr: float = 1e-2
    momentum: float = 0.9
    hidden: int = 64
    test_samples: int = 50
    dropout_rate: float = 0.10
    ensemble_size: int = 5
    kl_weight: float = 1e-3
    bbb_rho_init: float = -5.0
    swag_start_epoch: int = 300
    swag_max_spread_ratio: float = 1.0
    cp_calibration_fraction: float = 0.20
    cp_alpha: float = 0.10
    var_min: float = 1e-3
    var_max: float = 1e3
    predict_var_min: float = 1e-10
    nll_sigma_floor: float = 0.05
    crps_samples: int = 2048
    interval_level: float = 0.90

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MethodConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"MethodConfig に未知の項目があります: {sorted(unknown)}")
        return cls(**data)


@dataclass
class HierConfig:
    chains: int = 4
    iterations: int = 2000
    warmup: int = 1000
    standardize: bool = True
    phi_scale: float = 100.0
    min_convergence_rate: float = 0.80
    per_draw_mdd: bool = False
    ppc_replicates: int = 50
    target_acceptance: float = 0.44

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'HierConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"HierConfig に未知の項目があります: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: Optional[str] = None
    target: Optional[str] = None
    test_fraction: float = 0.30

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


DEFAULT_N_LEVELS = [30, 50, 100, 200, 500]
QUICK_N_LEVELS = [30, 100]
QUICK_R = 10


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_levels: List[int] = field(default_factory=lambda: list(DEFAULT_N_LEVELS))
    R: int = 50
    methods: List[MethodId] = field(default_factory=lambda: list(MethodId))
    metrics: List[MetricId] = field(default_factory=lambda: list(MetricId))
    method_config: MethodConfig = field(default_factory=MethodConfig)
    hier: HierConfig = field(default_factory=HierConfig)
    global_seed: int = 42
    seed_mode: str = "mixed"
    gamma: float = 0.80
    quick: bool = False
    workers: int = 1
    comparisons: List[Tuple[MethodId, MethodId]] = field(
        default_factory=lambda: [(MethodId.MCD, MethodId.ENSEMBLE)])
    dump_predictive: bool = False
    dump_loss_trace: bool = False

    def apply_quick(self) -> 'ExperimentConfig':
        self.quick = True
        self.R = QUICK_R
        self.n_levels = list(QUICK_N_LEVELS)
        return self

    def validate(self) -> None:
        if self.dataset.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind は synthetic か csv です: {self.dataset.kind}")
        if self.dataset.kind == "csv" and (not self.dataset.path or not self.dataset.target):
            raise ConfigError("csv データセットには path と target が必要です")
        if not 0.0 < self.dataset.test_fraction < 1.0:
            raise ConfigError(f"test_fraction が範囲外です: {self.dataset.test_fraction}")
        if not self.n_levels or any(n < 2 for n in self.n_levels):
            raise ConfigError(f"n_levels が不正です: {self.n_levels}")
        if self.R < 1:
            raise ConfigError(f"R は1以上である必要があります: {self.R}")
        if not self.methods:
            raise ConfigError("手法が1つも指定されていません")
        if self.seed_mode not in ("mixed", "compat"):
            raise ConfigError(f"seed_mode は mixed か compat です: {self.seed_mode}")
        if not 0.5 <= self.gamma < 1.0:
            raise ConfigError(f"gamma は [0.5, 1) の範囲である必要があります: {self.gamma}")
        if self.workers < 1:
            raise ConfigError(f"workers は1以上である必要があります: {self.workers}")
        cfg = self.method_config
        if not 0.0 < cfg.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate は (0,1) の範囲です: {cfg.dropout_rate}")
        if cfg.ensemble_size < 1:
            raise ConfigError(f"ensemble_size が不正です: {cfg.ensemble_size}")
        if cfg.kl_weight <= 0:
            raise ConfigError(f"kl_weight は正である必要があります: {cfg.kl_weight}")
        if not 0.0 < cfg.predict_var_min <= cfg.var_min < cfg.var_max:
            raise ConfigError(
                f"分散の範囲が不正です: predict_var_min={cfg.predict_var_min}, "
                f"var_min={cfg.var_min}, var_max={cfg.var_max}")
        if cfg.swag_max_spread_ratio < 0:
            raise ConfigError(f"swag_max_spread_ratio は0以上です: {cfg.swag_max_spread_ratio}")
        if self.hier.warmup >= self.hier.iterations or self.hier.chains < 2:
            raise ConfigError(
                f"MCMC 設定が不正です: chains={self.hier.chains}, "
                f"iterations={self.hier.iterations}, warmup={self.hier.warmup}")
        for a, b in self.comparisons:
            if a == b:
                raise ConfigError(f"同じ手法同士は比較できません: {a.value}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dataset': self.dataset.to_dict(),
            'n_levels': list(self.n_levels),
            'R': self.R,
            'methods': [m.value for m in self.methods],
            'metrics': [m.value for m in self.metrics],
            'method_config': self.method_config.to_dict(),
            'hier': self.hier.to_dict(),
            'global_seed': self.global_seed,
            'seed_mode': self.seed_mode,
            'gamma': self.gamma,
            'quick': self.quick,
            'comparisons': [[a.value, b.value] for a, b in self.comparisons],
            'dump_predictive': self.dump_predictive,
            'dump_loss_trace': self.dump_loss_trace,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"設定に未知の項目があります: {sorted(unknown)}")
        config = cls()
        if 'dataset' in data:
            try:
                config.dataset = DatasetSpec(**data['dataset'])
            except TypeError as e:
                raise ConfigError(f"dataset の設定が不正です: {e}") from e
        if 'n_levels' in data:
            config.n_levels = [int(n) for n in data['n_levels']]
        if 'R' in data:
            config.R = int(data['R'])
        if 'methods' in data:
            config.methods = [MethodId.parse(m) for m in data['methods']]
        if 'metrics' in data:
            config.metrics = [MetricId.parse(m) for m in data['metrics']]
        if 'method_config' in data:
            config.method_config = MethodConfig.from_dict(data['method_config'])
        if 'hier' in data:
            config.hier = HierConfig.from_dict(data['hier'])
        if 'comparisons' in data:
            config.comparisons = [(MethodId.parse(a), MethodId.parse(b))
                                  for a, b in data['comparisons']]
        for name in ('global_seed', 'seed_mode', 'gamma', 'quick', 'workers',
                     'dump_predictive', 'dump_loss_trace'):
            if name in data:
                setattr(config, name, data[name])
        return config

    def config_hash(self) -> str:
        # workers は結果に影響しないためハッシュに含めない
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
