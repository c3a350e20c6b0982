import copy
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from dataset_manager import Dataset
from hier_model import PosteriorSamples
from models import (
    ConfigError,
    ExperimentConfig,
    MethodId,
    MetricId,
    MetricTable,
    MissingArtifactError,
    RunManifest,
)

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
HISTORY_FILE = "manifest_history.jsonl"
METRIC_TABLE_FILE = "metric_table.csv"
DATASET_FILE = "dataset.npz"


class DataManager:
    """
    実行ディレクトリ内の成果物の読み書きを担当します

    ディレクトリ名は設定ハッシュの先頭12文字から決まり、同じ設定の再実行は
    同じディレクトリを再利用します。
    """

    def __init__(self, output_dir: str = "runs", run_dir: Optional[str] = None):
        self.output_dir = output_dir
        self.run_dir = run_dir

    def run_dir_for(self, config: ExperimentConfig) -> str:
        return os.path.join(self.output_dir, f"run-{config.config_hash()[:12]}")

    def use_run(self, config: ExperimentConfig) -> str:
        if self.run_dir is None:
            self.run_dir = self.run_dir_for(config)
        self.ensure_directories()
        return self.run_dir

    def path(self, *parts: str) -> str:
        if self.run_dir is None:
            raise MissingArtifactError("実行ディレクトリが設定されていません (run を先に実行してください)")
        return os.path.join(self.run_dir, *parts)

    def ensure_directories(self) -> None:
        for sub in ("cells", "fits", "analysis", "report", "debug"):
            os.makedirs(self.path(sub), exist_ok=True)

    # --- 設定 -------------------------------------------------------------

    def get_default_settings(self) -> Dict[str, Any]:
        return ExperimentConfig().to_dict()

    def load_config(self, config_path: Optional[str] = None) -> ExperimentConfig:
        """既定値にファイルの値を重ねて ExperimentConfig を作ります"""
        settings = self.get_default_settings()
        if config_path:
            try:
                with open(config_path, 'r', encoding='utf-8') as file:
                    user_settings = json.load(file)
            except FileNotFoundError as e:
                raise ConfigError(f"設定ファイルが見つかりません: {config_path}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"設定ファイルの形式が正しくありません: {config_path}: {e}") from e
            if not isinstance(user_settings, dict):
                raise ConfigError(f"設定ファイルの最上位はオブジェクトである必要があります: {config_path}")
            settings = _merge(settings, user_settings)
        return ExperimentConfig.from_dict(settings)

    # --- マニフェスト -----------------------------------------------------

    def save_manifest(self, manifest: RunManifest) -> None:
        data = manifest.to_dict()
        with open(self.path(MANIFEST_FILE), 'w', encoding='utf-8') as file:
            json.dump(data, file, ensure_ascii=False, indent=2, sort_keys=True)
        # 履歴は追記のみ
        with open(self.path(HISTORY_FILE), 'a', encoding='utf-8') as file:
            file.write(json.dumps(data, ensure_ascii=False, sort_keys=True) + "\n")

    def load_manifest(self) -> RunManifest:
        manifest_path = self.path(MANIFEST_FILE)
        if not os.path.exists(manifest_path):
            raise MissingArtifactError(
                f"マニフェストがありません: {manifest_path} (run ステージを実行してください)")
        with open(manifest_path, 'r', encoding='utf-8') as file:
            return RunManifest.from_dict(json.load(file))

    def manifest_history(self) -> List[Dict[str, Any]]:
        history_path = self.path(HISTORY_FILE)
        if not os.path.exists(history_path):
            return []
        with open(history_path, 'r', encoding='utf-8') as file:
            return [json.loads(line) for line in file if line.strip()]

    # --- データセット -----------------------------------------------------

    def save_dataset(self, dataset: Dataset) -> str:
        dataset_path = self.path(DATASET_FILE)
        dataset.save(dataset_path)
        return dataset_path

    def load_dataset(self) -> Optional[Dataset]:
        dataset_path = self.path(DATASET_FILE)
        if not os.path.exists(dataset_path):
            return None
        return Dataset.load(dataset_path)

    # --- セル -------------------------------------------------------------

    def cell_path(self, method: MethodId, n: int, r: int) -> str:
        return self.path("cells", f"{method.value}_n{n}_r{r:03d}.json")

    def save_cell(self, record: Dict[str, Any]) -> None:
        method = MethodId.parse(record['method'])
        target = self.cell_path(method, record['n'], record['realization'])
        tmp = target + ".tmp"
        with open(tmp, 'w', encoding='utf-8') as file:
            json.dump(record, file, ensure_ascii=False, indent=2, sort_keys=True)
        os.replace(tmp, target)

    def load_cell(self, method: MethodId, n: int, r: int, stage_key: str) -> Optional[Dict[str, Any]]:
        target = self.cell_path(method, n, r)
        if not os.path.exists(target):
            return None
        try:
            with open(target, 'r', encoding='utf-8') as file:
                record = json.load(file)
        except json.JSONDecodeError:
            logger.warning(f"壊れたセルファイルを無視します: {target}")
            return None
        if record.get('stage_key') != stage_key:
            return None
        return record

    # --- 指標テーブル -----------------------------------------------------

    def save_metric_table(self, table: MetricTable) -> str:
        table_path = self.path(METRIC_TABLE_FILE)
        table.to_dataframe().to_csv(table_path, index=False)
        return table_path

    def load_metric_table(self) -> MetricTable:
        table_path = self.path(METRIC_TABLE_FILE)
        if not os.path.exists(table_path):
            raise MissingArtifactError(
                f"指標テーブルがありません: {table_path} (run ステージを実行してください)")
        df = pd.read_csv(table_path, dtype={'covered': 'Int64', 'n_test': 'Int64'})
        return MetricTable.from_dataframe(df)

    # --- BHM あてはめ -----------------------------------------------------

    def fit_paths(self, metric: MetricId, n: int) -> Tuple[str, str]:
        stem = f"{metric.value}_n{n}"
        return self.path("fits", f"{stem}_draws.csv"), self.path("fits", f"{stem}_diagnostics.json")

    def save_fit(self, samples: PosteriorSamples, stage_key: str) -> Tuple[str, str]:
        draws_path, diag_path = self.fit_paths(samples.metric, samples.n)
        samples.to_frame().to_csv(draws_path, index=False)
        meta = samples.metadata()
        meta['stage_key'] = stage_key
        with open(diag_path, 'w', encoding='utf-8') as file:
            json.dump(meta, file, ensure_ascii=False, indent=2, sort_keys=True)
        return draws_path, diag_path

    def fit_metadata(self, metric: MetricId, n: int) -> Optional[Dict[str, Any]]:
        _, diag_path = self.fit_paths(metric, n)
        if not os.path.exists(diag_path):
            return None
        with open(diag_path, 'r', encoding='utf-8') as file:
            return json.load(file)

    def load_fit(self, metric: MetricId, n: int) -> PosteriorSamples:
        draws_path, _ = self.fit_paths(metric, n)
        meta = self.fit_metadata(metric, n)
        if meta is None or not os.path.exists(draws_path):
            raise MissingArtifactError(
                f"BHM のあてはめ結果がありません: {metric.value}, n={n} "
                f"(run ステージの fit まで実行してください)")
        return PosteriorSamples.from_frame(pd.read_csv(draws_path), meta)

    def list_fits(self) -> List[Tuple[MetricId, int]]:
        fits_dir = self.path("fits")
        if not os.path.isdir(fits_dir):
            return []
        found = []
        for filename in os.listdir(fits_dir):
            if not filename.endswith("_diagnostics.json"):
                continue
            metric_text, n_text = filename[:-len("_diagnostics.json")].rsplit("_n", 1)
            found.append((MetricId.parse(metric_text), int(n_text)))
        return sorted(found, key=lambda item: (list(MetricId).index(item[0]), item[1]))

    # --- 表・デバッグ出力 -------------------------------------------------

    def save_table(self, df: pd.DataFrame, *parts: str, index: bool = False) -> str:
        table_path = self.path(*parts)
        os.makedirs(os.path.dirname(table_path), exist_ok=True)
        df.to_csv(table_path, index=index)
        return table_path

    def dump_predictive(self, method: MethodId, n: int, r: int, records: List[Dict[str, Any]]) -> str:
        target = self.path("debug", f"predictive_{method.value}_n{n}_r{r:03d}.jsonl")
        with open(target, 'w', encoding='utf-8') as file:
            for record in records:
                file.write(json.dumps(record) + "\n")
        return target

    def dump_loss_trace(self, method: MethodId, n: int, r: int, trace: List[float]) -> str:
        target = self.path("debug", f"loss_{method.value}_n{n}_r{r:03d}.csv")
        pd.DataFrame({'epoch': range(len(trace)), 'loss': trace}).to_csv(target, index=False)
        return target


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged
