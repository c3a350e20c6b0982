#!/usr/bin/env python3
"""
UQ 指標信頼性ベンチマーク

使い方:
    python main.py run --quick
    python main.py compare --metric CRPS --a MCD --b Ensemble
    python main.py mdd --metric CRPS --a MCD --b Ensemble
    python main.py diagnose
    python main.py report
    python main.py sensitivity --metric CRPS --n 100
    python main.py decompose --method MCD --seeds 5
    python main.py kl-sweep
"""

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from analysis import (
    kl_sensitivity,
    mdd_curve,
    pairwise_matrix,
    r_sensitivity,
    summary_table,
    variance_decomposition,
)
from data_manager import DataManager
from dataset_manager import Dataset, Realization, draw_realizations, generate_synthetic, load_csv_dataset
from hier_model import PosteriorSamples, fit_bhm, posterior_predictive_check
from models import (
    BenchmarkError,
    ConfigError,
    ConvergenceFailure,
    DatasetError,
    ExperimentConfig,
    InsufficientDataError,
    MethodConfig,
    MethodId,
    MetricId,
    MetricKey,
    MetricTable,
    MissingArtifactError,
    RunManifest,
    derive_child_seed,
    derive_realization_seed,
)
from pdf_generator import PDFGenerator
from reports import ReportBundle, ReportGenerator, rank_probability_table, wide_summary
from scoring import evaluate
from uq_methods import train_method

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIAGNOSTICS_FAILED = 1
EXIT_ERROR = 2

DEFAULT_KL_WEIGHTS = (1e-5, 1e-4, 1e-3)


def stage_key(*parts: Any) -> str:
    canonical = json.dumps(parts, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def fit_seed(global_seed: int, n: int, metric: MetricId) -> int:
    """(n, 指標) ごとの BHM あてはめ用シード"""
    base = derive_realization_seed(global_seed, 1, n)
    return derive_child_seed(base, 1000 + list(MetricId).index(metric))


@dataclass
class CellTask:
    method: MethodId
    n: int
    realization: int
    seed: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    cfg: MethodConfig
    metrics: List[MetricId]
    stage_key: str
    keep_predictive: bool = False
    keep_loss_trace: bool = False


def run_cell(task: CellTask) -> Dict[str, Any]:
    """
    1セル (手法, n, 実現) を学習して評価します

    ワーカープロセスから呼ばれるためモジュールの最上位に置いています。
    学習が発散した場合は全指標を NaN、converged=False として返します。
    """
    record: Dict[str, Any] = {
        'method': task.method.value,
        'n': task.n,
        'realization': task.realization,
        'seed': task.seed,
        'stage_key': task.stage_key,
        'converged': True,
        'values': {},
        'covered': None,
        'n_test': int(task.y_test.size),
        'error': None,
    }
    try:
        dist = train_method(task.method, task.X_train, task.y_train, task.X_test, task.seed, task.cfg)
    except ConvergenceFailure as e:
        record['converged'] = False
        record['error'] = str(e)
        record['values'] = {metric.value: float('nan') for metric in task.metrics}
        return record
    for result in evaluate(dist, task.y_test, task.metrics, task.cfg, task.seed):
        record['values'][result.metric.value] = result.value
        if result.covered is not None:
            record['covered'], record['n_test'] = result.covered
    if task.keep_predictive:
        record['predictive'] = dist.to_records()
    if task.keep_loss_trace:
        record['loss_trace'] = [float(v) for v in dist.loss_trace]
    return record


def record_into_table(table: MetricTable, record: Dict[str, Any]) -> None:
    method = MethodId.parse(record['method'])
    values = {MetricId.parse(name): float(value) for name, value in record['values'].items()}
    coverage = None
    if record.get('covered') is not None:
        coverage = (int(record['covered']), int(record['n_test']))
    table.record_cell(method, int(record['realization']), int(record['n']), values, coverage,
                      bool(record['converged']))


class BenchmarkApp:
    """
    ベンチマークの各ステージを順に実行します

    generate → cells → fits → analyze → report の各ステージは成果物と
    ステージキーを実行ディレクトリに保存するため、途中から再開できます。
    """

    def __init__(self, config: ExperimentConfig, data_manager: DataManager):
        self.config = config
        self.data_manager = data_manager
        self.manifest: Optional[RunManifest] = None
        self.dataset: Optional[Dataset] = None

    # --- 準備 ---------------------------------------------------------------

    def generate_key(self) -> str:
        return stage_key('generate', self.config.dataset.to_dict(), self.config.global_seed)

    def cells_key(self) -> str:
        return stage_key('cells', self.generate_key(), self.config.method_config.to_dict(),
                         [m.value for m in self.config.metrics], self.config.seed_mode)

    def fits_key(self) -> str:
        return stage_key('fits', self.cells_key(), self.config.hier.to_dict(),
                         [m.value for m in self.config.methods], self.config.R)

    def analyze_key(self) -> str:
        return stage_key('analyze', self.fits_key(), self.config.gamma,
                         [[a.value, b.value] for a, b in self.config.comparisons])

    def open_run(self) -> RunManifest:
        self.config.validate()
        run_dir = self.data_manager.use_run(self.config)
        config_hash = self.config.config_hash()
        try:
            manifest = self.data_manager.load_manifest()
            if manifest.config_hash != config_hash:
                logger.warning(f"設定が変わったためマニフェストを作り直します: {run_dir}")
                manifest = None
        except MissingArtifactError:
            manifest = None
        if manifest is None:
            manifest = RunManifest(config_hash=config_hash, dataset_id='',
                                   n_levels=list(self.config.n_levels), R=self.config.R,
                                   seeds={'global': self.config.global_seed},
                                   config=self.config.to_dict())
        self.manifest = manifest
        logger.info(f"実行ディレクトリ: {run_dir}")
        return manifest

    def _save_manifest(self) -> None:
        if self.manifest is not None:
            self.data_manager.save_manifest(self.manifest)

    # --- generate -----------------------------------------------------------

    def stage_generate(self) -> Dataset:
        key = self.generate_key()
        dataset = None
        if self.manifest and self.manifest.stage_done('generate', key):
            dataset = self.data_manager.load_dataset()
        if dataset is None:
            spec = self.config.dataset
            if spec.kind == 'csv':
                dataset = load_csv_dataset(spec.path, spec.target, spec.test_fraction,
                                           self.config.global_seed)
            else:
                dataset = generate_synthetic(self.config.global_seed,
                                             test_fraction=spec.test_fraction)
            path = self.data_manager.save_dataset(dataset)
            logger.info(f"データセットを作成しました: {dataset.dataset_id} "
                        f"(プール {dataset.pool_size}, テスト {dataset.y_test.size})")
            if self.manifest:
                self.manifest.dataset_id = dataset.dataset_id
                self.manifest.seeds['split'] = dataset.split_seed if dataset.split_seed is not None else -1
                self.manifest.record_stage('generate', key, paths={'dataset': path})
                self._save_manifest()
        self.dataset = dataset
        return dataset

    def feasible_levels(self, dataset: Dataset) -> List[int]:
        levels = dataset.feasible_n_levels(self.config.n_levels)
        skipped = sorted(set(self.config.n_levels) - set(levels))
        if skipped:
            logger.warning(f"プールサイズ {dataset.pool_size} を超える n をスキップします: {skipped}")
        if not levels:
            raise DatasetError(f"実行可能な n がありません: {self.config.n_levels} "
                               f"(プールサイズ {dataset.pool_size})")
        return levels

    # --- cells --------------------------------------------------------------

    def realizations(self, dataset: Dataset, n: int, R: Optional[int] = None) -> List[Realization]:
        return draw_realizations(dataset, n, R or self.config.R, self.config.global_seed,
                                 compat=self.config.seed_mode == 'compat')

    def make_task(self, dataset: Dataset, method: MethodId, realization: Realization,
                  cfg: MethodConfig, key: str, seed: Optional[int] = None,
                  metrics: Optional[Sequence[MetricId]] = None) -> CellTask:
        idx = realization.train_indices
        return CellTask(
            method=method, n=realization.n, realization=realization.r,
            seed=realization.seed if seed is None else seed,
            X_train=dataset.X[idx], y_train=dataset.y[idx],
            X_test=dataset.X_test, y_test=dataset.y_test,
            cfg=cfg, metrics=list(metrics or self.config.metrics), stage_key=key,
            keep_predictive=self.config.dump_predictive,
            keep_loss_trace=self.config.dump_loss_trace,
        )

    def execute(self, tasks: List[CellTask]) -> List[Dict[str, Any]]:
        """セルを実行します。結果の順序はタスクの順序と一致します"""
        if not tasks:
            return []
        workers = max(1, self.config.workers)
        records: List[Dict[str, Any]] = []
        step = max(1, len(tasks) // 10)
        if workers == 1:
            iterator = map(run_cell, tasks)
            for i, record in enumerate(iterator, 1):
                records.append(record)
                if i % step == 0:
                    logger.info(f"セル {i}/{len(tasks)} 完了")
            return records
        with ProcessPoolExecutor(max_workers=workers) as executor:
            for i, record in enumerate(executor.map(run_cell, tasks, chunksize=1), 1):
                records.append(record)
                if i % step == 0:
                    logger.info(f"セル {i}/{len(tasks)} 完了")
        return records

    def _persist_cell(self, record: Dict[str, Any]) -> None:
        method = MethodId.parse(record['method'])
        n, r = int(record['n']), int(record['realization'])
        predictive = record.pop('predictive', None)
        trace = record.pop('loss_trace', None)
        if predictive is not None:
            self.data_manager.dump_predictive(method, n, r, predictive)
        if trace is not None:
            self.data_manager.dump_loss_trace(method, n, r, trace)
        if not record['converged']:
            logger.warning(f"学習が収束しませんでした: {method.value}, n={n}, r={r}: {record['error']}")
        self.data_manager.save_cell(record)

    def stage_cells(self, dataset: Dataset) -> MetricTable:
        key = self.cells_key()
        records: Dict[Tuple[str, int, int], Dict[str, Any]] = {}
        pending: List[CellTask] = []
        for n in self.feasible_levels(dataset):
            for realization in self.realizations(dataset, n):
                for method in self.config.methods:
                    cached = self.data_manager.load_cell(method, n, realization.r, key)
                    if cached is not None:
                        records[(method.value, n, realization.r)] = cached
                    else:
                        pending.append(self.make_task(dataset, method, realization,
                                                      self.config.method_config, key))
        logger.info(f"セル: 再利用 {len(records)}, 新規 {len(pending)}")
        for record in self.execute(pending):
            self._persist_cell(record)
            records[(record['method'], record['n'], record['realization'])] = record

        table = MetricTable()
        for cell_key in sorted(records, key=lambda k: (MethodId.parse(k[0]).order, k[1], k[2])):
            record_into_table(table, records[cell_key])
        table.freeze()
        path = self.data_manager.save_metric_table(table)
        if self.manifest:
            self.manifest.record_stage('cells', key, paths={'metric_table': path})
            self._save_manifest()
        return table

    # --- fits ---------------------------------------------------------------

    def stage_fits(self, table: MetricTable) -> Dict[Tuple[MetricId, int], PosteriorSamples]:
        key = self.fits_key()
        fits: Dict[Tuple[MetricId, int], PosteriorSamples] = {}
        for metric in self.config.metrics:
            for n in table.n_levels():
                fit_key = stage_key(key, metric.value, n)
                meta = self.data_manager.fit_metadata(metric, n)
                if meta is not None and meta.get('stage_key') == fit_key:
                    fits[(metric, n)] = self.data_manager.load_fit(metric, n)
                    continue
                try:
                    matrix = table.slice_for_bhm(n, metric, min_rate=self.config.hier.min_convergence_rate,
                                                 methods=self.config.methods)
                    if matrix.dropped_methods:
                        logger.warning(f"収束率が低いため BHM から除外した手法 ({metric.value}, n={n}): "
                                       f"{[m.value for m in matrix.dropped_methods]}")
                    samples = fit_bhm(matrix, self.config.hier,
                                      fit_seed(self.config.global_seed, n, metric))
                except InsufficientDataError as e:
                    logger.warning(f"BHM をスキップします ({metric.value}, n={n}): {e}")
                    continue
                self.data_manager.save_fit(samples, fit_key)
                fits[(metric, n)] = samples
        if self.manifest:
            self.manifest.record_stage('fits', key)
            self._save_manifest()
        return fits

    # --- analyze ------------------------------------------------------------

    def diagnostics_frame(self, table: MetricTable,
                          fits: Dict[Tuple[MetricId, int], PosteriorSamples]) -> pd.DataFrame:
        rows = []
        for (metric, n), samples in sorted(fits.items(), key=lambda kv: (list(MetricId).index(kv[0][0]), kv[0][1])):
            row = {
                'metric': metric.value,
                'n': n,
                'model': samples.model,
                'max_r_hat': samples.diagnostics.max_r_hat,
                'min_ess': samples.diagnostics.min_ess,
                'degenerate': " ".join(samples.diagnostics.degenerate),
                'ppc_tail_p': float('nan'),
                'ppc_band_hits': None,
                'ppc_flag': None,
                'passed': samples.converged,
            }
            if samples.converged:
                ppc, _ = self.ppc_for(table, samples)
                if ppc is not None:
                    row.update({'ppc_tail_p': ppc.tail_p_value, 'ppc_band_hits': ppc.band_hits,
                                'ppc_flag': ppc.tail_flag})
            rows.append(row)
        return pd.DataFrame(rows, columns=['metric', 'n', 'model', 'max_r_hat', 'min_ess', 'degenerate',
                                           'ppc_tail_p', 'ppc_band_hits', 'ppc_flag', 'passed'])

    def ppc_for(self, table: MetricTable, samples: PosteriorSamples):
        observed = observed_matrix(table, samples)
        ppc = posterior_predictive_check(samples, observed,
                                         fit_seed(self.config.global_seed, samples.n, samples.metric),
                                         self.config.hier.ppc_replicates)
        return ppc, observed

    def posteriors_by_n(self, fits: Dict[Tuple[MetricId, int], PosteriorSamples],
                        metric: MetricId) -> Dict[int, PosteriorSamples]:
        return {n: s for (m, n), s in fits.items() if m == metric}

    def stage_analyze(self, table: MetricTable,
                      fits: Dict[Tuple[MetricId, int], PosteriorSamples]) -> pd.DataFrame:
        key = self.analyze_key()
        dm = self.data_manager
        diagnostics = self.diagnostics_frame(table, fits)
        dm.save_table(diagnostics, "analysis", "diagnostics.csv")
        for metric in self.config.metrics:
            dm.save_table(summary_table(table, metric), "analysis", f"{metric.value.lower()}_summary.csv")
            posteriors = self.posteriors_by_n(fits, metric)
            for n, samples in posteriors.items():
                if samples.converged:
                    frame = pairwise_matrix(samples).to_frame()
                    dm.save_table(frame, "analysis", f"pairwise_{metric.value}_n{n}.csv", index=True)
            for a, b in self.config.comparisons:
                dm.save_table(rank_probability_table(posteriors, a, b), "analysis",
                              f"rank_probability_{metric.value}_{a.value}_vs_{b.value}.csv")
                converged = {n: s for n, s in posteriors.items()
                             if s.converged and a in s.methods and b in s.methods}
                if converged and metric != MetricId.PICP:
                    curve = mdd_curve(converged, a, b, self.config.gamma, self.config.hier.per_draw_mdd)
                    dm.save_table(curve.to_frame(), "analysis",
                                  f"mdd_{metric.value}_{a.value}_vs_{b.value}.csv")
        if self.manifest:
            self.manifest.record_stage('analyze', key)
            self._save_manifest()
        return diagnostics

    # --- report -------------------------------------------------------------

    def stage_report(self, table: MetricTable,
                     fits: Dict[Tuple[MetricId, int], PosteriorSamples],
                     diagnostics: pd.DataFrame) -> ReportBundle:
        reports = ReportGenerator(self.data_manager)
        bundle = ReportBundle()
        bundle.extend(reports.create_metric_summaries(table, self.config.metrics))
        bundle.extend(reports.create_convergence_table(table))
        bundle.extend(reports.create_power_law_table(table))
        bundle.extend(reports.create_variance_chart(table))
        bundle.extend(reports.create_kendall_tau_chart(table))

        for (metric, n), samples in sorted(fits.items(), key=lambda kv: (list(MetricId).index(kv[0][0]), kv[0][1])):
            if not samples.converged:
                continue
            bundle.extend(reports.create_pairwise_heatmap(pairwise_matrix(samples)))
            ppc, observed = self.ppc_for(table, samples)
            bundle.extend(reports.create_ppc_chart(samples, observed, ppc))

        primary = MetricId.CRPS if MetricId.CRPS in self.config.metrics else self.config.metrics[0]
        posteriors = self.posteriors_by_n(fits, primary)
        comparisons: Dict[str, pd.DataFrame] = {}
        for a, b in self.config.comparisons:
            bundle.extend(reports.create_rank_probability_chart(posteriors, a, b))
            comparisons[f"P({a.value} < {b.value}) on {primary.value}"] = rank_probability_table(posteriors, a, b)
            converged = {n: s for n, s in posteriors.items()
                         if s.converged and a in s.methods and b in s.methods}
            if converged and primary != MetricId.PICP:
                bundle.extend(reports.create_mdd_chart(
                    mdd_curve(converged, a, b, self.config.gamma, self.config.hier.per_draw_mdd)))

        summaries = {metric.value: wide_summary(summary_table(table, metric))
                     for metric in self.config.metrics}
        sheets = {f"{name}_summary": df for name, df in summaries.items()}
        sheets['diagnostics'] = diagnostics
        excel = reports.export_excel(sheets)
        if excel:
            bundle.tables.append(excel)
        pdf_path = self.data_manager.path("report", "summary.pdf")
        if PDFGenerator().generate_summary_pdf(pdf_path, "UQ metric reliability benchmark",
                                               summaries, diagnostics, comparisons):
            bundle.plots.append(pdf_path)
        if self.manifest:
            self.manifest.record_stage('report', self.analyze_key(),
                                       paths={'report_pdf': pdf_path})
            self._save_manifest()
        logger.info(f"レポートを出力しました: 表 {len(bundle.tables)} 件, 図 {len(bundle.plots)} 件")
        return bundle

    # --- まとめて実行 -------------------------------------------------------

    def run(self) -> int:
        self.open_run()
        try:
            dataset = self.stage_generate()
            table = self.stage_cells(dataset)
            fits = self.stage_fits(table)
            diagnostics = self.stage_analyze(table, fits)
            self.stage_report(table, fits, diagnostics)
        except BenchmarkError:
            # 途中までの進捗はマニフェストに残す
            self._save_manifest()
            raise
        failed = diagnostics[~diagnostics['passed'].astype(bool)] if not diagnostics.empty else diagnostics
        if not failed.empty:
            for row in failed.itertuples(index=False):
                logger.warning(f"収束診断に不合格: {row.metric}, n={row.n}, "
                               f"max R̂={row.max_r_hat:.4f}, min ESS={row.min_ess:.0f}")
            return EXIT_DIAGNOSTICS_FAILED
        return EXIT_OK

    def load_fits(self, metric: Optional[MetricId] = None) -> Dict[Tuple[MetricId, int], PosteriorSamples]:
        found = [item for item in self.data_manager.list_fits() if metric is None or item[0] == metric]
        if not found:
            target = metric.value if metric else "全指標"
            raise MissingArtifactError(
                f"BHM のあてはめ結果がありません ({target}): "
                f"先に `python main.py run` で fits ステージまで実行してください")
        return {(m, n): self.data_manager.load_fit(m, n) for m, n in found}


def observed_matrix(table: MetricTable, samples: PosteriorSamples) -> np.ndarray:
    """あてはめに使った (手法 × 実現) の観測行列を指標テーブルから復元します"""
    rows = []
    for method in samples.methods:
        row = []
        for r in samples.realizations:
            if samples.metric == MetricId.PICP:
                row.append(table.covered_counts[(method, r, samples.n)][0])
            else:
                row.append(table.entries[MetricKey(method, r, samples.n, samples.metric)])
        rows.append(row)
    return np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------

def build_config(args: argparse.Namespace, data_manager: DataManager) -> ExperimentConfig:
    """設定ファイルを読み込み、コマンドラインの指定で上書きします"""
    config = data_manager.load_config(getattr(args, 'config', None))
    if getattr(args, 'quick', False):
        config.apply_quick()
    if getattr(args, 'seed', None) is not None:
        config.global_seed = args.seed
    if getattr(args, 'workers', None) is not None:
        config.workers = args.workers
    if getattr(args, 'R', None) is not None:
        config.R = args.R
    if getattr(args, 'n_levels', None):
        config.n_levels = [int(n) for n in args.n_levels.split(',')]
    if getattr(args, 'csv', None):
        config.dataset.kind = 'csv'
        config.dataset.path = args.csv
        config.dataset.target = args.target
    config.validate()
    return config


def _method_pair(args: argparse.Namespace) -> Tuple[MethodId, MethodId]:
    a, b = MethodId.parse(args.a), MethodId.parse(args.b)
    if a == b:
        raise ConfigError(f"同じ手法同士は比較できません: {a.value}")
    return a, b


def cmd_run(app: BenchmarkApp, args: argparse.Namespace) -> int:
    return app.run()


def cmd_compare(app: BenchmarkApp, args: argparse.Namespace) -> int:
    a, b = _method_pair(args)
    metric = MetricId.parse(args.metric)
    fits = app.load_fits(metric)
    table = rank_probability_table(app.posteriors_by_n(fits, metric), a, b)
    app.data_manager.save_table(table, "analysis", f"compare_{metric.value}_{a.value}_vs_{b.value}.csv")
    print(f"P({a.value} ≺ {b.value}) on {metric.value}  (* 確定的, ? 未確定, - 未収束)")
    print(f"{'n':>6}  {'P':>7}  mark")
    for row in table.itertuples(index=False):
        prob = "   -   " if not math.isfinite(row.prob) else f"{row.prob:7.3f}"
        print(f"{row.n:>6}  {prob}  {row.marker}")
    return EXIT_OK


def cmd_mdd(app: BenchmarkApp, args: argparse.Namespace) -> int:
    a, b = _method_pair(args)
    metric = MetricId.parse(args.metric)
    if metric == MetricId.PICP:
        raise ConfigError("MDD は連続指標 (PICP 以外) に対してのみ計算できます")
    gamma = args.gamma if args.gamma is not None else app.config.gamma
    posteriors = {n: s for n, s in app.posteriors_by_n(app.load_fits(metric), metric).items()
                  if s.converged}
    if not posteriors:
        raise MissingArtifactError(f"収束した BHM がありません ({metric.value}): diagnose で確認してください")
    curve = mdd_curve(posteriors, a, b, gamma, app.config.hier.per_draw_mdd)
    bundle = ReportGenerator(app.data_manager).create_mdd_chart(curve)
    for point in curve.points:
        state = "検出可能" if point.detectable else "検出不能"
        print(f"n={point.n:>4}  MDD={point.mdd:.4f}  gap={point.observed_gap:.4f}  "
              f"P(detect)={point.detect_prob:.3f}  {state}")
    logger.info(f"MDD 曲線を出力しました: {', '.join(bundle.tables + bundle.plots)}")
    return EXIT_OK


def cmd_diagnose(app: BenchmarkApp, args: argparse.Namespace) -> int:
    fits = app.load_fits()
    table = app.data_manager.load_metric_table()
    diagnostics = app.diagnostics_frame(table, fits)
    app.data_manager.save_table(diagnostics, "analysis", "diagnostics.csv")
    for row in diagnostics.itertuples(index=False):
        status = "PASS" if row.passed else "FAIL"
        print(f"{row.metric:>13} n={row.n:>4}  max R̂={row.max_r_hat:.4f}  "
              f"min ESS={row.min_ess:8.1f}  PPC p={row.ppc_tail_p:.3f}  {status}")
    return EXIT_OK if diagnostics['passed'].all() else EXIT_DIAGNOSTICS_FAILED


def cmd_report(app: BenchmarkApp, args: argparse.Namespace) -> int:
    table = app.data_manager.load_metric_table()
    fits = app.load_fits()
    diagnostics = app.diagnostics_frame(table, fits)
    app.stage_report(table, fits, diagnostics)
    return EXIT_OK


def cmd_sensitivity(app: BenchmarkApp, args: argparse.Namespace) -> int:
    a, b = _method_pair(args)
    metric = MetricId.parse(args.metric)
    table = app.data_manager.load_metric_table()
    n = args.n or max(table.n_levels())
    matrix = table.slice_for_bhm(n, metric, min_rate=app.config.hier.min_convergence_rate)
    sizes = [int(s) for s in args.sizes.split(',')]
    points = r_sensitivity(matrix, a, b, app.config.hier, fit_seed(app.config.global_seed, n, metric), sizes)
    frame = pd.DataFrame([p.__dict__ for p in points], columns=['R', 'prob', 'converged', 'delta'])
    path = app.data_manager.save_table(frame, "analysis",
                                       f"r_sensitivity_{metric.value}_n{n}_{a.value}_vs_{b.value}.csv")
    for p in points:
        print(f"R={p.R:>3}  P({a.value} ≺ {b.value})={p.prob:.3f}  Δ={p.delta:.3f}")
    logger.info(f"R 感度を出力しました: {path}")
    return EXIT_OK


def cmd_decompose(app: BenchmarkApp, args: argparse.Namespace) -> int:
    method = MethodId.parse(args.method)
    metric = MetricId.parse(args.metric)
    if args.seeds < 2:
        raise ConfigError(f"--seeds は2以上である必要があります: {args.seeds}")
    dataset = app.stage_generate()
    key = stage_key('decompose', app.cells_key(), method.value, args.seeds)
    rows = []
    for n in app.feasible_levels(dataset):
        realizations = app.realizations(dataset, n)
        tasks = [app.make_task(dataset, method, real, app.config.method_config, key,
                               seed=derive_child_seed(real.seed, k), metrics=[metric])
                 for real in realizations for k in range(args.seeds)]
        values = np.array([rec['values'][metric.value] for rec in app.execute(tasks)], dtype=float)
        grid = values.reshape(len(realizations), args.seeds)
        grid = grid[np.all(np.isfinite(grid), axis=1)]
        try:
            split = variance_decomposition(grid)
        except InsufficientDataError as e:
            logger.warning(f"分散分解をスキップします (n={n}): {e}")
            continue
        rows.append({'n': n, 'data_variance': split.data, 'algorithm_variance': split.algorithm,
                     'total': split.total, 'realizations': grid.shape[0], 'seeds': args.seeds})
    frame = pd.DataFrame(rows, columns=['n', 'data_variance', 'algorithm_variance', 'total',
                                        'realizations', 'seeds'])
    ReportGenerator(app.data_manager).create_decomposition_chart(frame, method, metric)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_kl_sweep(app: BenchmarkApp, args: argparse.Namespace) -> int:
    weights = [float(w) for w in args.weights.split(',')]
    dataset = app.stage_generate()
    realizations = app.realizations(dataset, args.n, args.kl_R)
    scores: Dict[float, List[float]] = {}
    for weight in weights:
        cfg = copy.deepcopy(app.config.method_config)
        cfg.kl_weight = weight
        key = stage_key('kl-sweep', app.cells_key(), weight)
        tasks = [app.make_task(dataset, MethodId.BBB, real, cfg, key, metrics=[MetricId.CRPS])
                 for real in realizations]
        scores[weight] = [rec['values'][MetricId.CRPS.value] for rec in app.execute(tasks)]
    frame = kl_sensitivity(scores)
    path = app.data_manager.save_table(frame, "analysis", f"kl_sensitivity_n{args.n}.csv")
    print(frame.to_string(index=False))
    logger.info(f"KL 感度を出力しました: {path}")
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'compare': cmd_compare,
    'mdd': cmd_mdd,
    'diagnose': cmd_diagnose,
    'report': cmd_report,
    'sensitivity': cmd_sensitivity,
    'decompose': cmd_decompose,
    'kl-sweep': cmd_kl_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON 設定ファイル')
    common.add_argument('--quick', action='store_true', help='R=10, n∈{30,100} の簡易実行')
    common.add_argument('--seed', type=int, help='全体シード (既定 42)')
    common.add_argument('--workers', type=int, help='並列ワーカー数')
    common.add_argument('--output', default='runs', help='実行ディレクトリの親')
    common.add_argument('--run-dir', help='既存の実行ディレクトリ')
    common.add_argument('--R', type=int, help='データ実現数')
    common.add_argument('--n-levels', help='学習サイズ (カンマ区切り)')
    common.add_argument('--csv', help='外部データセットの CSV パス')
    common.add_argument('--target', help='CSV の目的変数列')
    common.add_argument('-v', '--verbose', action='store_true', help='DEBUG ログを出力')

    parser = argparse.ArgumentParser(description='UQ 指標信頼性ベンチマーク')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('run', parents=[common], help='全ステージを実行')

    for name, text in (('compare', 'P(A≺B) を n ごとに表示'), ('mdd', '予測的最小検出差')):
        cmd = sub.add_parser(name, parents=[common], help=text)
        cmd.add_argument('--metric', default='CRPS')
        cmd.add_argument('--a', default='MCD')
        cmd.add_argument('--b', default='Ensemble')
        if name == 'mdd':
            cmd.add_argument('--gamma', type=float)

    sub.add_parser('diagnose', parents=[common], help='収束診断と事後予測チェック')
    sub.add_parser('report', parents=[common], help='表と図を再出力')

    sens = sub.add_parser('sensitivity', parents=[common], help='実現数 R に対する感度')
    sens.add_argument('--metric', default='CRPS')
    sens.add_argument('--a', default='MCD')
    sens.add_argument('--b', default='Ensemble')
    sens.add_argument('--n', type=int)
    sens.add_argument('--sizes', default='20,30,40,50')

    dec = sub.add_parser('decompose', parents=[common], help='データ由来と学習由来の分散分解')
    dec.add_argument('--method', default='MCD')
    dec.add_argument('--metric', default='CRPS')
    dec.add_argument('--seeds', type=int, default=5)

    kl = sub.add_parser('kl-sweep', parents=[common], help='BBB の KL 重み感度')
    kl.add_argument('--weights', default=','.join(str(w) for w in DEFAULT_KL_WEIGHTS))
    kl.add_argument('--n', type=int, default=100)
    kl.add_argument('--kl-R', dest='kl_R', type=int, default=30)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    try:
        data_manager = DataManager(output_dir=args.output, run_dir=args.run_dir)
        config = build_config(args, data_manager)
        app = BenchmarkApp(config, data_manager)
        if args.command == 'run':
            return cmd_run(app, args)
        app.open_run()
        return COMMANDS[args.command](app, args)
    except BenchmarkError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
