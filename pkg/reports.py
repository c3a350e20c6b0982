"""
レポート出力 (CSV 表と SVG 図)

図はすべて Agg バックエンドで SVG に描画し、描いた数値は同名の CSV にも
書き出します。
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from analysis import (  # noqa: E402
    CONCLUSIVE_HIGH,
    CONCLUSIVE_LOW,
    ComparisonResult,
    MddCurve,
    conclusive_marker,
    convergence_rates,
    power_law_fit,
    rank_consistency,
    rank_probability,
    summarize_tau,
    summary_table,
)
from data_manager import DataManager  # noqa: E402
from hier_model import PosteriorSamples, PpcSummary  # noqa: E402
from models import (  # noqa: E402
    BenchmarkError,
    MethodId,
    MetricId,
    MetricTable,
)

logger = logging.getLogger(__name__)

plt.rcParams['font.family'] = ['DejaVu Sans']
plt.rcParams['svg.hashsalt'] = 'uq-bench'

UNDETECTABLE_COLOR = '#f4c2c2'
DETECTABLE_COLOR = '#c8e6c9'


@dataclass
class ReportBundle:
    tables: List[str] = field(default_factory=list)
    plots: List[str] = field(default_factory=list)

    def extend(self, other: 'ReportBundle') -> 'ReportBundle':
        self.tables.extend(other.tables)
        self.plots.extend(other.plots)
        return self

    def to_dict(self) -> Dict[str, List[str]]:
        return {'tables': list(self.tables), 'plots': list(self.plots)}


def format_mean_sd(mean: float, sd: float) -> str:
    if not math.isfinite(mean):
        return "-"
    if not math.isfinite(sd):
        return f"{mean:.3f}"
    return f"{mean:.3f} ± {sd:.3f}"


def wide_summary(summary: pd.DataFrame) -> pd.DataFrame:
    """手法 × n の「平均 ± SD」表に並べ替えます"""
    if summary.empty:
        return pd.DataFrame()
    cells = summary.assign(cell=[format_mean_sd(m, s) for m, s in zip(summary['mean'], summary['sd'])])
    wide = cells.pivot(index='method', columns='n', values='cell')
    order = [m.value for m in MethodId if m.value in wide.index]
    wide = wide.reindex(order)
    wide.columns = [f"n={n}" for n in wide.columns]
    return wide.reset_index()


def rank_probability_table(posteriors: Dict[int, PosteriorSamples], a: MethodId,
                           b: MethodId) -> pd.DataFrame:
    """n ごとの P(A≺B)。収束していないあてはめは NaN と '-' で示します"""
    rows = []
    for n in sorted(posteriors):
        samples = posteriors[n]
        if not samples.converged:
            rows.append({'n': n, 'prob': float('nan'), 'marker': '-', 'converged': False})
            continue
        if a not in samples.methods or b not in samples.methods:
            rows.append({'n': n, 'prob': float('nan'), 'marker': '-', 'converged': True})
            continue
        prob = rank_probability(samples, a, b)
        rows.append({'n': n, 'prob': prob, 'marker': conclusive_marker(prob), 'converged': True})
    return pd.DataFrame(rows, columns=['n', 'prob', 'marker', 'converged'])


def ecdf(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(values, dtype=float).reshape(-1))
    return x, np.arange(1, x.size + 1) / x.size


class ReportGenerator:
    """
    実行ディレクトリの report/ 以下に表と図を書き出します

    各 create_* は書き出したファイルの ReportBundle を返します。
    """

    def __init__(self, data_manager: DataManager, subdir: str = "report"):
        self.data_manager = data_manager
        self.subdir = subdir

    def _target(self, filename: str) -> str:
        target = self.data_manager.path(self.subdir, filename)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        return target

    def _write_csv(self, df: pd.DataFrame, filename: str, bundle: ReportBundle) -> str:
        target = self._target(filename)
        df.to_csv(target, index=False)
        bundle.tables.append(target)
        return target

    def _save_figure(self, fig, filename: str, bundle: ReportBundle) -> str:
        target = self._target(filename)
        fig.tight_layout()
        fig.savefig(target, format='svg', metadata={'Date': None})
        plt.close(fig)
        bundle.plots.append(target)
        return target

    # --- 表 -----------------------------------------------------------------

    def create_metric_summaries(self, table: MetricTable,
                                metrics: Optional[Sequence[MetricId]] = None) -> ReportBundle:
        bundle = ReportBundle()
        for metric in metrics or table.metrics():
            summary = summary_table(table, metric)
            self._write_csv(summary, f"{metric.value.lower()}_summary.csv", bundle)
            if not summary.empty:
                self._write_csv(wide_summary(summary), f"{metric.value.lower()}_summary_wide.csv", bundle)
        return bundle

    def create_convergence_table(self, table: MetricTable) -> ReportBundle:
        bundle = ReportBundle()
        rates = convergence_rates(table)
        rows = [{'method': m.value, 'n': n, 'rate': rate}
                for (m, n), rate in sorted(rates.items(), key=lambda kv: (kv[0][0].order, kv[0][1]))]
        self._write_csv(pd.DataFrame(rows, columns=['method', 'n', 'rate']),
                        "convergence_rates.csv", bundle)
        return bundle

    def create_power_law_table(self, table: MetricTable,
                               metrics: Sequence[MetricId] = (MetricId.CRPS, MetricId.NLL)) -> ReportBundle:
        bundle = ReportBundle()
        rows = []
        for metric in metrics:
            if metric not in table.metrics():
                continue
            for method in table.methods():
                try:
                    fit = power_law_fit(table, method, metric)
                except BenchmarkError as e:
                    logger.warning(f"べき乗則のあてはめをスキップします: {method.value}, {metric.value}: {e}")
                    continue
                rows.append(fit.to_dict())
        self._write_csv(pd.DataFrame(rows, columns=['method', 'metric', 'alpha', 'C', 'r2', 'n_levels']),
                        "power_law.csv", bundle)
        return bundle

    # --- 図 -----------------------------------------------------------------

    def create_variance_chart(self, table: MetricTable,
                              metrics: Sequence[MetricId] = (MetricId.CRPS, MetricId.NLL)) -> ReportBundle:
        """SD と n の両対数プロット"""
        bundle = ReportBundle()
        metrics = [m for m in metrics if m in table.metrics()]
        frames = [summary_table(table, metric).assign(metric=metric.value) for metric in metrics]
        data = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
            columns=['method', 'n', 'mean', 'sd', 'count', 'unconverged', 'metric'])
        self._write_csv(data[['metric', 'method', 'n', 'sd']], "variance_vs_n.csv", bundle)

        fig, axes = plt.subplots(1, max(len(metrics), 1), figsize=(5 * max(len(metrics), 1), 4),
                                 squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            part = data[data['metric'] == metric.value]
            for method in MethodId:
                rows = part[(part['method'] == method.value) & np.isfinite(part['sd'])]
                rows = rows[rows['sd'] > 0]
                if rows.empty:
                    continue
                ax.plot(rows['n'], rows['sd'], marker='o', label=method.value)
            ax.set_xscale('log')
            ax.set_yscale('log')
            ax.set_xlabel('n')
            ax.set_ylabel(f'SD of {metric.value}')
            ax.grid(True, alpha=0.3)
            ax.legend()
        return self._finish(fig, "variance_vs_n.svg", bundle)

    def _finish(self, fig, filename: str, bundle: ReportBundle) -> ReportBundle:
        self._save_figure(fig, filename, bundle)
        return bundle

    def create_pairwise_heatmap(self, comparison: ComparisonResult) -> ReportBundle:
        bundle = ReportBundle()
        metric = comparison.metric.value if comparison.metric else 'metric'
        stem = f"pairwise_{metric}_n{comparison.n}"
        frame = comparison.to_frame()
        self._write_csv(frame.reset_index().rename(columns={'index': 'method'}), f"{stem}.csv", bundle)

        fig, ax = plt.subplots(figsize=(6, 5))
        annot = frame.applymap(lambda p: "" if not math.isfinite(p) else f"{p:.2f}")
        sns.heatmap(frame.astype(float), ax=ax, cmap='RdBu_r', vmin=0.0, vmax=1.0, center=0.5,
                    annot=annot, fmt='', cbar_kws={'label': 'P(row ≺ column)'})
        ax.set_title(f"{metric}, n={comparison.n}")
        return self._finish(fig, f"{stem}.svg", bundle)

    def create_rank_probability_chart(self, posteriors: Dict[int, PosteriorSamples],
                                      a: MethodId, b: MethodId) -> ReportBundle:
        bundle = ReportBundle()
        stem = f"rank_probability_{a.value}_vs_{b.value}"
        data = rank_probability_table(posteriors, a, b)
        self._write_csv(data, f"{stem}.csv", bundle)

        fig, ax = plt.subplots(figsize=(6, 4))
        valid = data[data['converged'].astype(bool) & data['prob'].notna()]
        ax.plot(valid['n'], valid['prob'], marker='o', color='tab:blue')
        ax.axhline(CONCLUSIVE_LOW, linestyle='--', color='gray')
        ax.axhline(CONCLUSIVE_HIGH, linestyle='--', color='gray')
        ax.axhline(0.5, linestyle=':', color='gray')
        ax.set_xscale('log')
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel('n')
        ax.set_ylabel(f'P({a.value} ≺ {b.value})')
        ax.grid(True, alpha=0.3)
        return self._finish(fig, f"{stem}.svg", bundle)

    def create_mdd_chart(self, curve: MddCurve) -> ReportBundle:
        bundle = ReportBundle()
        stem = f"mdd_{curve.a.value}_vs_{curve.b.value}"
        data = curve.to_frame()
        self._write_csv(data, f"{stem}.csv", bundle)

        fig, ax = plt.subplots(figsize=(6, 4))
        if not data.empty:
            ns = data['n'].to_numpy(dtype=float)
            mdd_values = data['mdd'].to_numpy(dtype=float)
            top = max(float(np.nanmax(mdd_values)), float(np.nanmax(data['observed_gap']))) * 1.2 or 1.0
            # MDD 曲線より下は検出不能、上は検出可能
            ax.fill_between(ns, 0.0, mdd_values, color=UNDETECTABLE_COLOR, label='undetectable')
            ax.fill_between(ns, mdd_values, top, color=DETECTABLE_COLOR, label='detectable')
            ax.plot(ns, mdd_values, color='crimson', marker='o', label=f'MDD (γ={curve.gamma:.2f})')
            ax.plot(ns, data['observed_gap'], color='black', marker='s', linestyle='--',
                    label='observed gap')
            ax.set_ylim(0.0, top)
            ax.set_xscale('log')
        ax.set_xlabel('n')
        ax.set_ylabel(f'|μ_{curve.a.value} − μ_{curve.b.value}|')
        ax.legend()
        return self._finish(fig, f"{stem}.svg", bundle)

    def create_kendall_tau_chart(self, table: MetricTable,
                                 first: MetricId = MetricId.CRPS,
                                 second: MetricId = MetricId.INTERVAL_SCORE) -> ReportBundle:
        bundle = ReportBundle()
        rows, per_realization = [], []
        if first in table.metrics() and second in table.metrics():
            for n in table.n_levels():
                results = rank_consistency(table, n, first, second)
                taus = [c.tau for c in results if math.isfinite(c.tau)]
                rows.append({'n': n, **summarize_tau(taus)})
                per_realization.extend({'n': n, 'realization': c.realization, 'tau': c.tau}
                                       for c in results)
        data = pd.DataFrame(rows, columns=['n', 'median', 'q25', 'q75', 'count'])
        self._write_csv(data, "kendall_tau.csv", bundle)
        self._write_csv(pd.DataFrame(per_realization, columns=['n', 'realization', 'tau']),
                        "kendall_tau_per_realization.csv", bundle)

        fig, ax = plt.subplots(figsize=(6, 4))
        valid = data[data['count'] > 0]
        if not valid.empty:
            ax.plot(valid['n'], valid['median'], marker='o', color='tab:purple', label='median τ')
            ax.fill_between(valid['n'].to_numpy(dtype=float), valid['q25'].to_numpy(dtype=float),
                            valid['q75'].to_numpy(dtype=float), color='tab:purple', alpha=0.2,
                            label='IQR')
            ax.set_xscale('log')
            ax.legend()
        ax.set_ylim(-1.05, 1.05)
        ax.set_xlabel('n')
        ax.set_ylabel(f'Kendall τ ({first.value} vs {second.value})')
        ax.grid(True, alpha=0.3)
        return self._finish(fig, "kendall_tau.svg", bundle)

    def create_ppc_chart(self, samples: PosteriorSamples, observed: np.ndarray,
                         ppc: PpcSummary) -> ReportBundle:
        """観測値と複製データの ECDF を重ねます"""
        bundle = ReportBundle()
        metric = samples.metric.value if samples.metric else 'metric'
        stem = f"ppc_{metric}_n{samples.n}"
        self._write_csv(ppc.to_frame(), f"{stem}.csv", bundle)
        values = [('observed', np.asarray(observed, dtype=float).reshape(-1))]
        if ppc.replicate_values is not None:
            values += [(str(i), rep.reshape(-1)) for i, rep in enumerate(ppc.replicate_values)]
        self._write_csv(pd.DataFrame([{'replicate': name, 'value': v}
                                      for name, arr in values for v in arr]),
                        f"{stem}_values.csv", bundle)

        fig, ax = plt.subplots(figsize=(6, 4))
        for i, (name, arr) in enumerate(values[1:]):
            x, p = ecdf(arr)
            ax.step(x, p, where='post', color='tab:blue', alpha=0.15,
                    label='replicates' if i == 0 else None)
        x, p = ecdf(values[0][1])
        ax.step(x, p, where='post', color='black', linewidth=2, label='observed')
        ax.set_xlabel(metric)
        ax.set_ylabel('ECDF')
        ax.set_title(f"tail p={ppc.tail_p_value:.3f}, band hits={ppc.band_hits}/5")
        ax.legend()
        return self._finish(fig, f"{stem}.svg", bundle)

    def create_decomposition_chart(self, data: pd.DataFrame, method: MethodId,
                                   metric: MetricId) -> ReportBundle:
        """データ由来と学習由来の分散を n に対して両対数で描きます"""
        bundle = ReportBundle()
        stem = f"variance_decomposition_{method.value}_{metric.value}"
        self._write_csv(data, f"{stem}.csv", bundle)

        fig, ax = plt.subplots(figsize=(6, 4))
        for column, label, color in (('data_variance', 'data', 'tab:orange'),
                                     ('algorithm_variance', 'algorithm', 'tab:green')):
            rows = data[data[column] > 0]
            if not rows.empty:
                ax.plot(rows['n'], rows[column], marker='o', color=color, label=label)
        ax.set_xscale('log')
        ax.set_yscale('log')
        ax.set_xlabel('n')
        ax.set_ylabel(f'variance of {metric.value} ({method.value})')
        ax.grid(True, alpha=0.3)
        ax.legend()
        return self._finish(fig, f"{stem}.svg", bundle)

    # --- Excel --------------------------------------------------------------

    def export_excel(self, tables: Dict[str, pd.DataFrame], filename: str = "tables.xlsx") -> Optional[str]:
        target = self._target(filename)
        try:
            with pd.ExcelWriter(target, engine='openpyxl') as writer:
                for name, df in tables.items():
                    # シート名は31文字まで
                    df.to_excel(writer, sheet_name=name[:31], index=False)
        except ImportError as e:
            logger.warning(f"openpyxl が利用できないため Excel 出力をスキップします: {e}")
            return None
        return target
