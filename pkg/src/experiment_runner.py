"""
ExperimentRunner - Ablation ladder over seeds, cold/warm/global gaps and report rendering
"""
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config_manager import VARIANTS, RunConfig, resolve_variant
from corpus_generator import day_windows
from errors import ArtifactMismatchError, IDProxyError, UndefinedMetricError
from log_manager import LogManager, progress
from metrics import auc
from pipeline import SPLITS, EvalResult, Pipeline

LADDER = ('base', 'v1_content_feature', 'v3_coarse', 'v4_concat_fine', 'v5_structure_reuse')
FULL_MODEL = 'v5_structure_reuse'


def _error_text(error: Exception) -> str:
    if isinstance(error, IDProxyError):
        return error.one_line()
    return f"error: {type(error).__name__}: {' '.join(str(error).split())}"


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


@dataclass
class CellResult:
    """Outcome of one (variant, seed) cell."""

    variant: str
    seed: int
    status: str = 'ok'
    auc: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        return {'variant': self.variant, 'seed': self.seed, 'status': self.status,
                'auc': dict(sorted(self.auc.items())), 'error': self.error}

    @staticmethod
    def from_dict(data: Dict) -> 'CellResult':
        return CellResult(variant=data['variant'], seed=int(data['seed']), status=data['status'],
                          auc={k: float(v) for k, v in data.get('auc', {}).items()},
                          error=data.get('error'))


@dataclass
class ExperimentReport:
    """
    AUC per (variant, seed) cell with deltas against base, medians over
    seeds, per-day gaps of the full model and the ordering flags derived
    from them. Wall-clock runtime goes to the run manifest, never here, so
    one (config, seed) always renders the same report.
    """

    config_hash: str
    variants: List[str] = field(default_factory=list)
    cells: Dict[Tuple[str, int], CellResult] = field(default_factory=dict)
    daily: Dict[Tuple[int, int], Dict[str, Optional[float]]] = field(default_factory=dict)
    stage_errors: Dict[Tuple[int, str], str] = field(default_factory=dict)

    @property
    def seeds(self) -> List[int]:
        return sorted({seed for _, seed in self.cells})

    def merge(self, other: 'ExperimentReport') -> 'ExperimentReport':
        """Union of two reports; cells of other win on collision."""
        if other.config_hash != self.config_hash:
            raise ArtifactMismatchError(
                f"cannot merge reports of configs {self.config_hash[:12]} and {other.config_hash[:12]}")
        variants = [v for v in VARIANTS if v in set(self.variants) | set(other.variants)]
        return ExperimentReport(config_hash=self.config_hash, variants=variants,
                                cells={**self.cells, **other.cells},
                                daily={**self.daily, **other.daily},
                                stage_errors={**self.stage_errors, **other.stage_errors})

    def delta(self) -> Dict[Tuple[str, int], Dict[str, float]]:
        """AUC(variant) - AUC(base) on the same seed and split; base rows are exactly 0."""
        out = {}
        for (variant, seed), cell in self.cells.items():
            base = self.cells.get(('base', seed))
            if cell.status != 'ok' or base is None or base.status != 'ok':
                continue
            out[(variant, seed)] = {split: cell.auc[split] - base.auc[split]
                                    for split in cell.auc if split in base.auc}
        return out

    def medians(self) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
        """variant -> {'auc': split -> median, 'delta': split -> median, 'n_ok', 'n_failed'}."""
        deltas = self.delta()
        out = {}
        for variant in self.variants:
            cells = [c for (v, _), c in sorted(self.cells.items()) if v == variant]
            ok = [c for c in cells if c.status == 'ok']
            out[variant] = {
                'auc': {s: _median([c.auc.get(s) for c in ok]) for s in SPLITS},
                'delta': {s: _median([deltas[(variant, c.seed)].get(s) for c in ok
                                      if (variant, c.seed) in deltas]) for s in SPLITS},
                'n_ok': len(ok),
                'n_failed': len(cells) - len(ok),
            }
        return out

    def daily_medians(self) -> Dict[int, Dict[str, Optional[float]]]:
        days = sorted({day for _, day in self.daily})
        return {day: {key: _median([gaps.get(key) for (_, d), gaps in self.daily.items() if d == day])
                      for key in ('global_delta', 'cold_delta')} for day in days}

    def flags(self) -> Dict[str, Optional[bool]]:
        """Ordering claims on the medians; None when a needed value is missing."""
        medians = self.medians()

        def cold_auc(variant):
            return medians.get(variant, {}).get('auc', {}).get('cold')

        ladder = [cold_auc(v) for v in LADDER if v in self.variants]
        ordered = None
        if len(ladder) >= 2 and all(v is not None for v in ladder):
            ordered = all(a <= b for a, b in zip(ladder, ladder[1:]))

        gains = medians.get(FULL_MODEL, {}).get('delta', {})
        cold, warm, glob = gains.get('cold'), gains.get('warm'), gains.get('global')
        days = [d for d in self.daily_medians().values()
                if d['global_delta'] is not None and d['cold_delta'] is not None]
        return {
            'ladder_ordered_cold': ordered,
            'v5_cold_gain_exceeds_warm': None if cold is None or warm is None else cold > warm,
            'v5_cold_gain_exceeds_global': None if cold is None or glob is None else cold > glob,
            'v5_cold_gain_exceeds_global_every_day':
                all(d['cold_delta'] > d['global_delta'] for d in days) if days else None,
        }

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> Dict:
        order = {v: n for n, v in enumerate(VARIANTS)}
        cells = sorted(self.cells.values(), key=lambda c: (order[c.variant], c.seed))
        deltas = self.delta()
        return {
            'config_hash': self.config_hash,
            'variants': list(self.variants),
            'seeds': self.seeds,
            'cells': [{**c.to_dict(), 'delta': dict(sorted(deltas.get((c.variant, c.seed), {}).items()))}
                      for c in cells],
            'daily': [{'seed': seed, 'day': day, **gaps} for (seed, day), gaps in sorted(self.daily.items())],
            'stage_errors': [{'seed': seed, 'stage': stage, 'error': error}
                             for (seed, stage), error in sorted(self.stage_errors.items())],
            'summary': self.medians(),
            'daily_summary': [{'day': day, **gaps} for day, gaps in self.daily_medians().items()],
            'flags': self.flags(),
        }

    @staticmethod
    def from_dict(data: Dict) -> 'ExperimentReport':
        """Inverse of to_dict; derived sections are recomputed, not read."""
        cells = {}
        for row in data.get('cells', []):
            cell = CellResult.from_dict(row)
            cells[(cell.variant, cell.seed)] = cell
        daily = {(int(row['seed']), int(row['day'])): {'global_delta': row.get('global_delta'),
                                                       'cold_delta': row.get('cold_delta')}
                 for row in data.get('daily', [])}
        stage_errors = {(int(row['seed']), row['stage']): row['error'] for row in data.get('stage_errors', [])}
        return ExperimentReport(config_hash=data['config_hash'], variants=list(data.get('variants', [])),
                                cells=cells, daily=daily, stage_errors=stage_errors)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n'

    @staticmethod
    def from_json(text: str) -> 'ExperimentReport':
        return ExperimentReport.from_dict(json.loads(text))

    def to_markdown(self) -> str:
        def fmt(value, signed=False):
            if value is None:
                return 'n/a'
            return f"{value:+.4f}" if signed else f"{value:.4f}"

        medians = self.medians()
        lines = [
            '# Ablation report',
            '',
            f"config `{self.config_hash[:12]}`, seeds {self.seeds}; medians over seeds.",
            '',
            '| variant | AUC warm | AUC cold | AUC global | dAUC warm | dAUC cold | dAUC global | ok | failed |',
            '|---|---|---|---|---|---|---|---|---|',
        ]
        for variant in self.variants:
            m = medians[variant]
            lines.append('| ' + ' | '.join(
                [variant] + [fmt(m['auc'][s]) for s in SPLITS] + [fmt(m['delta'][s], True) for s in SPLITS]
                + [str(m['n_ok']), str(m['n_failed'])]) + ' |')

        daily = self.daily_medians()
        if daily:
            lines += ['', f"## {FULL_MODEL} gain per day", '',
                      '| day | dAUC global | dAUC cold |', '|---|---|---|']
            for day, gaps in daily.items():
                lines.append(f"| {day + 1} | {fmt(gaps['global_delta'], True)} | {fmt(gaps['cold_delta'], True)} |")

        lines += ['', '## Flags', '']
        for name, value in self.flags().items():
            lines.append(f"- {name}: {'n/a' if value is None else str(value).lower()}")

        failures = [c for _, c in sorted(self.cells.items()) if c.status != 'ok']
        if failures or self.stage_errors:
            lines += ['', '## Failures', '']
            for (seed, stage), error in sorted(self.stage_errors.items()):
                lines.append(f"- seed {seed}, stage {stage}: {error}")
            for cell in failures:
                lines.append(f"- seed {cell.seed}, {cell.variant}: {cell.error}")
        return '\n'.join(lines) + '\n'


# ----------------------------------------------------------------------------
# Runner
# ----------------------------------------------------------------------------

def _window_gap(full: np.ndarray, base: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> Optional[float]:
    try:
        return auc(full[mask], labels[mask]) - auc(base[mask], labels[mask])
    except UndefinedMetricError:
        return None


def _daily_gaps(pipeline: Pipeline, base: EvalResult, full: EvalResult,
                n_days: int) -> Dict[int, Dict[str, Optional[float]]]:
    corpus = pipeline.corpus()
    start, end = corpus.train_cutoff, int(corpus.interactions.timestamp.max())
    out = {day: {} for day in range(n_days)}
    for split, key in (('global', 'global_delta'), ('cold', 'cold_delta')):
        interactions = full.sets[split]
        masks = day_windows(interactions, start, end, n_days)
        for day, mask in enumerate(masks):
            out[day][key] = _window_gap(full.scores[split], base.scores[split], interactions.label, mask)
    return out


def _run_seed(config_data: Dict, workdir: str, seed: int, variants: Sequence[str],
              config_hash: str, log_dir: Optional[str] = None) -> ExperimentReport:
    """Every cell of one seed in its own artifact directory (module level so workers can pickle it)."""
    log_manager = LogManager()
    if log_dir:
        log_manager.configure(log_dir)
    config = RunConfig.from_dict(config_data).with_seed(seed).validate()
    pipeline = Pipeline(config, os.path.join(workdir, 'ablation', f"seed_{seed}"))
    report = ExperimentReport(config_hash=config_hash, variants=list(variants))

    stages = [('gen-data', pipeline.gen_data)]
    if any(v not in ('base', 'v1_content_feature', 'v2_mlp_map') for v in variants):
        stages.append(('train-stage1', pipeline.train_stage1))
    if any(v in ('v4_concat_fine', 'v5_structure_reuse') for v in variants):
        stages.append(('partition-layers', pipeline.partition_layers))
    for stage, run in stages:
        try:
            run()
        except Exception as e:
            log_manager.log_error(e, f"ablation seed {seed} stage {stage}")
            report.stage_errors[(seed, stage)] = _error_text(e)

    results: Dict[str, EvalResult] = {}
    for variant in variants:
        try:
            if variant == FULL_MODEL:
                pipeline.train_stage2()
            else:
                pipeline.train_ranker(variant)
            results[variant] = pipeline.evaluate(variant, SPLITS, write_scores=False)
            report.cells[(variant, seed)] = CellResult(variant, seed, auc=dict(results[variant].aucs))
        except Exception as e:
            log_manager.log_error(e, f"ablation seed {seed} variant {variant}")
            report.cells[(variant, seed)] = CellResult(variant, seed, status='failed', error=_error_text(e))

    if 'base' in results and FULL_MODEL in results:
        for day, gaps in _daily_gaps(pipeline, results['base'], results[FULL_MODEL],
                                     config.eval.n_days).items():
            report.daily[(seed, day)] = gaps
    return report


def run_ablation(config: RunConfig, workdir: str, seeds: Union[int, Sequence[int], None] = None,
                 variants: Optional[Sequence[str]] = None, workers: Optional[int] = None) -> ExperimentReport:
    """
    Train and evaluate every variant on identical splits for each seed.

    Args:
        config: Validated run configuration; its seed is the first run seed
        workdir: Working directory; seeds run under <workdir>/ablation/seed_<s>
        seeds: Seed count (consecutive from config.seed) or explicit seeds;
            defaults to config.eval.seeds
        variants: Variants to run (base is always included and runs first)
        workers: Parallel seed processes; defaults to config.eval.workers

    Returns:
        ExperimentReport, also written to ablation/report.json and report.md
    """
    log_manager = LogManager()
    if seeds is None:
        seeds = config.eval.seeds
    if isinstance(seeds, int):
        seeds = [config.seed + k for k in range(seeds)]
    seeds = [int(s) for s in seeds]
    chosen = [resolve_variant(v) for v in (variants or config.eval.variants)]
    variants = [v for v in VARIANTS if v in set(chosen) | {'base'}]
    workers = workers or config.eval.workers
    config_hash = config.config_hash()
    config_data = config.to_dict()

    started = time.perf_counter()
    log_manager.log_info(f"ablation over seeds {seeds}", details={'variants': variants, 'workers': workers})
    report = ExperimentReport(config_hash=config_hash, variants=variants)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            futures = [pool.submit(_run_seed, config_data, workdir, seed, variants, config_hash,
                                   log_manager.log_dir) for seed in seeds]
            for future in futures:
                report = report.merge(future.result())
    else:
        for seed in progress(seeds, desc='ablation'):
            report = report.merge(_run_seed(config_data, workdir, seed, variants, config_hash))

    out_dir = os.path.join(workdir, 'ablation')
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'report.json'), 'w', encoding='utf-8') as f:
        f.write(report.to_json())
    with open(os.path.join(out_dir, 'report.md'), 'w', encoding='utf-8') as f:
        f.write(report.to_markdown())
    elapsed = time.perf_counter() - started
    log_manager.log_evaluation(f"ablation finished in {elapsed:.1f}s",
                               {'seeds': seeds, 'runtime_seconds': elapsed, 'flags': report.flags()})
    return report
