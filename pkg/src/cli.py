"""
CLI - Command-line entry point for the IDProxy pipeline

Every subcommand takes --config, --seed and --workdir, checks its upstream
artifacts, and on failure prints a single line
``error: <ErrorClass>: <message>`` to stderr.
"""
import argparse
import os
import sys
import time
from typing import List, Optional

from config_manager import VARIANTS, VARIANT_ALIASES, load_run_config
from errors import IDProxyError
from experiment_runner import run_ablation
from log_manager import LogManager
from pipeline import SPLITS, VIZ_TABLES, Pipeline, gradient_suite
from run_tracker import RunTracker

DEFAULT_WORKDIR = './idproxy_run'
VARIANT_CHOICES = sorted(set(VARIANTS) | set(VARIANT_ALIASES))


def _common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', default=None, help='YAML run configuration (defaults when omitted)')
    parser.add_argument('--seed', type=int, default=None, help='run seed; overrides IDPROXY_SEED and the file')
    parser.add_argument('--workdir', default=DEFAULT_WORKDIR, help='artifact directory')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='idproxy',
        description='Two-stage content proxies for cold-start items in a CTR ranker.')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    _common(commands.add_parser('gen-data', help='generate the synthetic corpus'))
    _common(commands.add_parser('train-stage1', help='align the content encoder with the ID space'))
    _common(commands.add_parser('partition-layers', help='pick three representative encoder layers'))
    _common(commands.add_parser('train-stage2', help='train the adaptor jointly with the v5 ranker'))

    ranker = commands.add_parser('train-ranker', help='train one ranker variant')
    _common(ranker)
    ranker.add_argument('--variant', required=True, choices=VARIANT_CHOICES)

    evaluate = commands.add_parser('eval', help='AUC of a trained variant')
    _common(evaluate)
    evaluate.add_argument('--variant', required=True, choices=VARIANT_CHOICES)
    evaluate.add_argument('--split', default='all', choices=SPLITS + ('all',))
    evaluate.add_argument('--serve', action='store_true',
                          help='read proxies from the fine-proxy store (v3, v5)')

    ablation = commands.add_parser('ablation', help='run the variant ladder over seeds')
    _common(ablation)
    ablation.add_argument('--seeds', type=int, default=None, help='number of consecutive seeds')
    ablation.add_argument('--workers', type=int, default=None, help='parallel seed processes')

    proxies = commands.add_parser('gen-proxies', help='batch-generate proxies for cold items')
    _common(proxies)
    proxies.add_argument('--append', action='store_true', help='add a new version instead of rewriting')

    viz = commands.add_parser('viz', help='2-D projection of an embedding table')
    _common(viz)
    viz.add_argument('--table', default='id', choices=VIZ_TABLES)

    gradcheck = commands.add_parser('gradcheck', help='central-difference check of every kernel')
    _common(gradcheck)
    gradcheck.add_argument('--points', type=int, default=10)
    gradcheck.add_argument('--tolerance', type=float, default=1e-4)
    return parser


def _run(args: argparse.Namespace, pipeline: Pipeline, tracker: RunTracker) -> int:
    command = args.command
    if command == 'gen-data':
        summary = pipeline.gen_data()
        print(f"corpus: {summary['n_items']} items ({summary['n_cold_items']} cold), "
              f"{summary['n_users']} users, {summary['n_interactions']} interactions")
    elif command == 'train-stage1':
        metrics = pipeline.train_stage1()
        tracker.record_metrics(metrics)
        print(f"stage1: top1={metrics['top1']:.4f} mean_cosine={metrics['mean_cosine']:.4f}")
    elif command == 'partition-layers':
        partition = pipeline.partition_layers()
        print(f"layers: {' '.join(str(x) for x in partition.layers)}")
    elif command == 'train-stage2':
        summary = pipeline.train_stage2()
        tracker.record_metrics(summary)
        print(f"stage2: loss={summary['final_loss']:.4f} gate_warm={summary['gate_mean_warm']:.4f} "
              f"gate_cold={summary['gate_mean_cold']:.4f}")
    elif command == 'train-ranker':
        result = pipeline.train_ranker(args.variant)
        tracker.record_metrics({'final_loss': result.loss_history[-1]})
        print(f"ranker {result.ranker.variant}: loss={result.loss_history[-1]:.4f}")
    elif command == 'eval':
        splits = SPLITS if args.split == 'all' else (args.split,)
        result = pipeline.evaluate(args.variant, splits, serve=args.serve)
        tracker.record_metrics({f"auc_{split}": value for split, value in result.aucs.items()})
        for split in splits:
            print(f"auc[{split}] {result.variant}: {result.aucs[split]:.4f}")
    elif command == 'ablation':
        started = time.perf_counter()
        report = run_ablation(pipeline.config, pipeline.workdir, seeds=args.seeds, workers=args.workers)
        tracker.record_metrics({'runtime_seconds': round(time.perf_counter() - started, 3),
                                'flags': report.flags()})
        tracker.record_artifact('ablation/report.json')
        print(report.to_markdown(), end='')
    elif command == 'gen-proxies':
        summary = pipeline.gen_proxies(append=args.append)
        print(f"proxies: {summary['records']} records at version {summary['version']} "
              f"(store holds {summary['count']}, sha256 {summary['sha256'][:12]})")
    elif command == 'viz':
        summary = pipeline.viz(args.table)
        tracker.record_metrics(summary)
        print(f"projection: {summary['path']}")
        print(f"silhouette[{args.table}]: {summary['silhouette_table']:.4f}")
        print(f"silhouette[2d]: {summary['silhouette_2d']:.4f}")
    elif command == 'gradcheck':
        reports = gradient_suite(args.points, seed=pipeline.config.seed, tolerance=args.tolerance)
        for report in reports:
            line = (f"{report.op_name}: max_rel_err={report.max_rel_err:.3e} "
                    f"checked={report.n_checked} skipped={report.n_skipped} "
                    f"{'ok' if report.passed else 'FAIL'}")
            print(f"{line} ({report.error})" if report.error else line)
        failed = [r for r in reports if not r.passed]
        tracker.record_metrics({'checks': len(reports), 'failed': len(failed)})
        if failed:
            print(f"error: NumericError: {len(failed)} of {len(reports)} gradient checks failed",
                  file=sys.stderr)
            return 1
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    log_manager = LogManager()
    tracker = None
    try:
        os.makedirs(args.workdir, exist_ok=True)
        log_manager.configure(os.path.join(args.workdir, 'logs'))
        config = load_run_config(args.config, args.seed)
        tracker = RunTracker(args.workdir)
        tracker.start(args.command, config.config_hash(), config.seed,
                      {k: v for k, v in vars(args).items() if k != 'command'})
        code = _run(args, Pipeline(config, args.workdir, tracker), tracker)
        tracker.finish('SUCCESS' if code == 0 else 'FAILED')
        return code
    except IDProxyError as e:
        log_manager.log_error(e, args.command)
        if tracker is not None:
            tracker.finish('FAILED', e)
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        log_manager.log_error(e, args.command)
        if tracker is not None:
            tracker.finish('FAILED', e)
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
