"""
Command Line
gen-data, train, eval and ablate subcommands with documented exit codes
(0 success, 2 config error, 3 runtime/numeric error, 4 I/O)
"""
import argparse
import hashlib
import itertools
import json
import logging
import os
import sys
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app import __version__
from app.data import dataset_digest, generate_synthetic, load_dataset, save_dataset
from app.database import get_db
from app.evalkit import (
    append_results,
    collapse_metrics,
    evaluate_tables,
    extract_features,
    knn_sweep,
    split_indices,
    write_embeddings,
)
from app.exceptions import EXIT_CONFIG, EXIT_IO, EXIT_OK, ConfigInvalid, GridTooLarge, SopError
from app.logging_setup import configure_logging
from app.models import AblationCell, RunRecord
from app.trainer import (
    TrainConfig,
    config_hash,
    load_checkpoint,
    load_config,
    run,
    save_config,
    state_footprint,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_CELLS = 64


@dataclass
class RunManifest:
    """What ran, with which config, and when"""
    command: str
    config_path: str
    config_hash: str
    output_dir: str
    started_at: str
    finished_at: str = None
    artifact_version: str = __version__
    exit_code: int = None
    cells: list = field(default_factory=list, repr=False)

    def write(self):
        path = os.path.join(self.output_dir, f'run_manifest_{self.command}.json')
        os.makedirs(self.output_dir, exist_ok=True)
        data = asdict(self)
        data.pop('cells')
        with open(path, 'w') as f:
            json.dump(data, f, indent=2)
        return path


def _hash_dict(data):
    return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(',', ':')).encode('utf-8')).hexdigest()


def _parse_ints(text):
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError as e:
        raise ConfigInvalid('ks', f"expected comma-separated integers, got '{text}'") from e


def _parse_fracs(text):
    try:
        fracs = [float(x) for x in text.split(',') if x.strip()]
    except ValueError as e:
        raise ConfigInvalid('label_fracs', f"expected comma-separated fractions, got '{text}'") from e
    for frac in fracs:
        if not 0.0 < frac <= 1.0:
            raise ConfigInvalid('label_fracs', f"fractions must be in (0, 1], got {frac:g}")
    return fracs


def _optional(value):
    return None if np.isnan(value) else value


def _record_run(manifest, error=None, cells=()):
    """Best-effort write to the run registry; the run's outcome does not depend on it"""
    try:
        with get_db() as db:
            record = RunRecord(
                command=manifest.command,
                config_path=manifest.config_path,
                config_hash=manifest.config_hash,
                output_dir=manifest.output_dir,
                artifact_version=manifest.artifact_version,
                started_at=datetime.fromisoformat(manifest.started_at),
                finished_at=datetime.fromisoformat(manifest.finished_at),
                exit_code=manifest.exit_code,
                error_message=str(error) if error else None,
            )
            for cell in cells:
                record.cells.append(AblationCell(
                    cell_index=cell['cell'],
                    seed=cell['seed'],
                    params=cell['params'],
                    config_hash=cell['config_hash'],
                    knn_accuracy=_optional(cell['knn_accuracy']),
                    runtime_seconds=cell['runtime_seconds'],
                    state_mb=_optional(cell['state_mb']),
                    peak_memory_mb=_optional(cell['peak_memory_mb']),
                    status=cell['status'],
                ))
            db.add(record)
    except Exception as e:
        logger.warning("could not record run in registry: %s", e)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(args, manifest):
    params = {'classes': args.classes, 'per_class': args.per_class, 'size': args.size,
              'noise': args.noise, 'seed': args.seed, 'hard': args.hard}
    manifest.config_hash = _hash_dict(params)
    dataset = generate_synthetic(args.classes, args.per_class, size=args.size,
                                 noise_std=args.noise, seed=args.seed, hard=args.hard)
    save_dataset(dataset, args.out)
    print(f"Wrote {dataset.n} images ({args.classes} classes, {args.size}x{args.size}) to {args.out}")
    print(f"sha256: {dataset_digest(dataset)}")
    return EXIT_OK


def cmd_train(args, manifest):
    if args.config:
        config = load_config(args.config)
    elif args.resume:
        manifest.config_path = os.path.join(args.resume, 'config.json')
        config = load_config(manifest.config_path)
    else:
        config = TrainConfig()
    manifest.config_hash = config_hash(config)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    save_config(config, os.path.join(args.out, 'config.json'))

    result = run(config, dataset, args.out, resume=args.resume, progress=args.progress)
    print(f"Steps run: {result.steps_run}")
    print(f"Checkpoint: {result.checkpoint}")
    print(f"Metrics: {result.metrics_path}")
    if result.last_metrics is not None:
        m = result.last_metrics
        print(f"Final loss {m.loss_total:.4f} (cls {m.loss_cls:.4f}, patch {m.loss_patch:.4f}), "
              f"teacher entropy {m.teacher_entropy:.3f}")
    return EXIT_OK


def cmd_eval(args, manifest):
    ks = _parse_ints(args.ks)
    label_fracs = _parse_fracs(args.label_fracs) if args.label_fracs else []
    state = load_checkpoint(args.ckpt)
    config = state.config
    manifest.config_hash = config_hash(config)
    dataset = load_dataset(args.data)

    features = extract_features(state.teacher, dataset, mode=args.feature or config.global_feature)
    train_idx, test_idx = split_indices(dataset.n, args.split_frac, args.seed)
    train, test = features.subset(train_idx), features.subset(test_idx)
    report = evaluate_tables(train, test, ks=ks, probe_epochs=args.probe_epochs,
                             probe_optimizer=args.probe_optimizer, probe_lr=args.probe_lr)
    subsampled = {frac: knn_sweep(train, test, ks, label_frac=frac, seed=args.seed) for frac in label_fracs}

    tag = args.tag or os.path.basename(os.path.normpath(args.ckpt))
    rows = [(k, acc) for k, acc in report.knn.accuracies.items()] + [('linear', report.linear_accuracy)]
    append_results(args.results, tag, rows)
    for frac, sweep in subsampled.items():
        append_results(args.results, f'{tag}@labels={frac:g}', list(sweep.accuracies.items()))
    if args.embeddings:
        write_embeddings(features, args.embeddings)

    print(f"k-NN: best top-1 {report.knn.best_accuracy:.4f} at k={report.knn.best_k}")
    for k, acc in report.knn.accuracies.items():
        print(f"  k={k}: {acc:.4f}")
    for frac, sweep in subsampled.items():
        print(f"k-NN with {frac:.0%} of labels ({sweep.train_rows} rows): best top-1 "
              f"{sweep.best_accuracy:.4f} at k={sweep.best_k}")
    print(f"Linear probe: {report.linear_accuracy:.4f}")
    c = report.collapse
    print(f"Collapse: mean cos {c.mean_pairwise_cos:.4f}, per-dim std {c.per_dim_std_mean:.4f}, "
          f"effective rank {c.effective_rank:.2f}")
    return EXIT_OK


def load_grid(path):
    """Parameter name -> list of values; an empty object means one default cell"""
    try:
        with open(path, 'r') as f:
            grid = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigInvalid(os.path.basename(path), f"invalid JSON: {e}") from e
    if not isinstance(grid, dict):
        raise ConfigInvalid(os.path.basename(path), "grid must be an object of value lists")
    known = set(TrainConfig().to_dict())
    for name, values in grid.items():
        if name not in known:
            raise ConfigInvalid(name, "unknown field")
        if not isinstance(values, list) or not values:
            raise ConfigInvalid(name, "grid values must be a non-empty list")
    return grid


def expand_grid(grid, base, seeds, max_cells=DEFAULT_MAX_CELLS):
    """
    Cartesian product of the grid, repeated per seed

    Every cell's config is validated before anything runs.

    Returns:
        list of (cell_index, params, seed, TrainConfig)
    """
    names = sorted(grid)
    combos = list(itertools.product(*(grid[n] for n in names)))
    total = len(combos) * len(seeds)
    if total > max_cells:
        raise GridTooLarge(f"grid expands to {total} runs (cap {max_cells})")
    cells = []
    for index, combo in enumerate(combos):
        params = dict(zip(names, combo))
        for seed in seeds:
            config = TrainConfig.from_dict({**base.to_dict(), **params, 'seed': seed})
            cells.append((index, params, seed, config))
    return cells


def run_cell(index, params, seed, config, train_set, test_set, out_dir, ks, profile_memory=False):
    """
    Train one ablation cell and score it; failures become a status, not an exception

    Besides accuracy the row carries the cell's wall time, the bytes held by
    its final training state and, with profile_memory, the peak of memory
    traced while it ran.
    """
    cell_dir = os.path.join(out_dir, f'cell_{index:03d}_seed{seed}')
    row = {'cell': index, 'seed': seed, 'params': params, 'config_hash': config_hash(config),
           'knn_accuracy': float('nan'), 'best_k': None, 'effective_rank': float('nan'),
           'state_mb': float('nan'), 'peak_memory_mb': float('nan'), 'status': 'ok'}
    tracing = profile_memory and not tracemalloc.is_tracing()
    if tracing:
        tracemalloc.start()
    started = time.perf_counter()
    try:
        result = run(config, train_set, cell_dir)
        state = load_checkpoint(result.checkpoint, config)
        row['state_mb'] = sum(state_footprint(state).values()) / 2 ** 20
        train = extract_features(state.teacher, train_set, mode=config.global_feature)
        test = extract_features(state.teacher, test_set, mode=config.global_feature)
        sweep = knn_sweep(train, test, ks)
        row.update(knn_accuracy=sweep.best_accuracy, best_k=sweep.best_k,
                   effective_rank=collapse_metrics(test.features).effective_rank)
    except SopError as e:
        logger.warning("cell %d seed %d failed: %s", index, seed, e)
        row['status'] = type(e).__name__
    finally:
        row['runtime_seconds'] = time.perf_counter() - started
        if tracing:
            row['peak_memory_mb'] = tracemalloc.get_traced_memory()[1] / 2 ** 20
            tracemalloc.stop()
    return row


def cmd_ablate(args, manifest):
    base = load_config(args.config) if args.config else TrainConfig()
    grid = load_grid(args.grid)
    seeds = _parse_ints(args.seeds) if args.seeds else [base.seed]
    ks = _parse_ints(args.ks)
    cells = expand_grid(grid, base, seeds, max_cells=args.max_cells)
    manifest.config_hash = _hash_dict({'base': base.to_dict(), 'grid': grid, 'seeds': seeds})

    dataset = load_dataset(args.data)
    train_idx, test_idx = split_indices(dataset.n, args.split_frac, base.seed)
    train_set, test_set = dataset.subset(train_idx), dataset.subset(test_idx)
    os.makedirs(args.out, exist_ok=True)
    logger.info("running %d ablation cells with %d worker(s)", len(cells), args.parallel)

    jobs = (delayed(run_cell)(index, params, seed, config, train_set, test_set, args.out, ks,
                              profile_memory=args.profile_memory)
            for index, params, seed, config in cells)
    if args.parallel > 1:
        rows = Parallel(n_jobs=args.parallel, backend='loky')(jobs)
    else:
        rows = [func(*a, **kw) for func, a, kw in jobs]
    manifest.cells = rows

    names = sorted(grid)
    frame = pd.DataFrame([{**{n: row['params'][n] for n in names},
                           'seed': row['seed'],
                           'knn_accuracy': row['knn_accuracy'],
                           'best_k': row['best_k'],
                           'effective_rank': row['effective_rank'],
                           'runtime_seconds': row['runtime_seconds'],
                           'state_mb': row['state_mb'],
                           'peak_memory_mb': row['peak_memory_mb'],
                           'status': row['status']} for row in rows])
    summary_path = os.path.join(args.out, 'ablation_summary.csv')
    frame.to_csv(summary_path, index=False)
    print(frame.to_string(index=False))
    print(f"Summary: {summary_path}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='sop', description='Self-Organizing Prototypes desk-scale toolkit')
    parser.add_argument('--log-level', default=None, help='logging level (default: SOP_LOG_LEVEL or INFO)')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', help='generate a synthetic SOPD dataset')
    gen.add_argument('--classes', type=int, default=10)
    gen.add_argument('--per-class', type=int, default=200)
    gen.add_argument('--size', type=int, default=32)
    gen.add_argument('--noise', type=float, default=8.0)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--hard', action='store_true',
                     help='classes differ only in dot layout; samples are randomly translated')
    gen.add_argument('--out', required=True)

    train = sub.add_parser('train', help='train an encoder')
    train.add_argument('--config', help="JSON config (missing fields take defaults; with --resume, the "
                                        "checkpoint's own config)")
    train.add_argument('--data', required=True)
    train.add_argument('--out', required=True)
    train.add_argument('--resume', help='checkpoint directory to continue from')
    train.add_argument('--progress', action='store_true', help='show a progress bar')

    ev = sub.add_parser('eval', help='evaluate frozen teacher features')
    ev.add_argument('--ckpt', required=True)
    ev.add_argument('--data', required=True)
    ev.add_argument('--split-frac', type=float, default=0.8)
    ev.add_argument('--ks', default='10,20,100,200')
    ev.add_argument('--seed', type=int, default=0)
    ev.add_argument('--results', default='results.csv', help='tag,k,accuracy CSV to append to')
    ev.add_argument('--tag', help='results tag (default: checkpoint directory name)')
    ev.add_argument('--feature', choices=['cls', 'avg_patch'], help='global feature (default: from config)')
    ev.add_argument('--embeddings', help='also export all embeddings to this text file')
    ev.add_argument('--probe-epochs', type=int, default=200)
    ev.add_argument('--probe-optimizer', choices=['adamw', 'gd'], default='adamw',
                    help="linear probe update rule ('gd' is plain full-batch gradient descent)")
    ev.add_argument('--probe-lr', type=float, default=0.05)
    ev.add_argument('--label-fracs', help='also run k-NN with these fractions of train labels, e.g. 0.01,0.1')

    ab = sub.add_parser('ablate', help='run a Cartesian-product ablation grid')
    ab.add_argument('--grid', required=True)
    ab.add_argument('--data', required=True)
    ab.add_argument('--out', required=True)
    ab.add_argument('--config', help='base JSON config for every cell')
    ab.add_argument('--seeds', help='comma-separated seeds (default: the base config seed)')
    ab.add_argument('--ks', default='10')
    ab.add_argument('--split-frac', type=float, default=0.8)
    ab.add_argument('--parallel', type=int, default=1, help='cells run in this many processes')
    ab.add_argument('--max-cells', type=int, default=DEFAULT_MAX_CELLS)
    ab.add_argument('--profile-memory', action='store_true',
                    help='trace peak memory per cell (slows the cells down)')
    return parser


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
}


def _output_dir(args):
    if args.command == 'gen-data':
        return os.path.dirname(os.path.abspath(args.out))
    if args.command == 'eval':
        return os.path.dirname(os.path.abspath(args.results))
    return os.path.abspath(args.out)


def main(argv=None):
    """Run one command; returns the process exit code"""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    manifest = RunManifest(
        command=args.command,
        config_path=getattr(args, 'config', None) or getattr(args, 'grid', None),
        config_hash='',
        output_dir=_output_dir(args),
        started_at=datetime.now().isoformat(),
    )
    error = None
    try:
        exit_code = COMMANDS[args.command](args, manifest)
    except SopError as e:
        error = e
        exit_code = e.exit_code
        print(f"error: {e}", file=sys.stderr)
    except OSError as e:
        error = e
        exit_code = EXIT_IO
        print(f"error: {e}", file=sys.stderr)
    except ValueError as e:
        error = e
        exit_code = EXIT_CONFIG
        print(f"error: {e}", file=sys.stderr)

    manifest.finished_at = datetime.now().isoformat()
    manifest.exit_code = exit_code
    try:
        manifest.write()
    except OSError as e:
        logger.warning("could not write run manifest: %s", e)
    _record_run(manifest, error, manifest.cells)
    return exit_code
