"""Command-line front end of hdp-lab.

Commands:
    run         Train one method on one protocol and write manifest, checkpoints,
                UAP pool (hdp) and report.json. Two runs with the same flags
                write the same report.json apart from its timestamp
    sweep       Run an ablation grid (sigma, beta, components, ...) and write one
                report per point plus summary.csv
    report      Print AVG/PRE of every report.json below a directory
    gen-uap     Generate one UAP from a checkpoint and a protocol stage
    dump-stage  Write a protocol stage as raw HDPI images plus index.json

Configuration precedence: command-line flags, then the `--config` file (flat
key=value lines, keys mirror flag names without the leading dashes), then
defaults. Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

Examples:
    hdp-lab run --protocol p1 --method hdp --seed 0 --out runs/p1_hdp
    hdp-lab sweep --protocol p1 --grid sigma=0.6,0.8,1.0 --out runs/sigma
    hdp-lab sweep --grid components=none,E,EP,EPR --parallel 4
    hdp-lab report --in runs --csv runs/summary.csv
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional
import argparse
import io
import json
import logging
import sys

from pydantic import ValidationError

import hdp_lab
from hdp_lab import logger
from hdp_lab._utils import _parse_bool, _read_kv_config
from hdp_lab.settings import get_settings

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

# Options that may come from flags or the --config file, with their parsers.
_TRAIN_OPTIONS: Dict[str, Callable[[str], Any]] = {
    'protocol': str,
    'method': str,
    'seed': int,
    'beta': float,
    'epochs': int,
    'buffer': int,
    'lr': float,
    'weight_decay': float,
    'batch_size': int,
    'components': str,
    'distill_mode': str,
    'arch': str,
    'train_size': int,
    'test_size': int,
    'image_size': int,
}

_UAP_OPTIONS: Dict[str, Callable[[str], Any]] = {
    'epsilon': float,
    'alpha': float,
    'sigma': float,
    'max_iters': int,
    'gen_subset': int,
    'uap_batch_size': int,
    'uap_paper_sign': _parse_bool,
    'clamp_pseudo': _parse_bool,
}


class UsageError(ValueError):
    """Invalid command-line input."""


def _add_protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--protocol', default=None, help="Preset name (p1, p2, p3) or ProtocolSpec JSON path")
    p.add_argument('--seed', type=int, default=None, help="Run seed, also the protocol's global seed")
    p.add_argument('--train-size', type=int, default=None, help="Training samples per class per stage")
    p.add_argument('--test-size', type=int, default=None, help="Test samples per class per stage")
    p.add_argument('--image-size', type=int, default=None, help="Image height and width of presets")


def _add_uap_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--epsilon', type=float, default=None, help="UAP L-infinity budget (default 0.15)")
    p.add_argument('--alpha', type=float, default=None, help="UAP step size (default 1e-4)")
    p.add_argument('--sigma', type=float, default=None, help="UAP attack rate threshold in (0,1] (default 0.8)")
    p.add_argument('--max-iters', type=int, default=None, help="UAP step limit (default 5000)")
    p.add_argument('--gen-subset', type=int, default=None, help="Real images used for UAP generation")
    p.add_argument('--uap-batch-size', type=int, default=None, help="UAP mini-batch size (default 64)")
    p.add_argument('--uap-paper-sign', action='store_true', default=None,
                   help="Step in the literal descent direction")
    p.add_argument('--clamp-pseudo', action='store_true', default=None, help="Clamp x + p to [0, 1]")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_protocol_flags(p)
    _add_uap_flags(p)
    p.add_argument('--method', choices=['hdp', 'sft', 'joint'], default=None, help="Training method (default hdp)")
    p.add_argument('--beta', type=float, default=None, help="Distillation weight (default 1.0)")
    p.add_argument('--epochs', type=int, default=None, help="Epochs per stage (default 10)")
    p.add_argument('--buffer', type=int, default=None, help="Replay buffer samples per stage (default 0)")
    p.add_argument('--lr', type=float, default=None, help="Learning rate (default 1e-3)")
    p.add_argument('--weight-decay', type=float, default=None, help="Weight decay (default 1e-5)")
    p.add_argument('--batch-size', type=int, default=None, help="Training batch size (default 64)")
    p.add_argument('--components', default=None, help="HDP terms: letters over E, P, R, or none")
    p.add_argument('--distill-mode', choices=['sq_l2', 'mse'], default=None, help="Distillation distance")
    p.add_argument('--arch', choices=['conv3', 'linear'], default=None, help="Detector architecture")
    p.add_argument('--config', default=None, help="key=value configuration file")
    p.add_argument('--out', default=None, help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hdp-lab',
                                     description="Continual forgery detection with historical distribution preserving.")
    parser.add_argument('--version', action='version', version=f"%(prog)s {hdp_lab.__version__}")
    parser.add_argument('--log-level', default=None, help="Override LOG_LEVEL for this invocation")
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help="Train and evaluate one method on one protocol")
    _add_train_flags(run)
    run.add_argument('--dump-features', action='store_true', help="Write feature CSVs of the final model")
    run.set_defaults(handler=cmd_run)

    sweep = sub.add_parser('sweep', help="Run an ablation grid")
    _add_train_flags(sweep)
    sweep.add_argument('--grid', action='append', default=[], metavar='KEY=V1,V2',
                       help="Grid axis; repeat for a cartesian product")
    sweep.add_argument('--parallel', type=int, default=1, help="Grid points run in parallel processes")
    sweep.set_defaults(handler=cmd_sweep)

    report = sub.add_parser('report', help="Summarize reports below a directory")
    report.add_argument('--in', dest='in_dir', required=True, help="Directory searched for report.json files")
    report.add_argument('--csv', default=None, help="Also write the table as CSV")
    report.set_defaults(handler=cmd_report)

    gen = sub.add_parser('gen-uap', help="Generate one UAP from a checkpoint")
    _add_protocol_flags(gen)
    _add_uap_flags(gen)
    gen.add_argument('--checkpoint', required=True, help="HDPM checkpoint file")
    gen.add_argument('--stage', type=int, required=True, help="1-based protocol stage whose reals are attacked")
    gen.add_argument('--out', required=True, help="Output HDPU file")
    gen.add_argument('--config', default=None, help="key=value configuration file")
    gen.set_defaults(handler=cmd_gen_uap)

    dump = sub.add_parser('dump-stage', help="Write a stage as HDPI images")
    _add_protocol_flags(dump)
    dump.add_argument('--stage', type=int, required=True, help="1-based protocol stage")
    dump.add_argument('--out', required=True, help="Output directory")
    dump.set_defaults(handler=cmd_dump_stage)

    return parser


def _resolve_options(args: argparse.Namespace, spec: Dict[str, Callable[[str], Any]]) -> Dict[str, Any]:
    """Merge flags over --config values; keys without a value are left out."""
    file_values = _read_kv_config(args.config) if getattr(args, 'config', None) else {}
    ignored = sorted(set(file_values) - set(_TRAIN_OPTIONS) - set(_UAP_OPTIONS) - {'out'})
    if ignored:
        logger.warning("Ignoring unknown config keys: %s", ignored)

    resolved = {}
    for key, cast in spec.items():
        value = getattr(args, key, None)
        if value is None and key in file_values:
            try:
                value = cast(file_values[key])
            except ValueError as e:
                raise UsageError(f"Config key {key}: {e}") from e
        if value is not None:
            resolved[key] = value
    if getattr(args, 'out', None) is None and 'out' in file_values:
        resolved['out'] = file_values['out']
    elif getattr(args, 'out', None) is not None:
        resolved['out'] = args.out
    return resolved


def _uap_config(opts: Dict[str, Any]):
    from hdp_lab.uap import UAPConfig

    names = {'epsilon': 'epsilon', 'alpha': 'alpha', 'sigma': 'sigma', 'max_iters': 'max_iters',
             'gen_subset': 'gen_subset_size', 'uap_batch_size': 'batch_size',
             'uap_paper_sign': 'paper_sign', 'clamp_pseudo': 'clamp_pseudo'}
    return UAPConfig(**{field: opts[key] for key, field in names.items() if key in opts})


def _train_config(opts: Dict[str, Any]):
    from hdp_lab.analysis.sweep import apply_point
    from hdp_lab.trainer import TrainConfig

    names = {'method': 'method', 'seed': 'seed', 'beta': 'beta', 'epochs': 'epochs_per_stage',
             'buffer': 'buffer_per_stage', 'lr': 'lr', 'weight_decay': 'weight_decay',
             'batch_size': 'batch_size', 'distill_mode': 'distill_mode', 'arch': 'arch'}
    cfg = TrainConfig(uap=_uap_config(opts), **{field: opts[key] for key, field in names.items() if key in opts})
    if 'components' in opts:
        cfg = apply_point(cfg, {'components': opts['components']})
    return cfg


def _protocol_spec(opts: Dict[str, Any]):
    from hdp_lab.synthdata import StageSizes, load_protocol_spec, preset_protocol, PRESET_NAMES

    name = opts.get('protocol', 'p1')
    if name in PRESET_NAMES:
        sizes = {k: opts[k] for k in ('train_size', 'test_size', 'image_size') if k in opts}
        return preset_protocol(name, global_seed=opts.get('seed', 0), **sizes)

    # A spec file keeps its own global seed unless --seed is given.
    spec = load_protocol_spec(name, global_seed=opts.get('seed'))
    if 'train_size' in opts or 'test_size' in opts:
        stages = []
        for stage in spec.stages:
            sizes = StageSizes(train=opts.get('train_size', stage.sizes.train),
                               test=opts.get('test_size', stage.sizes.test))
            stages.append(stage.model_copy(update={'sizes': sizes}))
        spec = spec.model_copy(update={'stages': stages})
    return spec


def _format_validation(e: ValidationError) -> str:
    return '; '.join(f"{'.'.join(str(p) for p in err['loc']) or 'value'}: {err['msg']}" for err in e.errors())


def _prepare_run(args: argparse.Namespace) -> Callable[[], int]:
    from hdp_lab.experiment import default_out_dir, run_experiment

    opts = _resolve_options(args, {**_TRAIN_OPTIONS, **_UAP_OPTIONS})
    spec = _protocol_spec(opts)
    cfg = _train_config(opts)
    out_dir = Path(opts['out']) if 'out' in opts else default_out_dir(spec, cfg)

    def execute() -> int:
        report = run_experiment(spec, cfg, out_dir, dump_features=args.dump_features)
        print(f"{report.protocol} {report.method} seed={report.seed}: "
              f"AVG_acc={report.avg_acc:.2f} AVG_auc={report.avg_auc:.2f} "
              f"PRE_acc={report.pre_acc:.2f} PRE_auc={report.pre_auc:.2f}")
        print(f"Report written to {out_dir / 'report.json'}")
        if report.sigma_unreached_stages:
            print(f"Warning: UAP sigma not reached for stages {report.sigma_unreached_stages}", file=sys.stderr)
        return EXIT_OK

    return execute


def _prepare_sweep(args: argparse.Namespace) -> Callable[[], int]:
    from hdp_lab.analysis import SweepDriver
    from hdp_lab.analysis.sweep import apply_point, expand_grid, parse_grid_arg

    opts = _resolve_options(args, {**_TRAIN_OPTIONS, **_UAP_OPTIONS})
    grid = parse_grid_arg(args.grid)
    points = expand_grid(grid)
    spec = _protocol_spec(opts)
    cfg = _train_config(opts)
    for point in points:
        apply_point(cfg, point)
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")

    out_dir = Path(opts['out']) if 'out' in opts else (
        Path(get_settings().runs_local_path).expanduser() / f"{spec.name}_sweep_seed{cfg.seed}")

    def execute() -> int:
        sweep_driver = SweepDriver(remote_executor_type='multiprocessing' if args.parallel > 1 else 'synchronous',
                                   max_parallel_tasks=args.parallel)
        result = sweep_driver.run_sweep(spec, cfg, grid, str(out_dir))
        summary = result['sweep_summary']
        columns = ['name', 'avg_acc', 'avg_auc', 'pre_acc', 'pre_auc']
        print(summary[columns].round(4).to_string(index=False))
        if result['sweep_summary_csv'].get('statusCode', -1) != 0:
            print("Failed to write summary.csv", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"Summary written to {result['sweep_summary_csv']['file_path']}")
        return EXIT_OK

    return execute


REPORT_COLUMNS = {
    'run': 'run',
    'method': 'method',
    'components': 'components',
    'sigma': 'sigma',
    'beta': 'beta',
    'seed': 'seed',
    'avg_acc': 'AVG_acc',
    'avg_auc': 'AVG_auc',
    'pre_acc': 'PRE_acc',
    'pre_auc': 'PRE_auc',
}


def _prepare_report(args: argparse.Namespace) -> Callable[[], int]:
    from hdp_lab.sources import reports_from_store
    from hdp_lab.storage import store_or_raise, to_store

    in_dir = Path(args.in_dir).expanduser()
    if not in_dir.is_dir():
        raise UsageError(f"{in_dir} is not a directory")
    reports = reports_from_store(in_dir)
    if reports.empty:
        raise UsageError(f"No reports found under {in_dir}")

    def execute() -> int:
        table = reports[list(REPORT_COLUMNS)].rename(columns=REPORT_COLUMNS).round(4)
        print(table.to_string(index=False))
        if args.csv:
            buffer = io.StringIO()
            table.to_csv(buffer, index=False)
            csv_path = Path(args.csv)
            store_or_raise(to_store(file_name=csv_path.name, content=buffer.getvalue().encode('utf-8'),
                                    base_path=csv_path.parent))
        return EXIT_OK

    return execute


def _prepare_gen_uap(args: argparse.Namespace) -> Callable[[], int]:
    from hdp_lab.detector import load_checkpoint
    from hdp_lab.storage import json_to_store, store_or_raise
    from hdp_lab.synthdata import build_stage
    from hdp_lab.uap import generate_uap, save_uap

    opts = _resolve_options(args, {**{k: _TRAIN_OPTIONS[k] for k in ('protocol', 'seed', 'train_size',
                                                                     'test_size', 'image_size')},
                                   **_UAP_OPTIONS})
    spec = _protocol_spec(opts)
    uap_cfg = _uap_config(opts)
    if not 1 <= args.stage <= len(spec.stages):
        raise UsageError(f"--stage must be in 1..{len(spec.stages)}, got {args.stage}")
    out = Path(args.out)

    def execute() -> int:
        m = load_checkpoint(args.checkpoint)
        stage = build_stage(spec.stages[args.stage - 1], stage_id=args.stage, seed=spec.global_seed,
                            image_shape=spec.image_shape)
        p = generate_uap(m, stage.train_real, uap_cfg, args.stage, seed=opts.get('seed', 0))
        save_uap(p, out)
        store_or_raise(json_to_store(file_name=out.with_suffix('.json').name, base_path=out.parent, payload={
            'stage_id': p.stage_id,
            'epsilon': p.epsilon,
            'attack_rate': p.achieved_attack_rate,
            'iterations_used': p.iterations_used,
            'sigma': uap_cfg.sigma,
            'sigma_reached': p.sigma_reached,
            'checkpoint': str(args.checkpoint),
            'protocol': spec.name,
        }))
        print(f"attack_rate={p.achieved_attack_rate:.4f} iterations={p.iterations_used} file={out}")
        if not p.sigma_reached:
            print(f"Warning: attack rate {p.achieved_attack_rate:.4f} below sigma={uap_cfg.sigma}; "
                  f"best perturbation written", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    return execute


def _prepare_dump_stage(args: argparse.Namespace) -> Callable[[], int]:
    from hdp_lab.synthdata import build_stage, dump_stage

    opts = _resolve_options(args, {k: _TRAIN_OPTIONS[k] for k in ('protocol', 'seed', 'train_size',
                                                                  'test_size', 'image_size')})
    spec = _protocol_spec(opts)
    if not 1 <= args.stage <= len(spec.stages):
        raise UsageError(f"--stage must be in 1..{len(spec.stages)}, got {args.stage}")

    def execute() -> int:
        stage = build_stage(spec.stages[args.stage - 1], stage_id=args.stage, seed=spec.global_seed,
                            image_shape=spec.image_shape)
        index = dump_stage(stage, args.out)
        print(f"Stage {args.stage} written to {index.parent} ({len(json.loads(index.read_text()))} images)")
        return EXIT_OK

    return execute


def _dispatch(prepare: Callable[[argparse.Namespace], Callable[[], int]], args: argparse.Namespace) -> int:
    """Validate with prepare(), then execute.

    Validation (flags, config file, pydantic models, grid) happens before anything
    is written and maps to exit code 2; failures while executing map to 3.
    """
    try:
        execute = prepare(args)
    except ValidationError as e:
        print(f"hdp-lab: error: {_format_validation(e)}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"hdp-lab: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return execute()
    except Exception as e:
        logger.error("Command %s failed: %s", getattr(args, 'command', '?'), e)
        print(f"hdp-lab: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_run(args: argparse.Namespace) -> int:
    return _dispatch(_prepare_run, args)


def cmd_sweep(args: argparse.Namespace) -> int:
    return _dispatch(_prepare_sweep, args)


def cmd_report(args: argparse.Namespace) -> int:
    return _dispatch(_prepare_report, args)


def cmd_gen_uap(args: argparse.Namespace) -> int:
    return _dispatch(_prepare_gen_uap, args)


def cmd_dump_stage(args: argparse.Namespace) -> int:
    return _dispatch(_prepare_dump_stage, args)


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the hdp-lab console script; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if args.log_level:
        logger.setLevel(getattr(logging, args.log_level.upper(), logging.INFO))

    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
