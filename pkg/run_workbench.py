"""
convdl Workbench - Main Entry Point
Synthetic data, sparse coding, dictionary learning, oracles, benchmarks and reports
"""
import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

from colorama import Fore, Style, init as colorama_init

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.config_loader import Config
from src.exceptions import ConfigError, ConvdlError, DivergenceError, NonFiniteError
from src.tensor_core import lambda_max

logger = logging.getLogger('convdl')

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NOT_CONVERGED = 4
EXIT_INTERRUPTED = 130


def ok(message: str):
    print(f"{Fore.GREEN}[OK]{Style.RESET_ALL} {message}")


def fail(message: str):
    print(f"{Fore.RED}[ERROR]{Style.RESET_ALL} {message}")


def warn(message: str):
    print(f"{Fore.YELLOW}[WARNING]{Style.RESET_ALL} {message}")


def banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def load_config(args) -> Config:
    """Config file (or defaults when the default file is absent), then CLI overrides"""
    path = Path(args.config)
    if not path.exists() and args.config == parser_default_config():
        config = Config(None)
    else:
        config = Config(args.config)

    if args.workers is not None:
        config.set('runtime', 'workers', args.workers)
    if args.scheduler is not None:
        config.set('runtime', 'scheduler', args.scheduler)
    if args.seed is not None:
        config.set('cdl', 'seed', args.seed)
        config.set('runtime', 'seed', args.seed)
    if args.out_dir is not None:
        out = Path(args.out_dir)
        config.set('data', 'output_dir', str(out))
        config.set('data', 'log_dir', str(out / 'logs'))
        config.set('data', 'checkpoint_dir', str(out / 'checkpoints'))
        out.mkdir(parents=True, exist_ok=True)
    if getattr(args, 'quiet', False):
        config.set('progress', 'show_progress', False)
    return config


def parser_default_config() -> str:
    return 'config/config.yaml'


def _write_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, default=str)
    return path


def cmd_make_data(args, config: Config) -> int:
    from src.signal_io import SignalStore, save_png
    from src.synthetic import FULL_PRESETS, generate_synthetic, generate_texture, get_preset

    store = SignalStore(config.output_dir)
    seed = config.get('cdl', 'seed')
    if args.texture:
        X = generate_texture(tuple(args.size), channels=args.channels, seed=seed)
        store.save('X', X)
        store.write_manifest({'kind': 'texture', 'sizes': list(args.size),
                              'channels': args.channels, 'seed': seed})
        save_png(config.output_dir / 'X.png', X.values)
        ok(f"Texture {tuple(args.size)}x{args.channels} written to {store.root}")
        return EXIT_OK

    if args.preset in FULL_PRESETS and not args.full:
        raise ConfigError(f"Preset '{args.preset}' uses the full experimental size; pass --full")
    overrides = {'seed': seed}
    if args.rho is not None:
        overrides['rho'] = args.rho
    if args.noise_std is not None:
        overrides['noise_std'] = args.noise_std
    spec = get_preset(args.preset, **overrides)
    X, D, Z = generate_synthetic(spec)
    store.save('X', X, meta={'preset': args.preset})
    store.save('D_true', D)
    store.save('Z_true', Z)
    store.write_manifest({
        'kind': 'synthetic',
        'preset': args.preset,
        'spec': spec.to_dict(),
        'generated_at': datetime.now().isoformat(),
        'files': store.list(),
    })
    if spec.d == 2 and spec.channels in (1, 3):
        save_png(config.output_dir / 'X.png', X.values)
    ok(f"Preset {args.preset}: X {X.values.shape}, {Z.nnz()} activations, written to {store.root}")
    return EXIT_OK


def cmd_encode(args, config: Config) -> int:
    from src.cdl_driver import init_dictionary
    from src.dist_runtime import RuntimeOptions, run_dicodile_z
    from src.grid_protocol import dump_grid, make_grid
    from src.signal_io import SignalStore, load_signal, read_sig

    X = load_signal(Path(args.input), grayscale=args.grayscale)
    if args.dictionary:
        D = read_sig(Path(args.dictionary), expected_kind='dictionary')
    else:
        D = init_dictionary(X, config.get('cdl', 'n_atoms'), tuple(config.get('cdl', 'atom_support')),
                            config.get('cdl', 'init_mode'), config.get('cdl', 'seed'))
    lmbd_max = lambda_max(X, D)
    lmbd = args.lambda_frac * lmbd_max
    logger.info(f"lambda = {args.lambda_frac} lambda_max = {lmbd:.4e}")

    runtime = config.get('runtime')
    grid = make_grid(X.domain, config.n_workers, D.support.sizes, runtime['split'])
    if args.dump_grid:
        dump_grid(grid, Path(args.dump_grid))
        logger.info(f"Grid written to {args.dump_grid}")
    options = RuntimeOptions(
        scheduler=config.scheduler, seed=runtime['seed'], soft_lock=runtime['soft_lock'],
        divergence_factor=runtime['divergence_factor'], max_iter=runtime['max_iter'],
        activity=runtime['activity'], timeout=runtime['timeout'],
    )
    tol = config.get('cdl', 'tol')
    try:
        z_hat, stats = run_dicodile_z(X, D, lmbd, grid, tol, options)
    except DivergenceError as e:
        if e.z_hat is not None:
            SignalStore(config.output_dir).save('Z_partial', e.z_hat)
        raise

    store = SignalStore(config.output_dir)
    store.save('Z', z_hat, meta={'lambda': lmbd, 'lambda_max': lmbd_max})
    _write_json(stats.to_dict(), config.output_dir / 'encode_stats.json')

    banner("SPARSE CODING")
    print(f"Workers:        {stats.workers} (grid {stats.grid}, {stats.scheduler})")
    print(f"Objective:      {stats.objective:.6e}")
    print(f"Nonzeros:       {z_hat.nnz()}")
    print(f"Accepted:       {stats.accepted} (soft-locked {stats.soft_locked})")
    print(f"Messages:       {stats.messages}")
    print(f"Runtime:        {stats.t_sec:.3f}s")
    if not stats.converged:
        warn("Sparse coding stopped before convergence")
        return EXIT_NOT_CONVERGED
    ok(f"Z written to {store.path('Z')}")
    return EXIT_OK


def cmd_learn(args, config: Config) -> int:
    from src.cdl_driver import LearningOrchestrator
    from src.report_builder import trace_table, write_csv
    from src.signal_io import atom_mosaic, read_sig, save_png

    if args.input:
        config.set('data', 'input', args.input)
    if args.max_outer is not None:
        config.set('cdl', 'max_outer', args.max_outer)
    if args.lambda_frac is not None:
        config.set('cdl', 'reg_mode', 'fraction')
        config.set('cdl', 'reg', args.lambda_frac)

    orchestrator = LearningOrchestrator(config)
    D0 = read_sig(Path(args.init_dictionary), expected_kind='dictionary') if args.init_dictionary else None
    results = orchestrator.run_learning(D0=D0, resume=not args.no_resume)
    if results['status'] != 'success':
        fail(f"Learning failed: {results.get('message', 'Unknown error')}")
        print("Check the log file in the log directory for details")
        return EXIT_ERROR

    export = orchestrator.export_results()
    result = results['result']
    # one row per outer iteration, the initial objective is kept in the JSON export
    write_csv(trace_table(result.trace[1:]), config.output_dir / 'trace.csv')
    if result.D.support.d == 2 and result.D.channels in (1, 3):
        save_png(config.output_dir / 'atoms.png', atom_mosaic(result.D))

    banner("[OK] LEARNING COMPLETED" if not result.interrupted else "[WARNING] LEARNING INTERRUPTED")
    stats = results['statistics']
    print(f"Outer iterations: {stats['n_iter']}")
    print(f"Objective:        {stats['objective']:.6e}")
    print(f"Converged:        {stats['converged']}")
    print(f"Time elapsed:     {results['elapsed_time']:.1f}s")
    print(f"Results:          {export}")
    if result.interrupted:
        return EXIT_INTERRUPTED
    return EXIT_OK


def cmd_verify(args, config: Config) -> int:
    from src import verify

    show = config.show_progress
    if args.all or not args.check:
        reports = verify.run_all(args.seed or 0, args.trials, args.samples, show_progress=show)
    else:
        checks = {
            'cost-delta': lambda: [verify.check_cost_delta(args.seed or 0, args.trials, show_progress=show)],
            'interference': lambda: [verify.check_interference(args.seed or 0, args.trials, show_progress=show)],
            'lasso': lambda: [verify.check_lasso_equivalence(args.seed or 0, args.trials, show_progress=show)],
            'acceptance': lambda: [verify.check_acceptance((512, 512), c, (16, 16), args.samples, args.seed or 0)
                                   for c in ((2, 2), (4, 4))],
        }
        reports = [r for name in args.check for r in checks[name]()]
        for report in reports:
            report.log()

    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    path = _write_json([r.to_dict() for r in reports], config.output_dir / f'verify_{timestamp}.json')

    banner("ORACLES")
    for report in reports:
        status = f"{Fore.GREEN}PASS{Style.RESET_ALL}" if report.passed else f"{Fore.RED}FAIL{Style.RESET_ALL}"
        print(f"  {report.name:28} {status}  max error {report.max_rel_error:.3e} "
              f"(tol {report.tolerance:.1e}, {report.trials} trials)")
    print(f"\nReports written to {path}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_ERROR


def cmd_bench(args, config: Config) -> int:
    from src import bench
    from src.report_builder import bench_table, summary_table, write_csv
    from src.synthetic import FULL_PRESETS

    if args.preset in FULL_PRESETS and not args.full:
        raise ConfigError(f"Preset '{args.preset}' uses the full experimental size; pass --full")
    seed = args.seed or 0
    show = config.show_progress
    metrics = ('runtime', 'objective', 'cost')
    if args.kind == 'strategies':
        result = bench.bench_strategies(args.preset, config.n_workers, args.repeats,
                                        seed=seed, show_progress=show)
        group = ['strategy']
    elif args.kind == 'iteration-cost':
        result = bench.iteration_cost(args.preset, seed=seed)
        group = ['length_factor', 'strategy']
    elif args.kind == 'soft-lock':
        result = bench.bench_soft_lock(args.preset, config.n_workers if args.workers else 49,
                                       args.repeats, seed=seed, show_progress=show)
        group = ['soft_lock']
        metrics = ('rounds', 'runtime')
    else:
        result = bench.bench_scaling(args.preset, args.worker_list, args.split, args.repeats,
                                     scheduler=config.scheduler,
                                     soft_lock=not args.no_soft_lock,
                                     seed=seed, show_progress=show)
        group = ['workers']
        diverged = sum(bool(run.get('diverged')) for run in result.runs)
        if diverged:
            warn(f"{diverged}/{len(result.runs)} runs tripped the divergence guard")

    _write_json(result.to_dict(), config.output_dir / f'bench_{result.scenario}.json')
    table = bench_table([result])
    write_csv(table, config.output_dir / f'bench_{result.scenario}.csv')
    summary = summary_table(table, group, metrics=metrics)

    banner(f"BENCHMARK {result.scenario}")
    print(summary.to_string(index=False))
    for mode, rate in result.meta.get('trip_rate', {}).items():
        print(f"  {mode:14} divergence guard tripped in {rate:.0%} of runs")
    for skipped in result.skipped:
        warn(f"W={skipped['workers']} skipped (max feasible {skipped['max_feasible']})")
    if 'max_feasible' in result.meta:
        print(f"\nMax feasible W ({args.split} split): {result.meta['max_feasible']}")
    return EXIT_OK


def cmd_report(args, config: Config) -> int:
    from src.report_builder import build_report

    input_dir = Path(args.input_dir) if args.input_dir else config.output_dir
    written = build_report(input_dir, config.output_dir, excel=not args.no_excel)
    if not written:
        warn(f"Nothing to report in {input_dir}")
        return EXIT_ERROR
    for name, path in written.items():
        ok(f"{name}: {path}")
    return EXIT_OK


def cmd_status(args, config: Config) -> int:
    from src.signal_io import SignalStore

    directory = Path(args.checkpoint_dir) if args.checkpoint_dir else config.checkpoint_dir
    manifest = SignalStore(directory).read_manifest()
    banner("CONVDL - CHECKPOINT STATUS")
    if manifest is None:
        print("STATUS: Not started yet")
        print(f"  No checkpoint found in {directory}")
        return EXIT_OK
    trace = manifest.get('trace', [])
    print(f"STATUS: {manifest.get('iteration', 0)} outer iterations done")
    print(f"  Lambda:          {manifest.get('lambda', float('nan')):.4e}")
    if trace:
        print(f"  Objective:       {trace[0]:.6e} -> {trace[-1]:.6e}")
    print(f"  Last update:     {manifest.get('last_saved', 'Unknown')}")
    print(f"  Files:           {', '.join(SignalStore(directory).list())}")
    return EXIT_OK


COMMANDS = {
    'make-data': cmd_make_data,
    'encode': cmd_encode,
    'learn': cmd_learn,
    'verify': cmd_verify,
    'bench': cmd_bench,
    'report': cmd_report,
    'status': cmd_status,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=parser_default_config(),
                        help='Path to configuration file (default: config/config.yaml)')
    common.add_argument('--seed', type=int, help='Random seed (overrides config)')
    common.add_argument('--workers', type=int, help='Number of workers W (overrides config)')
    common.add_argument('--scheduler', choices=['deterministic', 'async'],
                        help='Runtime backend (overrides config)')
    common.add_argument('--out-dir', help='Output directory (overrides config)')
    common.add_argument('--quiet', action='store_true', help='Disable progress bars')

    parser = argparse.ArgumentParser(
        description='convdl - distributed convolutional dictionary learning workbench',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic 1D data at desk scale
  python run_workbench.py make-data --preset 1d-tiny --out-dir output/1d

  # Sparse coding with 4 workers
  python run_workbench.py encode --input output/1d/X.sig --dictionary output/1d/D_true.sig --workers 4

  # Dictionary learning on a 2D preset
  python run_workbench.py learn --input output/2d/X.sig --max-outer 3

  # All oracles
  python run_workbench.py verify --all
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('make-data', parents=[common], help='Generate synthetic data')
    p.add_argument('--preset', default='1d-tiny', help='Synthetic preset name')
    p.add_argument('--full', action='store_true', help='Allow full experimental presets')
    p.add_argument('--rho', type=float, help='Bernoulli activation rate')
    p.add_argument('--noise-std', type=float, help='Additive noise standard deviation')
    p.add_argument('--texture', action='store_true', help='Generate a texture image instead')
    p.add_argument('--size', type=int, nargs=2, default=[128, 128], help='Texture size')
    p.add_argument('--channels', type=int, default=1, help='Texture channels')

    p = sub.add_parser('encode', parents=[common], help='Distributed sparse coding')
    p.add_argument('--input', required=True, help='.sig signal or image file')
    p.add_argument('--dictionary', help='.sig dictionary (default: initialized from config)')
    p.add_argument('--lambda-frac', type=float, default=0.1, help='lambda as a fraction of lambda_max')
    p.add_argument('--grayscale', action='store_true', help='Convert images to luminance')
    p.add_argument('--dump-grid', help='Write the worker grid and border geometry JSON here')

    p = sub.add_parser('learn', parents=[common], help='Convolutional dictionary learning')
    p.add_argument('--input', help='.sig signal or image file (overrides config)')
    p.add_argument('--max-outer', type=int, help='Outer iterations (overrides config)')
    p.add_argument('--lambda-frac', type=float, help='lambda as a fraction of lambda_max')
    p.add_argument('--init-dictionary', help='.sig initial dictionary')
    p.add_argument('--no-resume', action='store_true', help='Ignore an existing checkpoint')

    p = sub.add_parser('verify', parents=[common], help='Run the oracles')
    p.add_argument('--all', action='store_true', help='Run every oracle (default)')
    p.add_argument('--check', nargs='+', choices=['cost-delta', 'interference', 'lasso', 'acceptance'])
    p.add_argument('--trials', type=int, default=100)
    p.add_argument('--samples', type=int, default=100_000)

    p = sub.add_parser('bench', parents=[common], help='Benchmarks')
    p.add_argument('kind', choices=['strategies', 'scaling', 'iteration-cost', 'soft-lock'])
    p.add_argument('--preset', default=None, help='Synthetic preset name')
    p.add_argument('--full', action='store_true', help='Allow full experimental presets')
    p.add_argument('--repeats', type=int, default=None,
                   help='Repeats (seeds for soft-lock), default 5 or 10 for soft-lock')
    p.add_argument('--worker-list', type=int, nargs='+', default=[1, 4, 9])
    p.add_argument('--split', choices=['grid', 'line'], default='grid')
    p.add_argument('--no-soft-lock', action='store_true',
                   help='Disable soft-locks in the scaling runs')

    p = sub.add_parser('report', parents=[common], help='CSV/XLSX tables from result files')
    p.add_argument('--input-dir', help='Directory holding bench/verify/learning JSON files')
    p.add_argument('--no-excel', action='store_true', help='Skip the Excel workbook')

    p = sub.add_parser('status', parents=[common], help='Summarize a checkpoint')
    p.add_argument('--checkpoint-dir', help='Checkpoint directory (default from config)')
    return parser


def main(argv=None) -> int:
    """Main entry point with CLI argument parsing"""
    colorama_init()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == 'bench' and args.preset is None:
        args.preset = '1d-tiny' if args.kind in ('strategies', 'iteration-cost') else '2d-tiny'
    if args.command == 'bench' and args.repeats is None:
        args.repeats = 10 if args.kind == 'soft-lock' else 5

    try:
        config = load_config(args)
    except ConvdlError as e:
        fail(f"Error loading configuration: {e}")
        print(f"   Config file: {args.config}")
        return EXIT_CONFIG

    from src.cdl_driver import setup_logging
    if args.command != 'learn':
        # the learning orchestrator sets up its own handlers
        setup_logging(config.log_dir, config.log_level)

    try:
        return COMMANDS[args.command](args, config)

    except KeyboardInterrupt:
        warn("Interrupted by user. Progress has been saved; run again to resume.")
        return EXIT_INTERRUPTED

    except DivergenceError as e:
        fail(f"Divergence abort: {e} (workers {e.workers})")
        return EXIT_DIVERGED

    except NonFiniteError as e:
        fail(f"Non-finite values: {e}")
        return EXIT_DIVERGED

    except (ConfigError, ValueError) as e:
        fail(str(e))
        return EXIT_CONFIG

    except ConvdlError as e:
        fail(str(e))
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_ERROR

    except Exception as e:
        fail(f"Unexpected error: {e}")
        logger.error(f"{args.command} failed", exc_info=True)
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
