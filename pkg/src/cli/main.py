"""
Command-line entry point: python -m src.cli <command> [options]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""

from typing import Callable, Dict, List, Optional
from pathlib import Path
import argparse
import json
import sys
import torch

from src.core.config import settings
from src.core.exceptions import (
    EXIT_OK,
    ConfigurationException,
    LatentFusionException,
    OracleFailure,
    TrainingDivergedException,
    exit_code_for,
)
from src.core.logging_config import get_logger, setup_logging
from src.models.pydantic_models import Profile, RegressionMode, RegressorKind, RunConfig, Variant
from src.models.schemas import OracleResult
from src.services.checkpoint_service import load_checkpoint, save_checkpoint
from src.services.dataset_service import Dataset, load_dataset
from src.services.evaluation_service import evaluation_service, plot_error_ellipses
from src.services.fusion_model import build_model
from src.services.oracle_service import oracle_service
from src.services.regression_service import held_out_errors, regression_service
from src.services.simulation_service import generate_dataset
from src.services.training_service import training_service

logger = get_logger(__name__)

RESOLVED_CONFIG_FILE = 'resolved_config.json'
LOSS_TRACE_FILE = 'loss_trace.csv'
COMPARISON_FILE = 'comparison.csv'

class CLIArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors surface as ConfigurationException (exit code 1)"""

    def error(self, message):
        raise ConfigurationException(f"{self.prog}: {message}", error_code="USAGE")

# Configuration

def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any), then command-line overrides, then derived seeds and shapes"""
    try:
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigurationException(f"config file not found: {path}", error_code="MISSING_CONFIG")
            config = RunConfig.model_validate_json(path.read_text())
        else:
            config = RunConfig()

        if args.profile:
            config = config.with_profile(Profile(args.profile))
        updates = {}
        if args.seed is not None:
            updates['seed'] = args.seed
        model_updates = {}
        if getattr(args, 'variant', None):
            model_updates['variant'] = Variant(args.variant)
        if getattr(args, 'epochs', None) is not None:
            model_updates['epochs'] = args.epochs
        if model_updates:
            updates['model'] = config.model.model_copy(update=model_updates)
        if getattr(args, 'trajectories', None) is not None:
            updates['sim'] = config.sim.model_copy(update={'num_trajectories': args.trajectories})
        if getattr(args, 'regressor', None):
            updates['eval'] = config.eval.model_copy(update={'regressor': RegressorKind(args.regressor)})
        return config.model_copy(update=updates).resolved()
    except ValueError as e:
        raise ConfigurationException(f"invalid configuration: {str(e)}", error_code="INVALID_CONFIG") from e

def write_resolved_config(config: RunConfig, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG_FILE
    path.write_text(config.model_dump_json(indent=2))
    return path

def _require_dataset(path: Path) -> Dataset:
    if not Path(path).is_dir():
        raise ConfigurationException(f"dataset directory not found: {path}", error_code="MISSING_DATASET")
    return load_dataset(path)

def _require_checkpoint(path: Path):
    if not Path(path).is_dir():
        raise ConfigurationException(f"checkpoint not found: {path}", error_code="MISSING_CHECKPOINT")
    return load_checkpoint(path)

def _echo(payload: dict) -> None:
    print(json.dumps(payload, indent=2, default=str))

# Commands

def cmd_gen_data(args: argparse.Namespace) -> None:
    config = load_run_config(args)
    path = Path(args.out) if args.out else config.io.dataset_path
    dataset = generate_dataset(config.sim, path)
    write_resolved_config(config, path)
    manifest = dataset.manifest
    _echo({
        'dataset': str(path),
        'num_trajectories': manifest.num_trajectories,
        'seq_len': manifest.seq_len,
        'image_shape': manifest.image_shape,
        'substeps': manifest.substeps,
        'train': len(manifest.train_indices),
        'eval': len(manifest.eval_indices),
        'contact_rate': manifest.contact_rate,
        'seed': manifest.seed,
    })

def cmd_train(args: argparse.Namespace) -> None:
    config = load_run_config(args)
    dataset = _require_dataset(config.io.dataset_path)
    out = Path(args.out) if args.out else config.io.checkpoint_path
    model = build_model(config.model)
    try:
        result = training_service.train(model, dataset, seed=config.component_seed('train'))
    except TrainingDivergedException as e:
        # parameters were restored to the last good step
        save_checkpoint(model, out, seed=config.seed, training_step=e.last_good_step)
        training_service.write_loss_trace(e.loss_trace, out / LOSS_TRACE_FILE)
        write_resolved_config(config, out)
        raise
    save_checkpoint(model, out, seed=config.seed, training_step=result.steps)
    training_service.write_loss_trace(result.loss_trace, out / LOSS_TRACE_FILE)
    write_resolved_config(config, out)
    _echo({
        'checkpoint': str(out),
        'variant': config.model.variant.value,
        'steps': result.steps,
        'epoch_mean_elbo': result.epoch_elbo,
    })

def _checkpoint_paths(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    return [Path(p) for p in args.checkpoint] if args.checkpoint else [config.io.checkpoint_path]

def cmd_evaluate(args: argparse.Namespace) -> None:
    config = load_run_config(args)
    dataset = _require_dataset(config.io.dataset_path)
    report_dir = Path(args.out) if args.out else config.io.report_dir
    paths = _checkpoint_paths(args, config)
    indices = dataset.split(config.eval.split)

    reports, summary = [], []
    for position, path in enumerate(paths):
        model, manifest = _require_checkpoint(path)
        suffix = f'_{position}' if len(paths) > 1 else ''
        stem = f'{model.config.variant.value}{suffix}'
        report, rows = evaluation_service.eval_prediction(
            model, dataset, indices, config.eval.context_steps, config.eval.horizon,
            seed=manifest.seed, batch_size=config.eval.batch_size,
        )
        evaluation_service.write_report(report, rows, report_dir, f'prediction_{stem}', plots=config.eval.plots)
        if config.eval.plots:
            evaluation_service.filmstrip(model, dataset, int(indices[0]), config.eval.context_steps,
                                         config.eval.horizon, report_dir / f'filmstrip_{stem}.svg')
        if args.reconstruction:
            recon, recon_rows = evaluation_service.eval_reconstruction(
                model, dataset, indices, config.eval.context_steps,
                seed=manifest.seed, batch_size=config.eval.batch_size,
            )
            evaluation_service.write_report(recon, recon_rows, report_dir, f'reconstruction_{stem}',
                                            plots=config.eval.plots)
        reports.append(report)
        summary.append({'checkpoint': str(path), 'variant': report.metadata.variant.value,
                        **report.aggregate.model_dump()})

    if len(reports) > 1:
        table = evaluation_service.compare_reports(reports)
        table.to_csv(report_dir / COMPARISON_FILE, index=False)
    write_resolved_config(config, report_dir)
    _echo({'report_dir': str(report_dir), 'reports': summary})

def cmd_regress(args: argparse.Namespace) -> None:
    config = load_run_config(args)
    dataset = _require_dataset(config.io.dataset_path)
    report_dir = Path(args.out) if args.out else config.io.report_dir
    report_dir.mkdir(parents=True, exist_ok=True)
    modes = list(RegressionMode) if args.mode == 'both' else [RegressionMode(args.mode)]
    paths = _checkpoint_paths(args, config)
    indices = dataset.split(config.eval.split)

    summary = []
    for position, path in enumerate(paths):
        model, _ = _require_checkpoint(path)
        suffix = f'_{position}' if len(paths) > 1 else ''
        ellipses = []
        for mode in modes:
            report, pairs = regression_service.regress_eval(
                model, dataset, indices, config.eval, mode, seed=config.component_seed('regression'),
            )
            stem = f'regression_{model.config.variant.value}{suffix}_{mode.value}'
            (report_dir / f'{stem}.json').write_text(report.model_dump_json(indent=2))
            pairs.to_csv(report_dir / f'{stem}.csv', index=False)
            ellipses.append((mode.value, report, held_out_errors(pairs)))
            summary.append({'checkpoint': str(path), 'variant': report.variant.value, 'mode': mode.value,
                            'regressor': report.regressor.value, 'position_rmse': report.position_rmse,
                            'mean_abs_translation_error': report.mean_abs_translation_error})
        if config.eval.plots:
            plot_error_ellipses(ellipses, report_dir / f'ellipse_{model.config.variant.value}{suffix}.svg')
    write_resolved_config(config, report_dir)
    _echo({'report_dir': str(report_dir), 'reports': summary})

def _oracle_command(run: Callable[[argparse.Namespace, int], OracleResult]) -> Callable[[argparse.Namespace], None]:
    def command(args: argparse.Namespace) -> None:
        config = load_run_config(args)
        result = run(args, config.seed)
        if args.out:
            out = Path(args.out)
            write_resolved_config(config, out)
            (out / f'{result.name}.json').write_text(result.model_dump_json(indent=2))
        _echo(result.model_dump())
        if not result.passed:
            raise OracleFailure(f"{result.name} failed: statistic {result.statistic:.3g} vs threshold "
                                f"{result.threshold:.3g}", error_code="ORACLE_FAILED", details=result.details)
    return command

COMMANDS: Dict[str, Callable[[argparse.Namespace], None]] = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'regress': cmd_regress,
    'gradcheck': _oracle_command(lambda args, seed: oracle_service.gradcheck(seed=seed)),
    'poecheck': _oracle_command(lambda args, seed: oracle_service.poecheck(num_sets=args.sets, seed=seed)),
    'klcheck': _oracle_command(lambda args, seed: oracle_service.klcheck(num_pairs=args.pairs, seed=seed)),
    'elbocheck': _oracle_command(lambda args, seed: oracle_service.elbocheck(
        num_trajectories=args.trajectories_checked, seed=seed)),
}

def build_parser() -> CLIArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='RunConfig JSON (e.g. a resolved_config.json)')
    common.add_argument('--seed', type=int, help='run seed; component seeds derive from it')
    common.add_argument('--profile', choices=[p.value for p in Profile])
    common.add_argument('--out', help='output directory')

    parser = CLIArgumentParser(prog='latent-fusion', description=settings.APP_NAME)
    parser.add_argument('--version', action='version', version=f'%(prog)s {settings.VERSION}')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=CLIArgumentParser)

    gen = commands.add_parser('gen-data', parents=[common], help='simulate and write a dataset')
    gen.add_argument('--trajectories', type=int, help='number of trajectories N')

    train = commands.add_parser('train', parents=[common], help='train a model variant')
    train.add_argument('--variant', choices=[v.value for v in Variant])
    train.add_argument('--epochs', type=int)

    evaluate = commands.add_parser('evaluate', parents=[common], help='score image predictions')
    evaluate.add_argument('--checkpoint', action='append', help='checkpoint directory (repeatable)')
    evaluate.add_argument('--reconstruction', action='store_true',
                          help='also score reconstructions of the context frames')

    regress = commands.add_parser('regress', parents=[common], help='frozen-latent position regression')
    regress.add_argument('--checkpoint', action='append', help='checkpoint directory (repeatable)')
    regress.add_argument('--regressor', choices=[r.value for r in RegressorKind])
    regress.add_argument('--mode', choices=[m.value for m in RegressionMode] + ['both'], default='both')

    commands.add_parser('gradcheck', parents=[common], help='ELBO gradient vs central differences')
    poe = commands.add_parser('poecheck', parents=[common], help='product of experts vs grid oracle')
    poe.add_argument('--sets', type=int, default=100)
    kl = commands.add_parser('klcheck', parents=[common], help='analytic KL vs Monte-Carlo')
    kl.add_argument('--pairs', type=int, default=50)
    bound = commands.add_parser('elbocheck', parents=[common], help='importance-sampled evidence vs ELBO')
    bound.add_argument('--trajectories', dest='trajectories_checked', type=int, default=20)
    return parser

def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    torch.set_num_threads(max(1, settings.LF_THREADS))
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
        return EXIT_OK
    except LatentFusionException as e:
        print(f"error: {e.message}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        print(f"error: {str(e)}", file=sys.stderr)
        return exit_code_for(e)
