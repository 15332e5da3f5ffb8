import functools
import json
import logging
from pathlib import Path

import click
import numpy as np
import pandas as pd
from tabulate import tabulate

from lisco.bench import ExperimentConfig, LiscoBenchmark
from lisco.config import load_config, write_config
from lisco.dataset import prepare_test_set
from lisco.errors import LiscoError, ValidationError
from lisco.lisco_solver import lisco_solve
from lisco.nn import load_weights, save_weights
from lisco.problems import ProblemKind, gen_instance, load_instance, save_instance
from lisco.training import network_metadata, train_predictor, train_solver, write_history
from lisco.utils.aggregate_results import read_summary

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])


@click.group(context_settings=CONTEXT_SETTINGS)
def cli():
    """
    LISCO: learned iterative solver for constrained optimization

    \b
    Usage:
    1. Run 'lisco config' to create a default config.json
    2. Run 'lisco bench --config config.json' to train, solve and score every method
    3. Run 'lisco summary --results-dir path/to/results' to print the cross-instance summary

    \b
    Individual stages are available as 'gen', 'oracle', 'train-predictor',
    'train-solver' and 'solve'.
    """
    pass


def handle_errors(command):
    """Map lisco errors to exit codes: 2 for invalid input, 3 for numerical failure."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except LiscoError as e:
            error_msg = f"Error: {e}"
            logging.error(error_msg)
            click.echo(error_msg, err=True)
            click.get_current_context().exit(getattr(e, "exit_code", 1))
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except Exception as e:
            error_msg = f"An unexpected error occurred: {e}"
            logging.error(error_msg)
            click.echo(error_msg, err=True)
            raise click.Abort()

    return wrapper


def preset_option(command):
    return click.option('--desk/--paper', 'desk', default=True,
                        help='Scale preset the config file overrides (default: desk)')(command)


def experiment_config(config, desk=True, seed=None) -> ExperimentConfig:
    base = ExperimentConfig.desk() if desk else ExperimentConfig.paper()
    cfg = ExperimentConfig.from_dict(load_config(config), base=base) if config else base
    return cfg.with_seed(seed) if seed is not None else cfg


def create_config(output='config.json', desk=True):
    cfg = ExperimentConfig.desk() if desk else ExperimentConfig.paper()
    output_path = Path(output)
    if output_path.exists():
        click.confirm(f"The file {output} already exists. Do you want to overwrite it?", abort=True)

    write_config({"_comment": "LISCO experiment configuration", **cfg.to_dict()}, output_path)
    click.echo(f"Configuration file created: {output_path}")
    click.echo("Please review and modify this file before running the benchmark.")


def parse_x(x, x_file, n_h):
    if (x is None) == (x_file is None):
        raise ValidationError("Give the parameter vector with exactly one of --x or --x-file")
    if x is not None:
        try:
            values = [float(v) for v in x.replace(",", " ").split()]
        except ValueError:
            raise ValidationError(f"Could not parse --x '{x}' as a list of numbers")
    else:
        with open(x_file, 'r') as f:
            try:
                values = json.load(f)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{x_file} is not a JSON list of numbers: {e}")
    values = np.asarray(values, dtype=float)
    if values.shape != (n_h,):
        raise ValidationError(f"Parameter vector has shape {values.shape}, the instance expects ({n_h},)")
    return values


@cli.command()
@click.option('--output', default='config.json', help='Name of the output configuration file')
@preset_option
def config(output, desk):
    """Create a default experiment config.json"""
    create_config(output, desk)


@cli.command()
@click.option('--kind', type=click.Choice([k.value for k in ProblemKind]), default=None,
              help='Problem family (default from config)')
@click.option('--config', 'config_file', type=click.Path(exists=True), help='Experiment config for the dimensions')
@click.option('--seed', type=int, default=0, show_default=True, help='Instance generation seed')
@click.option('--out', default='instance.json', show_default=True, help='Instance file to write')
@preset_option
@handle_errors
def gen(kind, config_file, seed, out, desk):
    """Generate a random problem instance"""
    cfg = experiment_config(config_file, desk)
    inst = gen_instance(kind or cfg.problem_kind, cfg.n_y, cfg.n_h, cfg.n_g, seed)
    save_instance(inst, out)
    click.echo(f"{inst.kind.value} instance (n_y={inst.n_y}, n_h={inst.n_h}, n_g={inst.n_g}, seed={seed}) "
               f"written to {out}")


@cli.command()
@click.option('--instance', required=True, type=click.Path(exists=True), help='Instance file')
@click.option('--config', 'config_file', type=click.Path(exists=True), help='Experiment config (n_test, oracle)')
@click.option('--seed', type=int, default=None, help='Test-set seed')
@click.option('--out', default='oracle_results', show_default=True, help='Directory for the oracle cache')
@preset_option
@handle_errors
def oracle(instance, config_file, seed, out, desk):
    """Sample test parameters and cache their reference solutions"""
    cfg = experiment_config(config_file, desk)
    inst = load_instance(instance)
    _, solutions = prepare_test_set(inst, cfg.n_test, cfg.test_seed if seed is None else seed, out, cfg.oracle)
    statuses = pd.Series([s.status.value for s in solutions.values()]).value_counts().reset_index()
    statuses.columns = ['status', 'count']
    click.echo(tabulate(statuses, headers='keys', tablefmt='pretty', showindex=False))


@cli.command('train-predictor')
@click.option('--instance', required=True, type=click.Path(exists=True), help='Instance file')
@click.option('--config', 'config_file', type=click.Path(exists=True), help='Experiment config (predictor block)')
@click.option('--seed', type=int, default=None, help='Training seed')
@click.option('--out', default='predictor.json', show_default=True, help='Weight file to write')
@preset_option
@handle_errors
def train_predictor_command(instance, config_file, seed, out, desk):
    """Train the predictor network on an instance"""
    cfg = experiment_config(config_file, desk).predictor
    if seed is not None:
        cfg = cfg.with_changes(seed=seed)
    inst = load_instance(instance)
    params, history = train_predictor(inst, cfg)
    save_weights(params, out, "predictor", network_metadata(inst, "predictor", cfg, dtype=cfg.dtype))
    history_file = Path(out).with_name(f"history_{Path(out).stem}.csv")
    write_history(history, history_file)
    click.echo(f"Predictor weights written to {out}, history to {history_file}")


@cli.command('train-solver')
@click.option('--instance', required=True, type=click.Path(exists=True), help='Instance file')
@click.option('--predictor', 'predictor_file', type=click.Path(exists=True),
              help='Predictor weights used to initialize the iterate pool')
@click.option('--config', 'config_file', type=click.Path(exists=True), help='Experiment config (solver block)')
@click.option('--seed', type=int, default=None, help='Training seed')
@click.option('--out', default='solver.json', show_default=True, help='Weight file to write')
@preset_option
@handle_errors
def train_solver_command(instance, predictor_file, config_file, seed, out, desk):
    """Train the solver network on an instance"""
    cfg = experiment_config(config_file, desk).solver.with_changes(use_predictor=predictor_file is not None)
    if seed is not None:
        cfg = cfg.with_changes(seed=seed)
    inst = load_instance(instance)
    predictor = load_weights(predictor_file, "predictor")[0] if predictor_file else None
    params, history = train_solver(inst, cfg, predictor=predictor)
    save_weights(params, out, "solver", network_metadata(inst, "solver", cfg, dtype=cfg.dtype))
    history_file = Path(out).with_name(f"history_{Path(out).stem}.csv")
    write_history(history, history_file)
    click.echo(f"Solver weights written to {out}, history to {history_file}")


@cli.command()
@click.option('--instance', required=True, type=click.Path(exists=True), help='Instance file')
@click.option('--weights', required=True, type=click.Path(exists=True), help='Solver weight file')
@click.option('--predictor', 'predictor_file', type=click.Path(exists=True), help='Predictor weight file')
@click.option('--x', 'x_values', default=None, help='Parameter vector, e.g. "0.1,-0.3"')
@click.option('--x-file', type=click.Path(exists=True), help='JSON file holding the parameter vector')
@click.option('--config', 'config_file', type=click.Path(exists=True), help='Experiment config (solve block)')
@click.option('--seed', type=int, default=None, help='Seed of the random start without predictor')
@click.option('--out', default=None, help='Write the full report as JSON to this file')
@preset_option
@handle_errors
def solve(instance, weights, predictor_file, x_values, x_file, config_file, seed, out, desk):
    """Solve one parameter vector with the trained networks"""
    opts = experiment_config(config_file, desk).solve
    opts = opts.with_changes(use_predictor=predictor_file is not None,
                             seed=opts.seed if seed is None else seed)
    inst = load_instance(instance)
    x = parse_x(x_values, x_file, inst.n_h)
    solver = load_weights(weights, "solver")[0]
    predictor = load_weights(predictor_file, "predictor")[0] if predictor_file else None

    report = lisco_solve(inst, x, predictor, solver, opts)
    rows = [
        ["status", report.status.value],
        ["converged", report.converged],
        ["iterations", report.iterations],
        ["T", f"{report.t_final:.3e}"],
        ["alpha", report.alpha_final],
        ["resets", report.resets],
        ["wall time (s)", f"{report.wall_time:.4f}"],
    ]
    click.echo(tabulate(rows, headers=['field', 'value'], tablefmt='pretty'))
    click.echo(f"y = {np.array2string(report.z_final.y, precision=6)}")
    if out:
        write_config(report.to_dict(), out)
        click.echo(f"Report written to {out}")


@cli.command()
@click.option('--config', 'config_file', type=click.Path(exists=True), help='Path to the experiment config file')
@click.option('--seed', type=int, default=None, help='Derive every seed of the experiment from this one')
@click.option('--out', default=None, help='Results directory (overrides out_dir of the config)')
@preset_option
@handle_errors
def bench(config_file, seed, out, desk):
    """Run the full experiment: generate, oracle, train, solve and score"""
    cfg = experiment_config(config_file, desk, seed)
    benchmark = LiscoBenchmark(cfg, output_dir=out)
    summary = benchmark.run_benchmark()
    print_summary(summary)
    click.echo("Benchmark completed successfully !!")


def print_summary(summary: pd.DataFrame):
    table = summary.pivot(index='metric', columns='method', values='mean').reset_index()
    click.echo(tabulate(table, headers='keys', tablefmt='pretty', showindex=False, floatfmt='.4g'))


@cli.command()
@click.option('--results-dir', required=True, type=click.Path(exists=True), help='Directory containing benchmark results')
@handle_errors
def summary(results_dir):
    """Print the cross-instance summary of a finished benchmark"""
    results_path = Path(results_dir)
    if not results_path.is_dir():
        raise click.BadParameter("The specified results directory is not a directory.")
    df = read_summary(results_path)
    click.echo(tabulate(df.round(6), headers='keys', tablefmt='pretty', showindex=False))


if __name__ == '__main__':
    cli()
