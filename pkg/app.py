import functools
import logging
import sys

import click
from dotenv import load_dotenv

from project_src.operator_dynamics.benchmark import bench_pipeline, synthetic_gate_benchmark
from project_src.operator_dynamics.data_utils import (
    EXIT_OK,
    exit_code_for,
    load_config,
    setup_logging,
)
from project_src.operator_dynamics.simulation import oracle_check_pipeline, simulation_pipeline, sweep_pipeline
from project_src.operator_dynamics.src.errors import ContractViolation
from project_src.operator_dynamics.src.util import parse_angle

# Load environment variables (ORQA_* settings)
load_dotenv()

logger = logging.getLogger("orqa")


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers")


def _float_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers")


def _angle_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [parse_angle(part.strip()) for part in value.split(",") if part.strip()]
    except ContractViolation as exc:
        raise click.BadParameter(str(exc))


def run_options(command):
    """Flags shared by every command; each one overrides the config file."""
    options = [
        click.option("--config", "config_path", type=click.Path(), help="Flat key/value run configuration."),
        click.option("--preset", type=click.Choice(["kicked-ising-eagle127", "kicked-ising-chain"])),
        click.option("--circuit-file", type=click.Path(), help="Circuit file; needs --n-qubits."),
        click.option("--n-qubits", type=int),
        click.option("--geometry", type=click.Path(), help="Edge list 'i j [color]' for the presets."),
        click.option("--chain-length", type=int),
        click.option("--theta-x", help="Radians, or a multiple of pi such as 0.9pi."),
        click.option("--theta-zz"),
        click.option("--layers", type=int),
        click.option("--epsilon0", type=float),
        click.option("--cadence", type=click.Choice(["gate", "layer"])),
        click.option("--workers", type=int),
        click.option("--block-size", "block_size_bits", type=int),
        click.option("--perturbation", "perturbation_s", type=int),
        click.option("--n-jobs", type=int, help="Threads for the worker phases; 1 runs round-robin."),
        click.option("--observable", help="Pauli label, e.g. Z62."),
        click.option("--readout", type=click.Choice(["zero-state", "coefficient"])),
        click.option("--out", type=click.Path()),
        click.option("--histogram-bins", type=int),
        click.option("--checkpoint-every", type=int),
        click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False)),
        click.option("--quiet", is_flag=True, default=None),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _configure(options):
    config_path = options.pop("config_path", None)
    config = load_config(config_path, **options)
    setup_logging(config.log_level, config.quiet)
    return config


def guarded(action):
    """Turn library errors into exit codes with a diagnostic on stderr."""
    @functools.wraps(action)
    def wrapper(*args, **kwargs):
        try:
            action(*args, **kwargs)
        except Exception as exc:
            if not logging.getLogger().handlers:
                setup_logging()
            logger.error("%s: %s", type(exc).__name__, exc)
            logger.debug("traceback", exc_info=True)
            sys.exit(exit_code_for(exc))
        sys.exit(EXIT_OK)
    return wrapper


def _run(options):
    config = _configure(options)
    ledger, engine = simulation_pipeline(config)
    last = ledger[-1]
    click.echo(f"t={last.t} observable={last.observable:.14f} |O|={last.term_count} -> {config.out}")


def _oracle(options):
    config = _configure(options)
    report, deviation = oracle_check_pipeline(config)
    click.echo(report.to_string(index=False))
    click.echo(f"max deviation: {deviation:.3e}")


def _bench(options, sweep=None, synthetic_sizes=None):
    config = _configure(options)
    if synthetic_sizes:
        frame, slope = synthetic_gate_benchmark(synthetic_sizes, workers=config.workers)
        click.echo(frame.to_string(index=False))
        click.echo(f"log-log slope of ms/gate vs |O|: {slope:.3f}")
        return
    frame = bench_pipeline(config, sweep=sweep)
    click.echo(frame.groupby("workers")[["wall_ms_per_gate", "exchange_ms_per_gate"]].mean().to_string())


def _sweep(options, theta_xs=None, epsilons=None):
    config = _configure(options)
    frame = sweep_pipeline(config, theta_xs, epsilons)
    click.echo(frame[frame["t"] == frame["t"].max()].to_string(index=False))


@click.group(invoke_without_command=True)
@run_options
@click.option("--oracle-check", "oracle_check", is_flag=True, help="Compare the engine with the dense references.")
@click.option("--bench", "bench", is_flag=True, help="Run the worker-count sweep.")
@click.pass_context
def cli(ctx, oracle_check, bench, **options):
    """Partitioned Heisenberg-picture Pauli dynamics."""
    if ctx.invoked_subcommand is not None:
        return
    if oracle_check:
        guarded(_oracle)(options)
    elif bench:
        guarded(_bench)(options)
    else:
        guarded(_run)(options)


@cli.command()
@run_options
def run(**options):
    """Evolve the observable and write ledger.csv (plus histograms/checkpoints)."""
    guarded(_run)(options)


@cli.command("oracle-check")
@run_options
def oracle_check(**options):
    """Engine vs state vector / dense conjugation / stored reference values."""
    guarded(_oracle)(options)


@cli.command()
@run_options
@click.option("--sweep", callback=_int_list, help="Worker counts, e.g. 1,2,4,8.")
@click.option("--synthetic", "synthetic_sizes", callback=_int_list,
              help="Time single gates on random operators of these sizes instead.")
def bench(sweep, synthetic_sizes, **options):
    """Wall time per gate, split into compute and exchange."""
    guarded(_bench)(options, sweep=sweep, synthetic_sizes=synthetic_sizes)


@cli.command()
@run_options
@click.option("--theta-xs", callback=_angle_list, help="Kick angles, e.g. 0,0.25pi,0.5pi.")
@click.option("--epsilons", callback=_float_list, help="Truncation thresholds, e.g. 1e-2,1e-4,1e-5.")
def sweep(theta_xs, epsilons, **options):
    """Observable and |O| per layer over a grid of kick angles and thresholds."""
    guarded(_sweep)(options, theta_xs=theta_xs, epsilons=epsilons)


if __name__ == "__main__":
    cli()
