import click
import asyncio
import sys
from typing import Dict
from rich.console import Console
from rich.table import Table
from rich.panel import Panel
from pathlib import Path
import numpy as np
import yaml

from agents.adversary import NilmAdversary
from core.config import (
    ExperimentConfig,
    build_params,
    build_table_model,
    echo_cardinalities,
    load_config,
    save_config,
)
from core.ess import EssState, compare_configurations, feasible_actions, model_divergence
from core.household import concatenate_days, sample_trace
from core.orchestrator import STAGES, ExperimentOrchestrator, ExperimentReport, StageError
from tools.trace_io import load_trace, read_control_log

console = Console()

config_option = click.option('--config', '-c', default='config/config.yaml', help='Path to config file')
seed_option = click.option('--seed', type=int, default=None, help='Override every seed')
out_option = click.option('--out', '-o', default=None, help='Output directory (overrides config)')
mode_option = click.option('--mode', type=click.Choice(['modal', 'sample']), default=None,
                           help='Controller output selection (overrides config)')


@click.group()
def cli():
    """Quiet Meter - battery-based smart meter privacy experiments"""
    pass


def _load(config: str, seed=None, out=None, mode=None) -> ExperimentConfig:
    try:
        return load_config(config, seed=seed, out=out, mode=mode)
    except (FileNotFoundError, ValueError) as e:
        console.print(f"[red]Error loading config: {e}[/red]")
        sys.exit(1)


def _execute(cfg: ExperimentConfig, stop_after: str, reuse_policy: bool) -> ExperimentOrchestrator:
    orchestrator = ExperimentOrchestrator(cfg)
    try:
        with console.status(f"[bold green]Running up to stage {stop_after}...", spinner="dots"):
            asyncio.run(orchestrator.execute(stop_after=stop_after, reuse_policy=reuse_policy))
    except StageError as e:
        console.print(f"[red]Stage '{e.stage}' failed: {e.cause}[/red]")
        console.print(f"[yellow]Partial outputs in {orchestrator.output_dir} are marked STALE[/yellow]")
        sys.exit(1)
    return orchestrator


@cli.command()
@config_option
@seed_option
@out_option
def estimate(config, seed, out):
    """Resolve the household model and write model.yaml"""
    cfg = _load(config, seed, out)
    orchestrator = _execute(cfg, "estimate", reuse_policy=True)
    _display_model(orchestrator.model.to_dict())
    console.print(f"[green]✓ Model saved to {orchestrator.output_dir / 'model.yaml'}[/green]")


@cli.command()
@config_option
@seed_option
@out_option
def synthesize(config, seed, out):
    """Synthesize the control policy and write policy.npz"""
    cfg = _load(config, seed, out)
    _display_cardinalities(echo_cardinalities(cfg))
    orchestrator = _execute(cfg, "synthesize", reuse_policy=False)
    console.print(f"[green]✓ Policy {orchestrator.policy.shape} saved to "
                  f"{orchestrator.output_dir / 'policy.npz'}[/green]")


@cli.command()
@config_option
@seed_option
@out_option
@mode_option
def run(config, seed, out, mode):
    """Run the controller over the validation days from every initial SOC"""
    cfg = _load(config, seed, out, mode)
    orchestrator = _execute(cfg, "run", reuse_policy=True)

    table = Table(title="Controller runs")
    table.add_column("Initial SOC", style="cyan")
    table.add_column("Days", style="yellow")
    table.add_column("Logs", style="green")
    for soc_run in orchestrator.runs:
        table.add_row(f"{soc_run.fraction:.0%}", str(len(soc_run.logs)),
                      str(orchestrator.output_dir / "logs"))
    console.print(table)


@cli.command()
@config_option
@seed_option
@out_option
@mode_option
@click.option('--log', 'log_path', default=None, help='Attack one exported control log instead')
@click.option('--truth', default=None, help='Labeled trace the control log was run on')
def attack(config, seed, out, mode, log_path, truth):
    """Attack meter traces with the edge-detecting load monitor"""
    cfg = _load(config, seed, out, mode)

    if log_path is None:
        orchestrator = _execute(cfg, "attack", reuse_policy=True)
        _display_detections({label: report.to_dict() for label, report in orchestrator.detections.items()})
        return

    if truth is None:
        console.print("[red]--log needs --truth with the labeled trace[/red]")
        sys.exit(1)
    try:
        orchestrator = _execute(cfg, "estimate", reuse_policy=True)
        adversary = NilmAdversary(cfg.grids.q, cfg.attacker.threshold, cfg.attacker.slot_tolerance)
        adversary.fit(concatenate_days(orchestrator.training))
        frame = read_control_log(log_path)
        labels = load_trace(truth, tuple(cfg.household.hypothesis_names)).h_labels
        if labels is None or len(labels) != len(frame):
            raise ValueError(f"{truth} must hold one label per logged slot")
        report = adversary.execute(frame["y"].to_numpy(dtype=float), labels)
    except (FileNotFoundError, ValueError) as e:
        console.print(f"[red]Error in stage attack: {e}[/red]")
        sys.exit(1)
    _display_detections({Path(log_path).name: report.to_dict()})


@cli.command()
@config_option
@seed_option
@out_option
@mode_option
@click.option('--stage', type=click.Choice(list(STAGES)), default='report', help='Stop after this stage')
@click.option('--reuse-policy/--resynthesize', default=False, help='Reuse a matching saved policy')
def evaluate(config, seed, out, mode, stage, reuse_policy):
    """Run the full experiment pipeline"""
    cfg = _load(config, seed, out, mode)

    console.print(Panel.fit(
        f"[bold blue]Quiet Meter evaluation[/bold blue]\n"
        f"Config: [green]{config}[/green]  Output: [green]{cfg.output.directory}[/green]",
        border_style="blue"
    ))
    _display_cardinalities(echo_cardinalities(cfg))

    orchestrator = _execute(cfg, stage, reuse_policy=reuse_policy)
    if orchestrator.report is not None:
        _display_report(orchestrator.report)
    console.print(f"\n[bold green]Completed through stage {stage}[/bold green]\n")


@cli.command('compare-ess')
@config_option
@seed_option
@click.option('--trace', 'trace_path', default=None, help='Demand trace (synthetic day when omitted)')
@click.option('--action', type=float, default=100.0, help='Constant battery power in W')
@click.option('--soc', type=float, default=0.5, help='Initial SOC fraction')
def compare_ess(config, seed, trace_path, action, soc):
    """Compare parallel and series wiring losses, and the two battery models"""
    cfg = _load(config, seed)
    params = build_params(cfg)

    try:
        if trace_path:
            demand = load_trace(trace_path).x_watts
        else:
            model = build_table_model(cfg)
            demand = sample_trace(model, cfg.grids.horizon, [cfg.seeds.data, 2]).x_watts
        losses = compare_configurations(demand, params, [action] * len(demand), z0=soc * params.z_max)
    except (FileNotFoundError, ValueError) as e:
        console.print(f"[red]Error in stage compare-ess: {e}[/red]")
        sys.exit(1)

    table = Table(title=f"Wiring losses over {len(demand)} slots at {action:g} W")
    table.add_column("Wiring", style="cyan")
    table.add_column("Loss (Wh)", style="yellow")
    table.add_row("parallel", f"{losses.loss_parallel:.6f}")
    table.add_row("series", f"{losses.loss_series:.6f}")
    console.print(table)

    step = cfg.grids.q / 5.0
    grid = np.arange(-2 * cfg.grids.q, 2 * cfg.grids.q + step / 2, step)
    allowed = set(feasible_actions(EssState(soc * params.z_max), params, list(grid) + [0.0]))
    divergence = Table(title=f"Per-slot SOC change (%) at SOC {soc:.0%}")
    divergence.add_column("d (W)", style="cyan")
    divergence.add_column("Three-circuit", style="yellow")
    divergence.add_column("Ideal", style="green")
    divergence.add_column("Difference", style="magenta")
    divergence.add_column("Feasible", style="white")
    for row in model_divergence(soc * params.z_max, grid, params):
        divergence.add_row(
            f"{row.d:g}",
            f"{row.soc_change_three_circuit:.5f}",
            f"{row.soc_change_ideal:.5f}",
            f"{row.difference:.5f}",
            "✓" if row.d in allowed else "✗",
        )
    console.print(divergence)


@cli.command()
@out_option
@config_option
def report(out, config):
    """Show a saved report and re-aggregate it from the exported control logs"""
    output_dir = Path(out) if out else Path(_load(config).output.directory)
    report_path = output_dir / "report.yaml"
    if not report_path.exists():
        console.print(f"[red]No report at {report_path}; run evaluate first[/red]")
        sys.exit(1)

    document = yaml.safe_load(report_path.read_text(encoding='utf-8'))
    rows = document['report']['rows']

    table = Table(title=f"Report: {report_path}")
    table.add_column("Configuration", style="cyan")
    table.add_column("F-score", style="yellow")
    table.add_column("Loss (Wh)", style="green")
    table.add_column("Loss from logs (Wh)", style="green")
    table.add_column("AMBR", style="magenta")
    for row in rows:
        table.add_row(
            row['label'],
            f"{row['f_score']:.4f}",
            f"{row['total_loss_wh']:.4f}",
            _loss_from_logs(output_dir, row),
            f"{row['ambr']:.4f}",
        )
    console.print(table)


@cli.command()
@config_option
def show_config(config):
    """Display configuration and the lattice it induces"""
    cfg = _load(config)
    _display_config(cfg)
    _display_cardinalities(echo_cardinalities(cfg))


@cli.command()
@click.argument('output_path', default='config/config.yaml')
def init_config(output_path):
    """Create a default configuration file"""
    save_config(ExperimentConfig(), output_path)
    console.print(f"[green]✓ Created default config at {output_path}[/green]")


# ============================================================================
# Display helpers
# ============================================================================

def _loss_from_logs(output_dir: Path, row: Dict) -> str:
    if row.get('soc_fraction') is None:
        return "-"
    tag = Path(row['soc_file']).stem
    logs = sorted((output_dir / "logs" / tag).glob("day_*.csv"))
    if not logs:
        return "missing"
    return f"{sum(read_control_log(path)['loss'].sum() for path in logs):.4f}"


def _display_config(cfg: ExperimentConfig):
    table = Table(title="Configuration")
    table.add_column("Block", style="cyan")
    table.add_column("Settings", style="green")
    for name in ("ess", "grids", "seeds", "attacker", "optimizer", "validation", "output"):
        table.add_row(name, yaml.safe_dump(getattr(cfg, name).model_dump(), default_flow_style=True).strip())
    table.add_row("household", cfg.household.source)
    table.add_row("soc_fractions", str(cfg.soc_fractions))
    table.add_row("mode", cfg.mode)
    console.print(table)
    console.print()


def _display_cardinalities(sizes: Dict[str, int]):
    table = Table(title="Lattice")
    table.add_column("Set", style="cyan")
    table.add_column("Size", style="yellow")
    for name, size in sizes.items():
        table.add_row(name.replace("_", " "), str(size))
    console.print(table)


def _display_model(model: Dict):
    table = Table(title="Household model")
    table.add_column("Hypothesis", style="cyan")
    table.add_column("Prior", style="yellow")
    table.add_column("Emission", style="green")
    for h, name in enumerate(model['hypothesis_names']):
        emission = ", ".join(f"{row[h]:.3f}" for row in model['emission'])
        table.add_row(name, f"{model['prior'][h]:.4f}", emission)
    console.print(table)


def _display_detections(detections: Dict[str, Dict]):
    table = Table(title="Load monitor detections")
    table.add_column("Meter trace", style="cyan")
    table.add_column("TP", style="green")
    table.add_column("FP", style="yellow")
    table.add_column("FN", style="yellow")
    table.add_column("F-score", style="magenta")
    for label, result in detections.items():
        table.add_row(label, str(result['tp']), str(result['fp']), str(result['fn']), f"{result['f_score']:.4f}")
    console.print(table)


def _display_report(experiment: ExperimentReport):
    table = Table(title=f"Results over {experiment.days} days of {experiment.horizon} slots")
    table.add_column("Configuration", style="cyan")
    table.add_column("F-score", style="yellow")
    table.add_column("Energy loss (Wh)", style="green")
    table.add_column("AMBR", style="magenta")
    table.add_column("Clip rate", style="white")
    for row in experiment.rows:
        table.add_row(row.label, f"{row.f_score:.4f}", f"{row.total_loss_wh:.3f}",
                      f"{row.ambr:.3f}", f"{row.clip_rate:.3f}")
    console.print(table)


if __name__ == '__main__':
    cli()
