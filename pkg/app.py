#!/usr/bin/env python3
"""
DTQN
Command-line entry point: train, evaluate and inspect transformer Q-networks
on partially observable benchmarks
"""

import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np
import torch
from dotenv import load_dotenv

from config.catalog import ENV_CATALOG
from config.settings import load_settings
from services.env_factory import make_env, resolve_pomdp_path
from services.environments import EnvConfig
from services.errors import ConfigError, DTQNError
from services.exports import (
    DISPLAY_THRESHOLD,
    export_attention,
    export_posenc_similarity,
    read_attention_export,
    strong_weights,
)
from services.harness import evaluate, load_trained_model, train
from services.logging_setup import configure_logging
from services.model import param_count
from services.pomdp_parser import audit, load_pomdp
from services.run_config import load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


@click.group()
@click.pass_context
def cli(ctx):
    """Deep Transformer Q-Networks for partially observable RL"""
    load_dotenv()
    try:
        settings = load_settings()
    except ValueError as e:
        raise ConfigError(str(e), source="environment") from e
    configure_logging(settings.log_level, settings.log_file)
    torch.set_num_threads(settings.threads)
    ctx.obj = settings


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config file (section.key=value lines)")
@click.option("--override", "-o", "overrides", multiple=True, help="section.key=value, applied after the file")
@click.option("--seed", type=int, default=None, help="Shortcut for harness.seed")
@click.option("--output-dir", type=click.Path(file_okay=False), default=None)
@click.option("--resume", "resume_from", type=click.Path(dir_okay=False), default=None, help="Checkpoint to continue from")
@click.option("--stop-at", type=int, default=None, help="Stop (and checkpoint) at this environment step")
@click.pass_obj
def train_command(settings, config_path, overrides, seed, output_dir, resume_from, stop_at):
    """Train an agent and write metrics, config echo and checkpoints"""
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"harness.seed={seed}")
    config = load_run_config(config_path, overrides)
    if output_dir is None:
        output_dir = Path(settings.output_dir) / f"{config.env.env_id}_{config.model.kind}_s{config.harness.seed}"
    artifacts = train(config, output_dir, settings.data_dir, resume_from=resume_from, stop_at=stop_at)
    click.echo(f"checkpoint: {artifacts.checkpoint}")
    click.echo(f"metrics:    {artifacts.metrics}")
    if artifacts.last_row is not None:
        click.echo(f"success rate at step {artifacts.last_row.env_step}: {artifacts.last_row.success_rate:.3f}")


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def eval_command(settings, checkpoint, episodes, seed):
    """Greedy evaluation of a checkpoint"""
    model, config, env = load_trained_model(checkpoint, settings.data_dir)
    success_rate, mean_return = evaluate(model, env, episodes, np.random.default_rng(seed))
    click.echo(f"env:          {config.env.env_id}")
    click.echo(f"parameters:   {param_count(model.config)}")
    click.echo(f"episodes:     {episodes}")
    click.echo(f"success rate: {success_rate:.4f}")
    click.echo(f"mean return:  {mean_return:.4f}")


@cli.command("export-attention")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def export_attention_command(settings, checkpoint, out_path, seed):
    """Write per-layer, per-head attention weights of one greedy episode"""
    model, _, env = load_trained_model(checkpoint, settings.data_dir)
    decisions = export_attention(model, env, seed, out_path)
    records = read_attention_export(out_path)
    click.echo(f"{decisions} decisions written to {out_path}")
    click.echo(f"{len(strong_weights(records))} of {len(records)} weights at or above {DISPLAY_THRESHOLD}")


@cli.command("export-posenc")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def export_posenc_command(settings, checkpoint, out_path):
    """Write the cosine-similarity matrix of the positional encodings"""
    model, _, _ = load_trained_model(checkpoint, settings.data_dir)
    similarity = export_posenc_similarity(model, out_path)
    click.echo(f"{similarity.shape[0]}x{similarity.shape[1]} similarity matrix written to {out_path}")


@cli.command("pomdp-check")
@click.argument("pomdp_file")
@click.pass_obj
def pomdp_check_command(settings, pomdp_file):
    """Parse a .pomdp file and report its stochasticity audit"""
    path = resolve_pomdp_path(pomdp_file, settings.data_dir)
    report = audit(load_pomdp(path))
    click.echo(f"file:              {path}")
    click.echo(f"|S|:               {report['states']}")
    click.echo(f"|A|:               {report['actions']}")
    click.echo(f"|O|:               {report['observations']}")
    click.echo(f"discount:          {report['discount']}")
    click.echo(f"max row deviation: {report['max_row_deviation']:.3g}")
    click.echo(f"absorbing states:  {report['absorbing_states']}")


@cli.command("list-envs")
@click.pass_obj
def list_envs_command(settings):
    """Show every environment id with its observation layout and defaults"""
    for env_id, defaults in ENV_CATALOG.items():
        if env_id == "pomdp":
            layout = "depends on env.pomdp_file"
        else:
            env = make_env(EnvConfig(env_id=env_id), settings.data_dir)
            layout = f"{env.observation_spec.describe()}, |A|={env.action_count}, cap {env.step_cap}"
        click.echo(f"{env_id:15} {layout:40} d_model={defaults['d_model']:<4} "
                   f"steps={defaults['total_steps']:<8} {defaults['summary']}")


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; 0 ok, 1 configuration or usage error, 2 runtime failure"""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="dtqn", standalone_mode=False)
    except ConfigError as e:
        click.echo(f"❌ Config error: {e}", err=True)
        return EXIT_CONFIG
    except click.UsageError as e:
        e.show()
        return EXIT_CONFIG
    except click.Abort:
        click.echo("Aborted", err=True)
        return EXIT_RUNTIME
    except DTQNError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        return EXIT_RUNTIME
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(run_cli())
