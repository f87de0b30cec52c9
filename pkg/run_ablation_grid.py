#!/usr/bin/env python3
"""
Ablation Grid
Prints (or launches) the train commands for every ablation cell, domain and seed
"""

import logging
import shlex
import subprocess
import sys
from pathlib import Path

import click
from dotenv import load_dotenv

from config.catalog import ABLATION_CELLS, ENV_CATALOG
from config.settings import load_settings
from services.logging_setup import configure_logging

FULL_GRID_ENVS = ["hallway", "heaven_hell", "car_flag", "memory_cards", "gv_memory_5x5", "gv_memory_7x7", "gv_memory_9x9"]
APP = Path(__file__).resolve().parent / "app.py"


def grid_commands(envs, cells, seeds, output_root):
    for env_id in envs:
        for cell in cells:
            for seed in seeds:
                command = [sys.executable, str(APP), "train", "--override", f"env.id={env_id}", "--seed", str(seed),
                           "--output-dir", str(Path(output_root) / env_id / cell / f"seed_{seed}")]
                for override in ABLATION_CELLS[cell]:
                    command += ["--override", override]
                yield command


@click.command()
@click.option("--env", "envs", multiple=True, type=click.Choice(sorted(ENV_CATALOG)), help="Default: the full grid")
@click.option("--cell", "cells", multiple=True, type=click.Choice(sorted(ABLATION_CELLS)), help="Default: every cell")
@click.option("--seeds", default=5, show_default=True, help="Seeds 0..n-1 per cell")
@click.option("--output-root", default="runs/grid", show_default=True)
@click.option("--execute", is_flag=True, help="Run the commands one after another instead of printing them")
def main(envs, cells, seeds, output_root, execute):
    load_dotenv()
    settings = load_settings()
    configure_logging(settings.log_level, settings.log_file or "ablation_grid.log")

    commands = list(grid_commands(envs or FULL_GRID_ENVS, cells or list(ABLATION_CELLS), range(seeds), output_root))
    if not execute:
        for command in commands:
            click.echo(shlex.join(command))
        return

    logging.info(f"🚀 Launching {len(commands)} runs")
    failures = 0
    for i, command in enumerate(commands, start=1):
        logging.info(f"[{i}/{len(commands)}] {shlex.join(command[2:])}")
        completed = subprocess.run(command)
        if completed.returncode != 0:
            failures += 1
            logging.error(f"❌ Run exited with {completed.returncode}")
    logging.info(f"✅ Grid finished: {len(commands) - failures} ok, {failures} failed")
    sys.exit(1 if failures else 0)


if __name__ == "__main__":
    main()
