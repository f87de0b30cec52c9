#!/usr/bin/env python3
"""
Desk-scale learning runs: full training schedules on the small domains,
median greedy success over three seeds. Hours of CPU time, so they only run
with DTQN_DESK_SCALE=1.
"""

import logging
import os
import statistics
import sys
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv

from config.settings import load_settings
from services.harness import train
from services.logging_setup import configure_logging
from services.run_config import build_run_config

load_dotenv()
ENABLED = os.getenv("DTQN_DESK_SCALE") == "1"
SEEDS = (0, 1, 2)
EVAL_EPISODES = 100

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def _median_success(env_id, overrides=()):
    settings = load_settings()
    label = "_".join([env_id, *(o.replace("=", "-").replace(".", "-") for o in overrides)])
    successes = []
    for seed in SEEDS:
        config = build_run_config(
            f"env.id={env_id}\nharness.eval_episodes={EVAL_EPISODES}\nharness.eval_period=50_000\n",
            [*overrides, f"harness.seed={seed}"],
        )
        output_dir = Path(settings.output_dir) / "desk_scale" / label / f"seed_{seed}"
        artifacts = train(config, output_dir, settings.data_dir)
        successes.append(artifacts.last_row.success_rate)
        logger.info(f"📊 {label} seed {seed}: final success {artifacts.last_row.success_rate:.2f}")
    return statistics.median(successes)


def test_heaven_hell_learns_to_ask_the_priest():
    if not ENABLED:
        return
    assert _median_success("heaven_hell", ("agent.total_steps=300_000",)) >= 0.90


def test_memory_cards():
    if not ENABLED:
        return
    assert _median_success("memory_cards", ("agent.total_steps=1_000_000",)) >= 0.75


def test_car_flag():
    if not ENABLED:
        return
    assert _median_success("car_flag", ("agent.total_steps=500_000",)) >= 0.85


def test_memory_cards_needs_intermediate_q():
    if not ENABLED:
        return
    default = _median_success("memory_cards", ("agent.total_steps=1_000_000",))
    last_only = _median_success("memory_cards", ("agent.total_steps=1_000_000", "agent.intermediate_q=false"))
    assert last_only <= 0.5 * default, (last_only, default)


def main():
    """Run all tests"""
    print("🐢 Desk-Scale Learning Tests")
    print("=" * 50)

    if not ENABLED:
        print("  ➖ Skipped: set DTQN_DESK_SCALE=1 to run (hours of CPU time)")
        return 0

    settings = load_settings()
    configure_logging(settings.log_level, settings.log_file)

    tests = [
        test_heaven_hell_learns_to_ask_the_priest,
        test_memory_cards,
        test_car_flag,
        test_memory_cards_needs_intermediate_q,
    ]

    passed = 0
    for test in tests:
        try:
            test()
            print(f"  ✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"  ❌ {test.__name__}: {e!r}")

    print("\n" + "=" * 50)
    print(f"📋 Test Results: {passed}/{len(tests)} tests passed")
    return 0 if passed == len(tests) else 1


if __name__ == "__main__":
    sys.exit(main())
