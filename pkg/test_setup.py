#!/usr/bin/env python3
"""
Setup check: verifies that the DTQN toolchain, bundled data and a tiny
training run all work on this machine
"""

import os
import sys
import tempfile

from dotenv import load_dotenv


def check_environment():
    """Report the optional DTQN_* settings"""
    print("🔧 Checking Environment Configuration...")

    load_dotenv()

    from config.settings import load_settings

    for var in ("DTQN_THREADS", "DTQN_LOG_LEVEL", "DTQN_LOG_FILE", "DTQN_OUTPUT_DIR", "DTQN_DATA_DIR"):
        value = os.getenv(var)
        print(f"  {'✅' if value else '➖'} {var}: {value or '(default)'}")

    try:
        settings = load_settings()
    except ValueError as e:
        print(f"  ❌ Invalid setting: {e}")
        return False
    print(f"  ✅ Using {settings.threads} thread(s), data from {settings.data_dir}")
    return True


def check_imports():
    """Check that the numeric and CLI stack imports"""
    print("\n📦 Checking Imports...")

    try:
        import torch
        print(f"  ✅ PyTorch {torch.__version__}")
    except ImportError as e:
        print(f"  ❌ PyTorch import failed: {e}")
        return False

    try:
        import numpy
        print(f"  ✅ NumPy {numpy.__version__}")
    except ImportError as e:
        print(f"  ❌ NumPy import failed: {e}")
        return False

    try:
        import click
        import rapidfuzz
        print(f"  ✅ click {click.__version__}, rapidfuzz {rapidfuzz.__version__}")
    except ImportError as e:
        print(f"  ❌ CLI dependencies failed: {e}")
        return False

    try:
        from services.harness import train  # noqa: F401
        print("  ✅ Training harness")
    except ImportError as e:
        print(f"  ❌ Training harness import failed: {e}")
        return False

    return True


def check_bundled_pomdp():
    """Parse the bundled Hallway model"""
    print("\n📄 Checking Bundled Hallway Model...")

    try:
        from config.settings import load_settings
        from services.env_factory import resolve_pomdp_path
        from services.pomdp_parser import audit, load_pomdp

        report = audit(load_pomdp(resolve_pomdp_path("hallway.pomdp", load_settings().data_dir)))
        print(f"  ✅ |S|={report['states']}, |A|={report['actions']}, |O|={report['observations']}")
        if report["max_row_deviation"] > 1e-6:
            print(f"  ❌ Rows off by {report['max_row_deviation']:.3g}")
            return False
        return True

    except Exception as e:
        print(f"  ❌ Hallway check failed: {e}")
        return False


def check_tiny_run():
    """Train for a few dozen steps and evaluate once"""
    print("\n🏋️ Checking A Tiny Training Run...")

    try:
        from services.harness import train
        from services.run_config import build_run_config

        config = build_run_config(
            "model.d_model=8\nmodel.n_heads=2\nmodel.n_layers=1\nmodel.context_len=4\n"
            "agent.total_steps=20\nagent.prefill=100\nagent.batch_size=4\nagent.buffer_capacity=1000\n"
            "harness.eval_period=20\nharness.eval_episodes=2\n"
        )
        with tempfile.TemporaryDirectory() as tmp:
            artifacts = train(config, tmp)
            row = artifacts.last_row
            print(f"  ✅ Finished at step {row.env_step}, success rate {row.success_rate:.2f}")
            print(f"  ✅ Checkpoint: {artifacts.checkpoint.name}")
        return True

    except Exception as e:
        print(f"  ❌ Tiny run failed: {e}")
        return False


CHECKS = [
    check_environment,
    check_imports,
    check_bundled_pomdp,
    check_tiny_run,
]


def test_setup_checks_pass():
    assert all(check() for check in CHECKS)


def main():
    """Run all checks"""
    print("🧪 DTQN Setup Check")
    print("=" * 50)

    passed = 0
    total = len(CHECKS)

    for check in CHECKS:
        try:
            if check():
                passed += 1
        except Exception as e:
            print(f"  ❌ Check failed with exception: {e}")

    print("\n" + "=" * 50)
    print(f"📋 Test Results: {passed}/{total} tests passed")

    if passed == total:
        print("🎉 All checks passed! You are ready to train.")
        print("\n🚀 To run a domain:")
        print("   python app.py train --config configs/heaven_hell.env")
        print("\n🧮 To print the ablation grid:")
        print("   python run_ablation_grid.py --seeds 5")
        return 0
    else:
        print("❌ Some checks failed. Please check your configuration.")
        print("\n📖 Check the config_guide.md for setup instructions.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
