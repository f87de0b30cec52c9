"""
Harness
Off-policy training loop, greedy evaluation, metrics files and checkpoint
save/resume for one run
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from services.agent import DTQNAgent, epsilon, greedy_action
from services.checkpoint import (
    load_checkpoint,
    model_blocks,
    optimizer_blocks,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from services.env_factory import make_env
from services.environments import Environment
from services.errors import CheckpointError, ConfigError, ContractViolation, DiagnosticError
from services.model import ModelConfig, QNetwork, make_model, param_count
from services.replay import EpisodeReplayBuffer, Transition, prefill_random
from services.run_config import RunConfig, build_run_config, render_config

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
ECHO_FILE = "config.echo"
FINAL_CHECKPOINT = "final.ckpt"
METRICS_COLUMNS = ["env_step", "episodes", "train_loss", "success_rate", "mean_return", "epsilon", "status"]
TIMING_COLUMNS = ["env_step", "wall_seconds"]
_EVAL_STREAM = 1  # keeps eval seeds apart from the training streams

Policy = Union[nn.Module, Callable[[Sequence[np.ndarray]], int]]


class MetricsRow(NamedTuple):
    env_step: int
    episodes: int
    train_loss: float
    success_rate: float
    mean_return: float
    epsilon: float
    status: str = "ok"

    def as_fields(self) -> List[str]:
        return [str(self.env_step), str(self.episodes), repr(float(self.train_loss)),
                repr(float(self.success_rate)), repr(float(self.mean_return)), repr(float(self.epsilon)),
                self.status]


class RunArtifacts(NamedTuple):
    output_dir: Path
    checkpoint: Path
    metrics: Path
    last_row: Optional[MetricsRow]


def evaluate(policy: Policy, env: Environment, episodes: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Greedy rollouts on fresh episodes; returns (success rate, mean return)"""
    if episodes < 1:
        raise ContractViolation(f"evaluate needs episodes >= 1, got {episodes}")
    successes = 0
    total_return = 0.0
    for _ in range(episodes):
        history = [env.reset(rng)]
        while True:
            if isinstance(policy, nn.Module):
                action = greedy_action(policy, history)
            else:
                action = policy(history)
            result = env.step(action, rng)
            total_return += result.reward
            if result.done:
                successes += int(result.success)
                break
            history.append(result.observation)
    return successes / episodes, total_return / episodes


def eval_rng(config: RunConfig, env_step: int) -> np.random.Generator:
    return np.random.default_rng([config.harness.seed, config.env.seed, env_step, _EVAL_STREAM])


class MetricsWriter:
    """Append-only metrics.csv plus the timing.csv sidecar"""

    def __init__(self, output_dir: Path, resume_step: Optional[int] = None):
        self.metrics_path = output_dir / METRICS_FILE
        self.timing_path = output_dir / TIMING_FILE
        for path, columns in ((self.metrics_path, METRICS_COLUMNS), (self.timing_path, TIMING_COLUMNS)):
            if resume_step is not None and path.exists():
                self._truncate(path, resume_step)
            else:
                with open(path, "w", newline="") as f:
                    csv.writer(f).writerow(columns)

    @staticmethod
    def _truncate(path: Path, step: int) -> None:
        """Drop rows written after `step` by a run that went further than its checkpoint"""
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        kept = rows[:1] + [row for row in rows[1:] if int(row[0]) <= step]
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows(kept)

    def append(self, row: MetricsRow, wall_seconds: float) -> None:
        with open(self.metrics_path, "a", newline="") as f:
            csv.writer(f).writerow(row.as_fields())
        with open(self.timing_path, "a", newline="") as f:
            csv.writer(f).writerow([row.env_step, f"{wall_seconds:.3f}"])


def read_metrics(path) -> List[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            MetricsRow(int(r["env_step"]), int(r["episodes"]), float(r["train_loss"]), float(r["success_rate"]),
                       float(r["mean_return"]), float(r["epsilon"]), r["status"])
            for r in reader
        ]


class Trainer:
    """One training run: environment, agent, replay and every rng stream it consumes"""

    def __init__(self, config: RunConfig, output_dir, data_dir: Optional[str] = None):
        self.config = config
        self.output_dir = Path(output_dir)
        self.data_dir = data_dir
        h = config.agent

        streams = np.random.SeedSequence([config.harness.seed, config.env.seed]).spawn(4)
        self.rngs = {
            name: np.random.default_rng(seq) for name, seq in zip(("prefill", "env", "sample", "action"), streams)
        }
        torch.manual_seed(config.harness.seed)

        self.env = make_env(config.env, data_dir)
        self.eval_env = make_env(config.env, data_dir)
        self.model_config: ModelConfig = config.model.to_config(self.env.observation_spec, self.env.action_count)
        self.agent = DTQNAgent(make_model(self.model_config), make_model(self.model_config), h)
        self.buffer = EpisodeReplayBuffer(h.buffer_capacity, self.env.observation_spec.feature_count)

        self.env_step = 0
        self.episodes = 0
        self.loss_sum = 0.0
        self.loss_count = 0
        self.prefilled = False
        self.history: List[np.ndarray] = []
        self.elapsed = 0.0
        self.last_row: Optional[MetricsRow] = None

    @property
    def online(self) -> QNetwork:
        return self.agent.online

    # -- the loop ----------------------------------------------------------

    def _prefill(self) -> None:
        h = self.config.agent
        prefill_random(self.env, self.buffer, h.prefill, self.rngs["prefill"])
        if self.buffer.episode_count == 0:
            raise ConfigError(
                f"agent.prefill={h.prefill} finished no episode; raise it above the step cap {self.env.step_cap}"
            )
        self.prefilled = True
        self.history = [self.env.reset(self.rngs["env"])]

    def _metrics_row(self, status: str = "ok") -> MetricsRow:
        h = self.config.agent
        train_loss = self.loss_sum / self.loss_count if self.loss_count else float("nan")
        if status == "ok":
            success_rate, mean_return = evaluate(
                self.online, self.eval_env, self.config.harness.eval_episodes, eval_rng(self.config, self.env_step)
            )
        else:
            success_rate, mean_return = float("nan"), float("nan")
        return MetricsRow(self.env_step, self.episodes, train_loss, success_rate, mean_return,
                          epsilon(h, self.env_step), status)

    def run(self, stop_at: Optional[int] = None, resumed: bool = False) -> RunArtifacts:
        """Train up to agent.total_steps (or stop_at), one gradient update per environment step"""
        h = self.config.agent
        harness = self.config.harness
        total = h.total_steps
        stop = total if stop_at is None else min(stop_at, total)
        if stop < self.env_step:
            raise ConfigError(f"--stop-at {stop_at} is before the resumed step {self.env_step}")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / ECHO_FILE).write_text(render_config(self.config))
        writer = MetricsWriter(self.output_dir, self.env_step if resumed else None)
        k = self.model_config.context_len

        if not self.prefilled:
            self._prefill()
        logger.info(f"🚀 Training {self.config.env.env_id} ({self.model_config.kind}, "
                    f"{param_count(self.model_config)} params) from step {self.env_step} to {stop}")

        started = time.perf_counter()
        while self.env_step < stop:
            action = self.agent.act(self.history, self.env_step, self.rngs["action"])
            result = self.env.step(action, self.rngs["env"])
            self.buffer.record(Transition(self.history[-1], action, result.reward, result.observation, result.done))
            batch = self.buffer.sample_context_batch(k, h.batch_size, self.rngs["sample"])
            try:
                loss = self.agent.train_step(batch)
            except DiagnosticError:
                self.env_step += 1
                row = self._metrics_row(status="diverged")
                writer.append(row, self.elapsed + time.perf_counter() - started)
                logger.error(f"❌ Training diverged at step {self.env_step}")
                raise
            self.loss_sum += loss
            self.loss_count += 1

            if result.done:
                self.episodes += 1
                self.history = [self.env.reset(self.rngs["env"])]
            else:
                self.history.append(result.observation)
                if len(self.history) > k:
                    del self.history[0]
            self.env_step += 1

            if self.env_step % harness.eval_period == 0 or self.env_step == total:
                row = self._metrics_row()
                writer.append(row, self.elapsed + time.perf_counter() - started)
                self.last_row = row
                self.loss_sum, self.loss_count = 0.0, 0
                logger.info(f"📊 step {row.env_step}: success {row.success_rate:.2f}, "
                            f"return {row.mean_return:.3f}, loss {row.train_loss:.4f}, eps {row.epsilon:.3f}")
            if harness.checkpoint_period and self.env_step % harness.checkpoint_period == 0 and self.env_step != stop:
                self.save(self.output_dir / f"step_{self.env_step}.ckpt", started)

        name = FINAL_CHECKPOINT if self.env_step == total else f"step_{self.env_step}.ckpt"
        checkpoint = self.save(self.output_dir / name, started)
        logger.info(f"✅ Run finished at step {self.env_step}; artifacts in {self.output_dir}")
        return RunArtifacts(self.output_dir, checkpoint, writer.metrics_path, self.last_row)

    # -- checkpointing -----------------------------------------------------

    def save(self, path: Path, started: Optional[float] = None) -> Path:
        elapsed = self.elapsed + (time.perf_counter() - started if started is not None else 0.0)
        adam_blocks, adam_steps = optimizer_blocks(self.agent.optimizer, self.online)
        header = {
            "config_echo": render_config(self.config),
            "model": {"kind": self.model_config.kind, "param_count": param_count(self.model_config)},
            "env_step": self.env_step,
            "episodes": self.episodes,
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
            "prefilled": self.prefilled,
            "train_steps": self.agent.train_steps,
            "target_syncs": self.agent.target_syncs,
            "elapsed": elapsed,
            "rng": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
            "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
            "env_state": self.env.get_state(),
            "history": [np.asarray(obs, dtype=np.float32).tolist() for obs in self.history],
            "replay": self.buffer.state_meta(),
            "adam_steps": adam_steps,
        }
        blocks = {
            **model_blocks("online", self.online),
            **model_blocks("target", self.agent.target),
            **adam_blocks,
            **self.buffer.state_arrays(),
        }
        return save_checkpoint(path, header, blocks)

    def restore(self, path) -> None:
        checkpoint = load_checkpoint(path)
        header, blocks = checkpoint.header, checkpoint.blocks
        if header["config_echo"] != render_config(self.config):
            raise CheckpointError(f"{path}: checkpoint was written by a different run configuration")
        restore_model("online", self.online, blocks)
        restore_model("target", self.agent.target, blocks)
        restore_optimizer(self.agent.optimizer, self.online, blocks, header["adam_steps"])
        self.buffer.load_state(blocks, header["replay"])
        for name, state in header["rng"].items():
            self.rngs[name].bit_generator.state = state
        torch.set_rng_state(torch.from_numpy(np.frombuffer(bytes.fromhex(header["torch_rng"]), dtype=np.uint8).copy()))
        self.env.set_state(header["env_state"])
        self.history = [np.asarray(obs, dtype=np.float32) for obs in header["history"]]
        self.env_step = int(header["env_step"])
        self.episodes = int(header["episodes"])
        self.loss_sum = float(header["loss_sum"])
        self.loss_count = int(header["loss_count"])
        self.prefilled = bool(header["prefilled"])
        self.agent.train_steps = int(header["train_steps"])
        self.agent.target_syncs = int(header["target_syncs"])
        self.elapsed = float(header["elapsed"])
        logger.info(f"♻️ Resumed from {path} at step {self.env_step}")


def train(
    config: RunConfig,
    output_dir,
    data_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
    stop_at: Optional[int] = None,
) -> RunArtifacts:
    trainer = Trainer(config, output_dir, data_dir)
    if resume_from is not None:
        trainer.restore(resume_from)
    return trainer.run(stop_at=stop_at, resumed=resume_from is not None)


def load_trained_model(path, data_dir: Optional[str] = None) -> Tuple[QNetwork, RunConfig, Environment]:
    """Rebuild the online network and its environment from a checkpoint"""
    checkpoint = load_checkpoint(path)
    config = build_run_config(checkpoint.header["config_echo"], source=f"{Path(path).name} echo")
    env = make_env(config.env, data_dir)
    model = make_model(config.model.to_config(env.observation_spec, env.action_count))
    restore_model("online", model, checkpoint.blocks)
    model.eval()
    return model, config, env
