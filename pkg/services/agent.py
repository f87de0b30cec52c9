"""
Agent
Q-learning over context windows: epsilon-greedy acting, double-DQN targets,
the all-positions loss, Adam updates and target-network syncing
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np
import torch
from torch import nn

from services.errors import ConfigError, ContractViolation, DiagnosticError
from services.model import QNetwork, model_dtype, q_last, window_tensor
from services.replay import ContextBatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparams:
    """
    Learning schedule and optimizer settings.

    lr: Adam step size
    batch_size: context windows per update
    buffer_capacity: replay size in environment steps
    target_update_period: training steps between target syncs
    total_steps: environment steps of the whole run (also sets the epsilon schedule)
    eps_start / eps_end / eps_anneal_fraction: linear epsilon schedule
    gamma: discount factor
    prefill: uniform-random steps recorded before learning starts
    double_dqn: bootstrap with the online argmax evaluated by the target net
    intermediate_q: train on every valid position instead of the last one only
    grad_clip: global gradient-norm clip, 0 disables
    """
    lr: float = 3e-4
    batch_size: int = 32
    buffer_capacity: int = 500_000
    target_update_period: int = 10_000
    total_steps: int = 1_000_000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_fraction: float = 0.10
    gamma: float = 0.99
    prefill: int = 50_000
    double_dqn: bool = True
    intermediate_q: bool = True
    grad_clip: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "buffer_capacity", "target_update_period", "total_steps", "prefill"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError(f"need 0 <= eps_end <= eps_start <= 1, got {self.eps_end} and {self.eps_start}")
        if not 0.0 <= self.eps_anneal_fraction <= 1.0:
            raise ConfigError(f"eps_anneal_fraction must be in [0, 1], got {self.eps_anneal_fraction}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0) or self.adam_eps <= 0:
            raise ConfigError("Adam betas must be in [0, 1) and adam_eps > 0")


def epsilon(h: Hyperparams, step: int) -> float:
    """Linear from eps_start at step 0 to eps_end at anneal_fraction * total_steps, flat after"""
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}")
    anneal_steps = h.eps_anneal_fraction * h.total_steps
    if anneal_steps <= 0 or step >= anneal_steps:
        return h.eps_end
    return h.eps_start + (h.eps_end - h.eps_start) * (step / anneal_steps)


def greedy_action(model: QNetwork, history: Sequence[np.ndarray]) -> int:
    """argmax of the last row over the most recent k observations; ties go to the lowest index"""
    k = model.config.context_len
    window = window_tensor(history, k, model_dtype(model))
    with torch.no_grad():
        output = model(window)
        q = q_last(output, window.shape[-2] - 1)[0]
    return int(torch.argmax(q).item())


def select_action(
    model: QNetwork, history: Sequence[np.ndarray], step: int, rng: np.random.Generator, h: Hyperparams
) -> int:
    eps = epsilon(h, step)
    if rng.random() < eps:
        return int(rng.integers(model.config.action_count))
    return greedy_action(model, history)


def batch_tensors(batch: ContextBatch, dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    return {
        "obs": torch.as_tensor(batch.obs, dtype=dtype),
        "next_obs": torch.as_tensor(batch.next_obs, dtype=dtype),
        "actions": torch.as_tensor(batch.actions, dtype=torch.long),
        "rewards": torch.as_tensor(batch.rewards, dtype=dtype),
        "dones": torch.as_tensor(batch.dones, dtype=dtype),
        "valid": torch.as_tensor(batch.valid, dtype=torch.bool),
    }


def td_targets(batch: ContextBatch, online: QNetwork, target: QNetwork, h: Hyperparams) -> torch.Tensor:
    """(B, k) bootstrapped targets; padded positions are 0, no gradient flows through them"""
    t = batch_tensors(batch, model_dtype(online))
    with torch.no_grad():
        next_target = target(t["next_obs"]).q
        if h.double_dqn:
            best = online(t["next_obs"]).q.argmax(dim=-1, keepdim=True)
        else:
            best = next_target.argmax(dim=-1, keepdim=True)
        bootstrap = next_target.gather(-1, best).squeeze(-1)
        targets = t["rewards"] + h.gamma * (1.0 - t["dones"]) * bootstrap
        targets = torch.where(t["valid"], targets, torch.zeros_like(targets))
    return targets


def last_valid_mask(valid: torch.Tensor) -> torch.Tensor:
    """Keep only the final valid position of each window"""
    lengths = valid.sum(dim=-1)
    positions = torch.arange(valid.shape[-1], device=valid.device)
    return valid & (positions == (lengths - 1).unsqueeze(-1))


def intermediate_q_loss(
    q: torch.Tensor, targets: torch.Tensor, actions: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Mean squared TD error over the valid positions of every window"""
    if q.shape[:-1] != targets.shape or targets.shape != actions.shape or actions.shape != valid.shape:
        raise ContractViolation(
            f"loss inputs disagree: q {tuple(q.shape)}, targets {tuple(targets.shape)}, "
            f"actions {tuple(actions.shape)}, valid {tuple(valid.shape)}"
        )
    count = int(valid.sum().item())
    if count == 0:
        raise ContractViolation("loss needs at least one valid position")
    chosen = q.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    squared = (targets - chosen) ** 2
    # where() rather than a multiply so non-finite padding cannot leak in
    squared = torch.where(valid, squared, torch.zeros_like(squared))
    return squared.sum() / count


def make_optimizer(model: nn.Module, h: Hyperparams) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=h.lr, betas=(h.adam_beta1, h.adam_beta2), eps=h.adam_eps
    )


def optimize_step(optimizer: torch.optim.Optimizer, loss: torch.Tensor, grad_clip: float = 0.0) -> None:
    """Backprop `loss`, refuse non-finite gradients, then take one Adam step"""
    optimizer.zero_grad()
    loss.backward()
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    for p in params:
        if not torch.isfinite(p.grad).all():
            raise DiagnosticError(f"non-finite gradient in a parameter of shape {tuple(p.shape)}")
    if grad_clip > 0:
        nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()


def sync_target(online: nn.Module, target: nn.Module) -> None:
    """Copy online parameters into the target network (values, never storage)"""
    source = online.state_dict()
    destination = target.state_dict()
    if source.keys() != destination.keys():
        raise ContractViolation("online and target networks have different parameter sets")
    for name, tensor in source.items():
        if tensor.shape != destination[name].shape:
            raise ContractViolation(
                f"parameter {name}: online {tuple(tensor.shape)} vs target {tuple(destination[name].shape)}"
            )
    target.load_state_dict(source)


class DTQNAgent:
    """Owns the online/target pair and the optimizer; one train_step per environment step"""

    def __init__(self, online: QNetwork, target: QNetwork, h: Hyperparams):
        self.online = online
        self.target = target
        self.h = h
        self.optimizer = make_optimizer(online, h)
        self.train_steps = 0
        self.target_syncs = 0
        sync_target(online, target)
        self.target.requires_grad_(False)

    def loss(self, batch: ContextBatch) -> torch.Tensor:
        t = batch_tensors(batch, model_dtype(self.online))
        targets = td_targets(batch, self.online, self.target, self.h)
        valid = t["valid"] if self.h.intermediate_q else last_valid_mask(t["valid"])
        q = self.online(t["obs"]).q
        return intermediate_q_loss(q, targets, t["actions"], valid)

    def train_step(self, batch: ContextBatch) -> float:
        loss = self.loss(batch)
        if not torch.isfinite(loss):
            raise DiagnosticError(f"non-finite loss {loss.item()} at training step {self.train_steps}")
        optimize_step(self.optimizer, loss, self.h.grad_clip)
        self.train_steps += 1
        if self.train_steps % self.h.target_update_period == 0:
            sync_target(self.online, self.target)
            self.target_syncs += 1
            logger.debug(f"Target network synced at training step {self.train_steps}")
        return float(loss.item())

    def act(self, history: Sequence[np.ndarray], step: int, rng: np.random.Generator) -> int:
        return select_action(self.online, history, step, rng, self.h)
