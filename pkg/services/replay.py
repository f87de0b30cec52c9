"""
Replay
Episode-structured replay buffer that serves fixed-length context windows
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, NamedTuple

import numpy as np

from services.environments import Environment
from services.errors import ContractViolation, NotReadyError

logger = logging.getLogger(__name__)


class Transition(NamedTuple):
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


class ContextBatch(NamedTuple):
    """B x k windows; padded positions carry zeros and valid=False"""
    obs: np.ndarray  # (B, k, F) float32
    actions: np.ndarray  # (B, k) int64
    rewards: np.ndarray  # (B, k) float32
    next_obs: np.ndarray  # (B, k, F) float32, the same slice shifted by one step
    dones: np.ndarray  # (B, k) bool
    valid: np.ndarray  # (B, k) bool, prefix mask
    episode_ids: np.ndarray  # (B,) int64, for audits

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


@dataclass
class Episode:
    episode_id: int
    obs: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    next_obs: List[np.ndarray] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def append(self, transition: Transition) -> None:
        self.obs.append(np.asarray(transition.obs, dtype=np.float32))
        self.actions.append(int(transition.action))
        self.rewards.append(float(transition.reward))
        self.next_obs.append(np.asarray(transition.next_obs, dtype=np.float32))
        self.dones.append(bool(transition.done))

    def drop_oldest(self) -> None:
        for column in (self.obs, self.actions, self.rewards, self.next_obs, self.dones):
            del column[0]

    def freeze(self) -> "FrozenEpisode":
        return FrozenEpisode(
            episode_id=self.episode_id,
            obs=np.stack(self.obs),
            actions=np.array(self.actions, dtype=np.int64),
            rewards=np.array(self.rewards, dtype=np.float32),
            next_obs=np.stack(self.next_obs),
            dones=np.array(self.dones, dtype=bool),
        )


class FrozenEpisode(NamedTuple):
    episode_id: int
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class EpisodeReplayBuffer:
    """Replay memory of whole episodes.

    The in-progress episode is never sampled. When the stored step count
    exceeds capacity, the oldest sealed episodes are evicted whole; an
    in-progress episode longer than capacity loses its oldest steps.
    """

    def __init__(self, capacity: int, obs_size: int):
        if capacity < 1:
            raise ContractViolation(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs_size = obs_size
        self.episodes: Deque[FrozenEpisode] = deque()
        self.sealed_steps = 0
        self._next_id = 0
        self.current = Episode(self._allocate_id())

    def _allocate_id(self) -> int:
        episode_id = self._next_id
        self._next_id += 1
        return episode_id

    def __len__(self) -> int:
        return self.sealed_steps + len(self.current)

    @property
    def episode_count(self) -> int:
        return len(self.episodes)

    def record(self, transition: Transition) -> None:
        """Append to the live episode; seal it on done; evict down to capacity"""
        self.current.append(transition)
        if transition.done:
            sealed = self.current.freeze()
            self.episodes.append(sealed)
            self.sealed_steps += len(sealed)
            self.current = Episode(self._allocate_id())
        self._evict()

    def _evict(self) -> None:
        while len(self) > self.capacity and self.episodes:
            evicted = self.episodes.popleft()
            self.sealed_steps -= len(evicted)
            logger.debug(f"Evicted episode {evicted.episode_id} ({len(evicted)} steps)")
        while len(self) > self.capacity:
            self.current.drop_oldest()

    def sample_context_batch(self, k: int, batch_size: int, rng: np.random.Generator) -> ContextBatch:
        """Uniform episode, then a uniform start in [0, max(1, len - 1)); windows padded to k"""
        if k < 1 or batch_size < 1:
            raise ContractViolation(f"context batch needs k >= 1 and batch_size >= 1, got k={k}, batch_size={batch_size}")
        if not self.episodes:
            raise NotReadyError("replay buffer has no sealed episode to sample from")
        obs = np.zeros((batch_size, k, self.obs_size), dtype=np.float32)
        next_obs = np.zeros_like(obs)
        actions = np.zeros((batch_size, k), dtype=np.int64)
        rewards = np.zeros((batch_size, k), dtype=np.float32)
        dones = np.zeros((batch_size, k), dtype=bool)
        valid = np.zeros((batch_size, k), dtype=bool)
        episode_ids = np.zeros(batch_size, dtype=np.int64)

        for row in range(batch_size):
            episode = self.episodes[int(rng.integers(len(self.episodes)))]
            length = len(episode)
            start = int(rng.integers(0, max(1, length - 1)))
            n = min(k, length - start)
            window = slice(start, start + n)
            obs[row, :n] = episode.obs[window]
            next_obs[row, :n] = episode.next_obs[window]
            actions[row, :n] = episode.actions[window]
            rewards[row, :n] = episode.rewards[window]
            dones[row, :n] = episode.dones[window]
            valid[row, :n] = True
            episode_ids[row] = episode.episode_id

        return ContextBatch(obs, actions, rewards, next_obs, dones, valid, episode_ids)

    # -- checkpoint support ---------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Flatten every stored step (sealed episodes first, then the live one)"""
        episodes = list(self.episodes)
        if len(self.current):
            episodes.append(self.current.freeze())
        if not episodes:
            empty_obs = np.zeros((0, self.obs_size), dtype=np.float32)
            return {
                "replay.obs": empty_obs, "replay.next_obs": empty_obs,
                "replay.actions": np.zeros(0, dtype=np.int64), "replay.rewards": np.zeros(0, dtype=np.float32),
                "replay.dones": np.zeros(0, dtype=bool), "replay.lengths": np.zeros(0, dtype=np.int64),
                "replay.ids": np.zeros(0, dtype=np.int64),
            }
        return {
            "replay.obs": np.concatenate([e.obs for e in episodes]),
            "replay.next_obs": np.concatenate([e.next_obs for e in episodes]),
            "replay.actions": np.concatenate([e.actions for e in episodes]),
            "replay.rewards": np.concatenate([e.rewards for e in episodes]),
            "replay.dones": np.concatenate([e.dones for e in episodes]),
            "replay.lengths": np.array([len(e) for e in episodes], dtype=np.int64),
            "replay.ids": np.array([e.episode_id for e in episodes], dtype=np.int64),
        }

    def state_meta(self) -> Dict[str, Any]:
        return {"next_id": self._next_id, "current_id": self.current.episode_id, "has_live": len(self.current) > 0}

    def load_state(self, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
        self.episodes.clear()
        self.sealed_steps = 0
        offset = 0
        lengths = arrays["replay.lengths"]
        ids = arrays["replay.ids"]
        frozen = []
        for episode_id, length in zip(ids.tolist(), lengths.tolist()):
            window = slice(offset, offset + length)
            frozen.append(FrozenEpisode(
                episode_id=episode_id,
                obs=arrays["replay.obs"][window].astype(np.float32),
                actions=arrays["replay.actions"][window].astype(np.int64),
                rewards=arrays["replay.rewards"][window].astype(np.float32),
                next_obs=arrays["replay.next_obs"][window].astype(np.float32),
                dones=arrays["replay.dones"][window].astype(bool),
            ))
            offset += length
        self.current = Episode(int(meta["current_id"]))
        if meta["has_live"]:
            live = frozen.pop()
            for i in range(len(live)):
                self.current.append(Transition(live.obs[i], int(live.actions[i]), float(live.rewards[i]),
                                               live.next_obs[i], bool(live.dones[i])))
        for episode in frozen:
            self.episodes.append(episode)
            self.sealed_steps += len(episode)
        self._next_id = int(meta["next_id"])


def prefill_random(env: Environment, buffer: EpisodeReplayBuffer, n_steps: int, rng: np.random.Generator) -> None:
    """Record exactly n_steps transitions from a uniform-random policy"""
    if n_steps < 1:
        raise ContractViolation(f"prefill needs n_steps >= 1, got {n_steps}")
    obs = env.reset(rng)
    for _ in range(n_steps):
        action = int(rng.integers(env.action_count))
        result = env.step(action, rng)
        buffer.record(Transition(obs, action, result.reward, result.observation, result.done))
        obs = env.reset(rng) if result.done else result.observation
    logger.info(f"🎲 Prefilled replay buffer with {n_steps} random steps ({buffer.episode_count} episodes)")
