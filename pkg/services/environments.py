"""
Environments
Shared episodic POMDP interface and the generic environment that runs a
parsed .pomdp model
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np

from services.errors import ContractViolation
from services.pomdp_parser import PomdpSpec


@dataclass(frozen=True)
class ObservationSpec:
    """Observation layout: feature count plus per-feature vocabularies (None = reals)"""
    feature_count: int
    vocab_sizes: Optional[Tuple[int, ...]] = None

    @property
    def is_discrete(self) -> bool:
        return self.vocab_sizes is not None

    def describe(self) -> str:
        if self.vocab_sizes is None:
            return f"{self.feature_count} reals"
        return f"{self.feature_count} codes (vocab {max(self.vocab_sizes)})"


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: float
    done: bool
    success: bool


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "heaven_hell"
    grid_size: int = 7
    pairs: int = 5
    line_bound: float = 1.2
    step_cap: int = 0  # 0 = domain default
    pomdp_file: str = ""
    seed: int = 0


class Environment(ABC):
    """Episodic environment; single owner, rng injected on every call"""

    env_id = "base"

    def __init__(self, step_cap: int):
        if step_cap < 1:
            raise ContractViolation(f"step cap must be >= 1, got {step_cap}")
        self.step_cap = step_cap
        self._steps = 0
        self._done = True

    @property
    @abstractmethod
    def observation_spec(self) -> ObservationSpec:
        ...

    @property
    @abstractmethod
    def action_count(self) -> int:
        ...

    @abstractmethod
    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def _step(self, action: int, rng: np.random.Generator) -> Tuple[np.ndarray, float, bool, bool]:
        """Advance the dynamics; returns (observation, reward, terminal, success)"""

    @abstractmethod
    def _state(self) -> Dict[str, Any]:
        ...

    @abstractmethod
    def _load_state(self, state: Dict[str, Any]) -> None:
        ...

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._steps = 0
        self._done = False
        return self._reset(rng)

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        if self._done:
            raise ContractViolation(f"{self.env_id}: step() called on a finished episode; call reset() first")
        if not 0 <= int(action) < self.action_count:
            raise ContractViolation(f"{self.env_id}: action {action} outside [0, {self.action_count})")
        self._steps += 1
        observation, reward, terminal, success = self._step(int(action), rng)
        done = terminal or self._steps >= self.step_cap
        self._done = done
        return StepResult(observation, float(reward), done, bool(success and terminal))

    def get_state(self) -> Dict[str, Any]:
        """JSON-able snapshot of the full episode state (checkpoint resume)"""
        return {"steps": self._steps, "done": self._done, **self._state()}

    def set_state(self, state: Dict[str, Any]) -> None:
        self._steps = int(state["steps"])
        self._done = bool(state["done"])
        self._load_state(state)


def _draw(cumulative: np.ndarray, rng: np.random.Generator) -> int:
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(index, len(cumulative) - 1)


class PomdpEnv(Environment):
    """Runs a tabular PomdpSpec.

    The first observation is drawn from O under action 0 at the start state.
    States that loop back to themselves with probability 1 under every
    action are terminal; an episode succeeds when its terminating step
    earns positive reward.
    """

    env_id = "pomdp"

    def __init__(self, spec: PomdpSpec, step_cap: int = 100, env_id: str = "pomdp"):
        super().__init__(step_cap)
        self.env_id = env_id
        self.spec = spec
        self._t_cum = np.cumsum(spec.T, axis=-1)
        self._o_cum = np.cumsum(spec.O, axis=-1)
        self._start_cum = np.cumsum(spec.start)
        n_states = len(spec.states)
        self.absorbing = np.array(
            [bool(np.all(np.abs(spec.T[:, s, s] - 1.0) < 1e-9)) for s in range(n_states)]
        )
        self.state = 0

    @property
    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec(1, (len(self.spec.observations),))

    @property
    def action_count(self) -> int:
        return len(self.spec.actions)

    def _observation(self, code: int) -> np.ndarray:
        return np.array([code], dtype=np.float32)

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = _draw(self._start_cum, rng)
        return self._observation(_draw(self._o_cum[0, self.state], rng))

    def _step(self, action: int, rng: np.random.Generator):
        next_state = _draw(self._t_cum[action, self.state], rng)
        code = _draw(self._o_cum[action, next_state], rng)
        reward = float(self.spec.R[action, self.state, next_state, code])
        self.state = next_state
        terminal = bool(self.absorbing[next_state])
        return self._observation(code), reward, terminal, terminal and reward > 0

    def _state(self) -> Dict[str, Any]:
        return {"state": self.state}

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.state = int(state["state"])
