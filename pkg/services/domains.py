"""
Domains
Built-in benchmark environments (Memory Cards, Car Flag, HeavenHell,
Gridverse-style Memory) and scripted reference policies for them
"""

from __future__ import annotations

from collections import deque
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.environments import Environment, ObservationSpec
from services.errors import ConfigError


class MemoryCards(Environment):
    """Find the partner of the revealed card.

    Codes per position: 0 hidden, 1..pairs face-up value, pairs + 1 removed.
    """

    env_id = "memory_cards"
    HIDDEN = 0

    def __init__(self, pairs: int = 5, step_cap: int = 50):
        if not 2 <= pairs <= 10:
            raise ConfigError(f"memory_cards pairs must be in [2, 10], got {pairs}")
        super().__init__(step_cap)
        self.pairs = pairs
        self.removed_code = pairs + 1
        self.values = np.zeros(2 * pairs, dtype=np.int64)
        self.removed = np.zeros(2 * pairs, dtype=bool)
        self.revealed: Optional[int] = None

    @property
    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec(2 * self.pairs, (self.pairs + 2,) * (2 * self.pairs))

    @property
    def action_count(self) -> int:
        return 2 * self.pairs

    def _observation(self) -> np.ndarray:
        codes = np.where(self.removed, self.removed_code, self.HIDDEN)
        if self.revealed is not None:
            codes[self.revealed] = self.values[self.revealed]
        return codes.astype(np.float32)

    def _reveal(self, rng: np.random.Generator) -> None:
        candidates = np.flatnonzero(~self.removed)
        self.revealed = int(candidates[rng.integers(len(candidates))]) if len(candidates) else None

    def partner(self, position: int) -> int:
        matches = np.flatnonzero(self.values == self.values[position])
        return int(matches[matches != position][0])

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        self.values = rng.permutation(np.repeat(np.arange(1, self.pairs + 1), 2))
        self.removed = np.zeros(2 * self.pairs, dtype=bool)
        self._reveal(rng)
        return self._observation()

    def _step(self, action: int, rng: np.random.Generator):
        if action == self.partner(self.revealed):
            self.removed[[self.revealed, action]] = True
            reward = 0.0
        else:
            reward = -1.0
        self._reveal(rng)
        terminal = bool(self.removed.all())
        return self._observation(), reward, terminal, terminal

    def _state(self) -> Dict[str, Any]:
        return {"values": self.values.tolist(), "removed": self.removed.tolist(), "revealed": self.revealed}

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.values = np.array(state["values"], dtype=np.int64)
        self.removed = np.array(state["removed"], dtype=bool)
        self.revealed = state["revealed"]


class CarFlag(Environment):
    """Drive to the oracle flag to learn which end of the line is the goal.

    Observation: [position, velocity, oracle], oracle = goal side (-1/+1)
    only inside the oracle zone, else 0. Actions: 0 accelerate left,
    1 no-op, 2 accelerate right.
    """

    env_id = "car_flag"
    FLAG = 1.0
    ORACLE = 0.5
    ORACLE_RADIUS = 0.1
    ACCELERATION = 0.0015
    MAX_SPEED = 0.07

    def __init__(self, line_bound: float = 1.2, step_cap: int = 200):
        if line_bound <= self.FLAG:
            raise ConfigError(f"car_flag line bound must exceed the flag position {self.FLAG}, got {line_bound}")
        super().__init__(step_cap)
        self.line_bound = line_bound
        self.position = 0.0
        self.velocity = 0.0
        self.goal_side = 1

    @property
    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec(3, None)

    @property
    def action_count(self) -> int:
        return 3

    def _observation(self) -> np.ndarray:
        oracle = self.goal_side if abs(self.position - self.ORACLE) <= self.ORACLE_RADIUS else 0
        return np.array([self.position, self.velocity, oracle], dtype=np.float32)

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        self.position = float(rng.uniform(-0.2, 0.2))
        self.velocity = 0.0
        self.goal_side = 1 if rng.random() < 0.5 else -1
        return self._observation()

    def _step(self, action: int, rng: np.random.Generator):
        self.velocity = float(np.clip(self.velocity + (action - 1) * self.ACCELERATION, -self.MAX_SPEED, self.MAX_SPEED))
        position = self.position + self.velocity
        if abs(position) > self.line_bound:
            position = float(np.clip(position, -self.line_bound, self.line_bound))
            self.velocity = 0.0
        self.position = position
        if abs(self.position) >= self.FLAG:
            reached = 1 if self.position > 0 else -1
            success = reached == self.goal_side
            return self._observation(), 1.0 if success else -1.0, True, success
        return self._observation(), 0.0, False, False

    def _state(self) -> Dict[str, Any]:
        return {"position": self.position, "velocity": self.velocity, "goal_side": self.goal_side}

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.position = float(state["position"])
        self.velocity = float(state["velocity"])
        self.goal_side = int(state["goal_side"])


class HeavenHell(Environment):
    """T-shaped corridor with a priest at the bottom of the stem.

    Cells: 0 left arm end, 1 left arm, 2 junction (start), 3 right arm,
    4 right arm end, 5-6 stem, 7 priest. The observation is the cell index,
    except at the priest: 7 = heaven is left, 8 = heaven is right.
    Actions: 0 north, 1 south, 2 east, 3 west.
    """

    env_id = "heaven_hell"
    NORTH, SOUTH, EAST, WEST = range(4)
    START = 2
    PRIEST = 7
    LEFT_END, RIGHT_END = 0, 4
    MOVES = {
        0: {EAST: 1},
        1: {WEST: 0, EAST: 2},
        2: {WEST: 1, EAST: 3, SOUTH: 5},
        3: {WEST: 2, EAST: 4},
        4: {WEST: 3},
        5: {NORTH: 2, SOUTH: 6},
        6: {NORTH: 5, SOUTH: 7},
        7: {NORTH: 6},
    }

    def __init__(self, step_cap: int = 40):
        super().__init__(step_cap)
        self.cell = self.START
        self.heaven_left = True

    @property
    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec(1, (9,))

    @property
    def action_count(self) -> int:
        return 4

    def _observation(self) -> np.ndarray:
        if self.cell == self.PRIEST:
            code = 7 if self.heaven_left else 8
        else:
            code = self.cell
        return np.array([code], dtype=np.float32)

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        self.cell = self.START
        self.heaven_left = bool(rng.random() < 0.5)
        return self._observation()

    def _step(self, action: int, rng: np.random.Generator):
        self.cell = self.MOVES[self.cell].get(action, self.cell)
        if self.cell in (self.LEFT_END, self.RIGHT_END):
            success = (self.cell == self.LEFT_END) == self.heaven_left
            return self._observation(), 1.0 if success else -1.0, True, success
        return self._observation(), 0.0, False, False

    def _state(self) -> Dict[str, Any]:
        return {"cell": self.cell, "heaven_left": self.heaven_left}

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.cell = int(state["cell"])
        self.heaven_left = bool(state["heaven_left"])


class GridverseMemory(Environment):
    """N x N walled grid: beacon pair at the south end, two flags in the north corners.

    The agent sees the 2 x 3 cells ahead of it (its own row and the next one,
    left/centre/right), row-major from the far row. Reaching the flag with
    the beacon's colour gives +1, the other flag -1.
    Actions: 0 forward, 1 backward, 2 strafe left, 3 strafe right,
    4 turn left, 5 turn right.
    """

    env_id = "gv_memory"
    FLOOR, WALL, BEACON_RED, BEACON_GREEN, FLAG_RED, FLAG_GREEN = range(6)
    VOCAB = 6
    DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # north, east, south, west
    MOVE_OFFSETS = {0: 0, 1: 2, 2: 3, 3: 1}

    def __init__(self, size: int = 7, step_cap: Optional[int] = None):
        if size < 5 or size > 15 or size % 2 == 0:
            raise ConfigError(f"gv_memory grid size must be odd and in [5, 15], got {size}")
        super().__init__(step_cap if step_cap else 4 * size * size)
        self.size = size
        self.middle = size // 2
        self.grid = np.full((size, size), self.WALL, dtype=np.int64)
        self.beacon_color = 0
        self.position = (size - 2, self.middle)
        self.heading = 0

    @property
    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec(6, (self.VOCAB,) * 6)

    @property
    def action_count(self) -> int:
        return 6

    @property
    def flag_cells(self) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        return (1, 1), (1, self.size - 2)

    def _layout(self, beacon_color: int, left_flag_color: int) -> np.ndarray:
        n, m = self.size, self.middle
        grid = np.full((n, n), self.WALL, dtype=np.int64)
        grid[1, 1 : n - 1] = self.FLOOR
        grid[1 : n - 1, m] = self.FLOOR
        beacon = self.BEACON_RED + beacon_color
        grid[n - 2, m - 1] = beacon
        grid[n - 2, m + 1] = beacon
        (lr, lc), (rr, rc) = self.flag_cells
        grid[lr, lc] = self.FLAG_RED + left_flag_color
        grid[rr, rc] = self.FLAG_RED + (1 - left_flag_color)
        return grid

    def cell(self, row: int, col: int) -> int:
        if 0 <= row < self.size and 0 <= col < self.size:
            return int(self.grid[row, col])
        return self.WALL

    def _observation(self) -> np.ndarray:
        row, col = self.position
        forward = self.DELTAS[self.heading]
        right = self.DELTAS[(self.heading + 1) % 4]
        codes = []
        for distance in (1, 0):
            for lateral in (-1, 0, 1):
                r = row + distance * forward[0] + lateral * right[0]
                c = col + distance * forward[1] + lateral * right[1]
                codes.append(self.cell(r, c))
        return np.array(codes, dtype=np.float32)

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        self.beacon_color = int(rng.integers(2))
        self.grid = self._layout(self.beacon_color, int(rng.integers(2)))
        self.position = (self.size - 2, self.middle)
        self.heading = int(rng.integers(4))
        return self._observation()

    def _step(self, action: int, rng: np.random.Generator):
        if action >= 4:
            self.heading = (self.heading + (3 if action == 4 else 1)) % 4
            return self._observation(), 0.0, False, False
        dr, dc = self.DELTAS[(self.heading + self.MOVE_OFFSETS[action]) % 4]
        target = (self.position[0] + dr, self.position[1] + dc)
        code = self.cell(*target)
        if code in (self.FLAG_RED, self.FLAG_GREEN):
            self.position = target
            success = code - self.FLAG_RED == self.beacon_color
            return self._observation(), 1.0 if success else -1.0, True, success
        if code == self.FLOOR:
            self.position = target
        return self._observation(), 0.0, False, False

    def _state(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.tolist(),
            "beacon_color": self.beacon_color,
            "position": list(self.position),
            "heading": self.heading,
        }

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.grid = np.array(state["grid"], dtype=np.int64)
        self.beacon_color = int(state["beacon_color"])
        self.position = tuple(state["position"])
        self.heading = int(state["heading"])


# -- scripted reference policies ------------------------------------------


def heaven_hell_oracle_policy(history: Sequence[np.ndarray]) -> int:
    """Optimal HeavenHell play from observations alone"""
    codes = [int(obs[0]) for obs in history]
    seen = [c for c in codes if c in (7, 8)]
    cell = codes[-1]
    if not seen:
        return HeavenHell.SOUTH
    heaven_left = seen[-1] == 7
    if cell in (7, 8, 5, 6):
        return HeavenHell.NORTH
    return HeavenHell.WEST if heaven_left else HeavenHell.EAST


def car_flag_oracle_policy(history: Sequence[np.ndarray]) -> int:
    """Creep right through the oracle zone, then drive to the revealed goal"""
    revealed = [float(obs[2]) for obs in history if obs[2] != 0]
    velocity = float(history[-1][1])
    if revealed:
        return 2 if revealed[-1] > 0 else 0
    return 2 if velocity < 0.01 else 1


def gv_memory_oracle_policy(env: GridverseMemory, history: Sequence[np.ndarray]) -> int:
    """Shortest path to the flag matching the beacon colour seen in `history`.

    Navigation reads the agent pose from `env`; the goal colour comes only
    from observed beacon codes.
    """
    beacon_codes = [
        int(code) for obs in history for code in obs
        if int(code) in (GridverseMemory.BEACON_RED, GridverseMemory.BEACON_GREEN)
    ]
    if not beacon_codes:
        return 4
    wanted_flag = GridverseMemory.FLAG_RED + (beacon_codes[-1] - GridverseMemory.BEACON_RED)
    plan = _plan_to_code(env, wanted_flag)
    return plan[0] if plan else 4


def _plan_to_code(env: GridverseMemory, target_code: int) -> List[int]:
    start = (env.position, env.heading)
    frontier = deque([start])
    parents: Dict[Any, Any] = {start: None}
    while frontier:
        pose = frontier.popleft()
        (row, col), heading = pose
        for action in range(6):
            if action >= 4:
                successor = ((row, col), (heading + (3 if action == 4 else 1)) % 4)
            else:
                dr, dc = env.DELTAS[(heading + env.MOVE_OFFSETS[action]) % 4]
                code = env.cell(row + dr, col + dc)
                if code == target_code:
                    actions = [action]
                    while parents[pose] is not None:
                        pose, previous_action = parents[pose]
                        actions.append(previous_action)
                    return actions[::-1]
                if code != env.FLOOR:
                    continue
                successor = ((row + dr, col + dc), heading)
            if successor not in parents:
                parents[successor] = (pose, action)
                frontier.append(successor)
    return []
