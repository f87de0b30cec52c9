"""
POMDP Parser
Reads the Cassandra .pomdp flat-file format (the subset documented in
POMDP_FORMAT.md) into a dense PomdpSpec
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np

from services.errors import PomdpSyntaxError, PomdpValidationError

DIRECTIVES = ("discount", "values", "states", "actions", "observations", "start", "T", "O", "R")
ROW_TOLERANCE = 1e-6

_TOKEN_RE = re.compile(r":|[^\s:]+")


class Token(NamedTuple):
    text: str
    line: int
    column: int


@dataclass
class PomdpSpec:
    """Dense tabular POMDP; R holds rewards (cost files are negated on load)"""
    discount: float
    states: List[str]
    actions: List[str]
    observations: List[str]
    T: np.ndarray  # (A, S, S)
    O: np.ndarray  # (A, S, Omega), indexed by the resulting state
    R: np.ndarray  # (A, S, S, Omega)
    start: np.ndarray  # (S,)
    values: str = "reward"

    def row_deviation(self) -> float:
        """Largest |row sum - 1| over T, O and start"""
        deviations = [
            np.abs(self.T.sum(axis=-1) - 1.0).max(),
            np.abs(self.O.sum(axis=-1) - 1.0).max(),
            abs(self.start.sum() - 1.0),
        ]
        return float(max(deviations))

    def validate(self, tolerance: float = ROW_TOLERANCE) -> None:
        if not 0.0 <= self.discount < 1.0:
            raise PomdpValidationError(f"discount {self.discount} outside [0, 1)")
        for label, table, names in (("T", self.T, self.states), ("O", self.O, self.states)):
            if (table < 0).any():
                raise PomdpValidationError(f"{label} has negative probabilities")
            sums = table.sum(axis=-1)
            bad = np.argwhere(np.abs(sums - 1.0) > tolerance)
            if len(bad):
                a, s = bad[0]
                raise PomdpValidationError(
                    f"{label} row for action '{self.actions[a]}', state '{names[s]}' sums to {sums[a, s]:.6g}, not 1"
                )
        if (self.start < 0).any() or abs(self.start.sum() - 1.0) > tolerance:
            raise PomdpValidationError(f"start distribution sums to {self.start.sum():.6g}, not 1")


def tokenize(text: str) -> List[Token]:
    tokens = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        for match in _TOKEN_RE.finditer(line):
            tokens.append(Token(match.group(), line_number, match.start() + 1))
    return tokens


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0
        self.discount: Optional[float] = None
        self.values = "reward"
        self.states: Optional[List[str]] = None
        self.actions: Optional[List[str]] = None
        self.observations: Optional[List[str]] = None
        self.start: Optional[np.ndarray] = None
        self.T: Optional[np.ndarray] = None
        self.O: Optional[np.ndarray] = None
        self.R: Optional[np.ndarray] = None
        self._last_line = self.tokens[-1].line if self.tokens else 1

    # -- token helpers --------------------------------------------------

    def peek(self, offset: int = 0) -> Optional[Token]:
        index = self.pos + offset
        return self.tokens[index] if index < len(self.tokens) else None

    def next(self, what: str) -> Token:
        token = self.peek()
        if token is None:
            raise PomdpSyntaxError(f"unexpected end of file, expected {what}", self._last_line, 1)
        self.pos += 1
        return token

    def expect_colon(self) -> None:
        token = self.next("':'")
        if token.text != ":":
            raise PomdpSyntaxError(f"expected ':' but found '{token.text}'", token.line, token.column)

    def at_statement_start(self) -> bool:
        token = self.peek()
        if token is None:
            return True
        following = self.peek(1)
        if token.text not in DIRECTIVES:
            return False
        if token.text == "start" and following is not None and following.text in ("include", "exclude"):
            return True
        return following is not None and following.text == ":"

    def read_until_statement(self) -> List[Token]:
        collected = []
        while not self.at_statement_start():
            collected.append(self.next("value"))
        return collected

    def read_numbers(self, count: int, what: str) -> np.ndarray:
        numbers = []
        for _ in range(count):
            token = self.peek()
            if token is None or self.at_statement_start():
                where = token or Token("", self._last_line, 1)
                raise PomdpSyntaxError(
                    f"{what}: expected {count} numbers, found {len(numbers)}", where.line, where.column
                )
            self.pos += 1
            if not _is_number(token.text):
                raise PomdpSyntaxError(f"{what}: expected a number, found '{token.text}'", token.line, token.column)
            numbers.append(float(token.text))
        return np.array(numbers, dtype=np.float64)

    # -- name resolution ------------------------------------------------

    def resolve(self, token: Token, names: List[str], kind: str) -> Union[slice, int]:
        if token.text == "*":
            return slice(None)
        if token.text in names:
            return names.index(token.text)
        if token.text.isdigit() and int(token.text) < len(names):
            return int(token.text)
        raise PomdpValidationError(
            f"line {token.line}, column {token.column}: undefined {kind} '{token.text}'"
        )

    def require_spaces(self, token: Token) -> None:
        if self.states is None or self.actions is None or self.observations is None:
            raise PomdpSyntaxError(
                f"'{token.text}' entry before states, actions and observations are declared",
                token.line,
                token.column,
            )
        if self.T is None:
            n_s, n_a, n_o = len(self.states), len(self.actions), len(self.observations)
            self.T = np.zeros((n_a, n_s, n_s))
            self.O = np.zeros((n_a, n_s, n_o))
            self.R = np.zeros((n_a, n_s, n_s, n_o))

    # -- statements -----------------------------------------------------

    def parse(self) -> PomdpSpec:
        while self.peek() is not None:
            token = self.next("directive")
            if token.text not in DIRECTIVES:
                raise PomdpSyntaxError(f"unknown directive '{token.text}'", token.line, token.column)
            handler = getattr(self, f"_parse_{token.text}")
            handler(token)
        return self.finish()

    def _parse_discount(self, token: Token) -> None:
        self.expect_colon()
        value = self.next("discount value")
        if not _is_number(value.text):
            raise PomdpSyntaxError(f"discount must be a number, found '{value.text}'", value.line, value.column)
        self.discount = float(value.text)

    def _parse_values(self, token: Token) -> None:
        self.expect_colon()
        value = self.next("'reward' or 'cost'")
        if value.text not in ("reward", "cost"):
            raise PomdpSyntaxError(f"values must be 'reward' or 'cost', found '{value.text}'", value.line, value.column)
        self.values = value.text

    def _parse_space(self, token: Token) -> List[str]:
        self.expect_colon()
        items = self.read_until_statement()
        if not items:
            raise PomdpSyntaxError(f"'{token.text}' needs a count or a list of names", token.line, token.column)
        if len(items) == 1 and items[0].text.isdigit():
            count = int(items[0].text)
            if count < 1:
                raise PomdpSyntaxError(f"'{token.text}' count must be >= 1", items[0].line, items[0].column)
            return [str(i) for i in range(count)]
        names = [item.text for item in items]
        if len(set(names)) != len(names):
            raise PomdpSyntaxError(f"duplicate name in '{token.text}'", token.line, token.column)
        return names

    def _parse_states(self, token: Token) -> None:
        self.states = self._parse_space(token)

    def _parse_actions(self, token: Token) -> None:
        self.actions = self._parse_space(token)

    def _parse_observations(self, token: Token) -> None:
        self.observations = self._parse_space(token)

    def _parse_start(self, token: Token) -> None:
        if self.states is None:
            raise PomdpSyntaxError("'start' before 'states'", token.line, token.column)
        n_states = len(self.states)
        mode = self.peek()
        if mode is not None and mode.text in ("include", "exclude"):
            self.pos += 1
            self.expect_colon()
            refs = self.read_until_statement()
            chosen = np.zeros(n_states, dtype=bool)
            for ref in refs:
                chosen[self.resolve(ref, self.states, "state")] = True
            if mode.text == "exclude":
                chosen = ~chosen
            if not chosen.any():
                raise PomdpValidationError(f"line {token.line}: start {mode.text} leaves no states")
            self.start = chosen / chosen.sum()
            return
        self.expect_colon()
        items = self.read_until_statement()
        if len(items) == 1 and items[0].text == "uniform":
            self.start = np.full(n_states, 1.0 / n_states)
        elif len(items) == n_states and all(_is_number(i.text) for i in items):
            self.start = np.array([float(i.text) for i in items])
        elif len(items) == 1:
            self.start = np.zeros(n_states)
            self.start[self.resolve(items[0], self.states, "state")] = 1.0
        else:
            raise PomdpSyntaxError(
                f"start: expected 'uniform', one state, or {n_states} probabilities", token.line, token.column
            )

    def _optional_ref(self, names: List[str], kind: str):
        token = self.peek()
        if token is not None and token.text == ":":
            self.pos += 1
            return self.resolve(self.next(kind), names, kind)
        return None

    def _parse_T(self, token: Token) -> None:
        self.require_spaces(token)
        self.expect_colon()
        n_states = len(self.states)
        a = self.resolve(self.next("action"), self.actions, "action")
        s = self._optional_ref(self.states, "state")
        s2 = self._optional_ref(self.states, "state") if s is not None else None
        if s2 is not None:
            self.T[a, s, s2] = self.read_numbers(1, "T entry")[0]
        elif s is not None:
            if self._keyword("uniform"):
                self.T[a, s, :] = 1.0 / n_states
            else:
                self.T[a, s, :] = self.read_numbers(n_states, "T row")
        elif self._keyword("uniform"):
            self.T[a] = 1.0 / n_states
        elif self._keyword("identity"):
            self.T[a] = np.eye(n_states)
        else:
            self.T[a] = self.read_numbers(n_states * n_states, "T matrix").reshape(n_states, n_states)

    def _parse_O(self, token: Token) -> None:
        self.require_spaces(token)
        self.expect_colon()
        n_states, n_obs = len(self.states), len(self.observations)
        a = self.resolve(self.next("action"), self.actions, "action")
        s2 = self._optional_ref(self.states, "state")
        o = self._optional_ref(self.observations, "observation") if s2 is not None else None
        if o is not None:
            self.O[a, s2, o] = self.read_numbers(1, "O entry")[0]
        elif s2 is not None:
            if self._keyword("uniform"):
                self.O[a, s2, :] = 1.0 / n_obs
            else:
                self.O[a, s2, :] = self.read_numbers(n_obs, "O row")
        elif self._keyword("uniform"):
            self.O[a] = 1.0 / n_obs
        elif n_states == n_obs and self._keyword("identity"):
            self.O[a] = np.eye(n_states)
        else:
            self.O[a] = self.read_numbers(n_states * n_obs, "O matrix").reshape(n_states, n_obs)

    def _parse_R(self, token: Token) -> None:
        self.require_spaces(token)
        self.expect_colon()
        n_states, n_obs = len(self.states), len(self.observations)
        a = self.resolve(self.next("action"), self.actions, "action")
        s = self._optional_ref(self.states, "state")
        if s is None:
            raise PomdpSyntaxError("R entries need at least 'R: action : start-state'", token.line, token.column)
        s2 = self._optional_ref(self.states, "state")
        o = self._optional_ref(self.observations, "observation") if s2 is not None else None
        if o is not None:
            self.R[a, s, s2, o] = self.read_numbers(1, "R entry")[0]
        elif s2 is not None:
            self.R[a, s, s2, :] = self.read_numbers(n_obs, "R row")
        else:
            self.R[a, s, :, :] = self.read_numbers(n_states * n_obs, "R matrix").reshape(n_states, n_obs)

    def _keyword(self, word: str) -> bool:
        token = self.peek()
        if token is not None and token.text == word:
            self.pos += 1
            return True
        return False

    def finish(self) -> PomdpSpec:
        missing = [
            name
            for name, value in (
                ("discount", self.discount),
                ("states", self.states),
                ("actions", self.actions),
                ("observations", self.observations),
            )
            if value is None
        ]
        if missing:
            raise PomdpSyntaxError(f"missing required directive(s): {', '.join(missing)}", self._last_line, 1)
        if self.T is None:
            raise PomdpValidationError("no T or O entries were given")
        n_states = len(self.states)
        start = self.start if self.start is not None else np.full(n_states, 1.0 / n_states)
        rewards = -self.R if self.values == "cost" else self.R
        spec = PomdpSpec(
            discount=self.discount,
            states=self.states,
            actions=self.actions,
            observations=self.observations,
            T=self.T,
            O=self.O,
            R=rewards,
            start=start,
            values=self.values,
        )
        spec.validate()
        return spec


def parse_pomdp(text: str) -> PomdpSpec:
    """Parse .pomdp source text into a validated PomdpSpec"""
    return _Parser(text).parse()


def load_pomdp(path: Union[str, Path]) -> PomdpSpec:
    return parse_pomdp(Path(path).read_text())


def audit(spec: PomdpSpec) -> Dict[str, float]:
    """Summary used by the pomdp-check command"""
    return {
        "states": len(spec.states),
        "actions": len(spec.actions),
        "observations": len(spec.observations),
        "discount": spec.discount,
        "max_row_deviation": spec.row_deviation(),
        "absorbing_states": int(sum(
            bool(np.all(np.abs(spec.T[:, s, s] - 1.0) < 1e-9)) for s in range(len(spec.states))
        )),
    }
