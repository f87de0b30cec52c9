"""
Tabular
Table-based Q-learning and value iteration on small deterministic MDPs,
used to check target semantics without any network in the loop
"""

from dataclasses import dataclass

import numpy as np

from services.errors import ContractViolation


@dataclass(frozen=True)
class TabularMDP:
    next_state: np.ndarray  # (S, A) int
    reward: np.ndarray  # (S, A) float
    terminal: np.ndarray  # (S,) bool; transitions into these states do not bootstrap

    @property
    def shape(self):
        return self.next_state.shape


def three_state_chain() -> TabularMDP:
    """s0 -> s1 -> s2 (terminal); action 1 moves right, action 0 stays with a small cost"""
    return TabularMDP(
        next_state=np.array([[0, 1], [1, 2], [2, 2]]),
        reward=np.array([[-0.1, 0.0], [-0.1, 1.0], [0.0, 0.0]]),
        terminal=np.array([False, False, True]),
    )


def _backup(mdp: TabularMDP, q: np.ndarray, gamma: float) -> np.ndarray:
    bootstrap = q.max(axis=1)[mdp.next_state]
    return mdp.reward + gamma * np.where(mdp.terminal[mdp.next_state], 0.0, bootstrap)


def value_iteration(mdp: TabularMDP, gamma: float, tolerance: float = 1e-12, max_sweeps: int = 100_000) -> np.ndarray:
    if not 0.0 <= gamma < 1.0:
        raise ContractViolation(f"gamma must be in [0, 1), got {gamma}")
    q = np.zeros(mdp.shape)
    for _ in range(max_sweeps):
        updated = _backup(mdp, q, gamma)
        if np.max(np.abs(updated - q)) < tolerance:
            return updated
        q = updated
    return q


def q_learning(
    mdp: TabularMDP, gamma: float, alpha: float = 0.5, updates: int = 20_000, rng: np.random.Generator = None
) -> np.ndarray:
    """Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a)) on uniformly drawn (s, a) pairs"""
    if not 0.0 < alpha <= 1.0:
        raise ContractViolation(f"alpha must be in (0, 1], got {alpha}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_states, n_actions = mdp.shape
    q = np.zeros(mdp.shape)
    for _ in range(updates):
        s = int(rng.integers(n_states))
        a = int(rng.integers(n_actions))
        s_next = mdp.next_state[s, a]
        bootstrap = 0.0 if mdp.terminal[s_next] else gamma * q[s_next].max()
        q[s, a] += alpha * (mdp.reward[s, a] + bootstrap - q[s, a])
    return q
