"""Tabular softmax policy over hashed token contexts.

The policy conditions on the last ``history`` symbols of the episode's
token stream, hashed into a bounded state table.  Everything is exact
and analytically differentiable, which is what lets the optimizer tests
check gradients against finite differences instead of trusting them.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import _kernels as kernels

__all__ = [
    "PAD_TOKEN",
    "DEFAULT_N_STATES",
    "DEFAULT_HISTORY",
    "state_of",
    "context_states",
    "TabularPolicy",
    "OraclePolicy",
    "grad_log_prob",
]

PAD_TOKEN = -1
DEFAULT_N_STATES = 4096
DEFAULT_HISTORY = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def state_of(tokens: Sequence[int], history: int, n_states: int) -> int:
    """Hash the last ``history`` tokens (left-padded) into [0, n_states).

    FNV-1a over the little-endian bytes of each token value shifted by
    +2, so the pad never collides with a real symbol.
    """
    acc = _FNV_OFFSET
    n = len(tokens)
    for i in range(n - history, n):
        v = (tokens[i] if i >= 0 else PAD_TOKEN) + 2
        for _ in range(4):
            acc ^= v & 0xFF
            acc = (acc * _FNV_PRIME) & _MASK64
            v >>= 8
    return acc % n_states


def context_states(tokens: Sequence[int], history: int, n_states: int) -> np.ndarray:
    """States *before* each token: out[t] = state_of(tokens[:t]).

    Vectorized twin of `state_of`; the two agree exactly (covered by a
    property test rather than trusted).
    """
    toks = np.asarray(tokens, dtype=np.int64)
    n = toks.shape[0]
    padded = np.concatenate([np.full(history, PAD_TOKEN, dtype=np.int64), toks])
    acc = np.full(n, _FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(_FNV_PRIME)
    byte = np.uint64(0xFF)
    for j in range(history):
        col = (padded[j : j + n] + 2).astype(np.uint64)
        for b in range(4):
            acc ^= (col >> np.uint64(8 * b)) & byte
            acc *= prime
    return (acc % np.uint64(n_states)).astype(np.int64)


class TabularPolicy:
    """π(a|s) = softmax(θ[s] / temperature) over a hashed state table."""

    def __init__(
        self,
        n_states: int = DEFAULT_N_STATES,
        n_actions: int = 8,
        temperature: float = 1.0,
        history: int = DEFAULT_HISTORY,
        table: np.ndarray | None = None,
    ):
        if table is None:
            table = np.zeros((n_states, n_actions), dtype=np.float64)
        else:
            table = np.array(table, dtype=np.float64)
            if table.shape != (n_states, n_actions):
                raise ValueError("table shape does not match (n_states, n_actions)")
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if history < 1:
            raise ValueError("history must be >= 1")
        self.table = table
        self.temperature = float(temperature)
        self.history = int(history)

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def n_actions(self) -> int:
        return self.table.shape[1]

    # ── state mapping ────────────────────────────────────────────────

    def state_of(self, tokens: Sequence[int]) -> int:
        return state_of(tokens, self.history, self.n_states)

    def context_states(self, tokens: Sequence[int]) -> np.ndarray:
        return context_states(tokens, self.history, self.n_states)

    # ── distributions ────────────────────────────────────────────────

    def probs(self, state: int) -> np.ndarray:
        return kernels.row_probs(self.table[state], 1.0 / self.temperature)

    def log_prob(self, state: int, action: int) -> float:
        return kernels.masked_logprob_sum(
            self.table,
            np.array([state], dtype=np.int64),
            np.array([action], dtype=np.int64),
            1.0 / self.temperature,
        )

    def sample(self, state: int, u: float) -> int:
        """Draw an action using a pre-drawn uniform u in [0, 1)."""
        return kernels.sample_row(self.table[state], 1.0 / self.temperature, u)

    def greedy(self, state: int) -> int:
        return int(np.argmax(self.table[state]))

    # ── parameter plumbing ───────────────────────────────────────────

    def flat(self) -> np.ndarray:
        """Copy of the parameters as one vector."""
        return self.table.reshape(-1).copy()

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(
            self.n_states, self.n_actions, self.temperature, self.history, self.table
        )


class OraclePolicy:
    """Plays each task's own known-good action; used for upper bounds."""

    def act(self, task, tokens: Sequence[int]) -> int:
        return task.oracle_action(tokens)


def grad_log_prob(policy: TabularPolicy, trace, mask) -> np.ndarray:
    """Exact gradient of Σ_masked log π(a_t|s_t) w.r.t. the flat table.

    Each masked token contributes (onehot(a) − π(·|s)) / temperature on
    row s; unvisited rows stay zero.
    """
    tokens = np.asarray(trace.tokens, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if m.shape[0] != tokens.shape[0]:
        raise ValueError("mask length must equal token count")
    states = policy.context_states(tokens)[m]
    actions = tokens[m]
    out = np.zeros_like(policy.table)
    kernels.add_scaled_logprob_grad(
        policy.table, states, actions, 1.0 / policy.temperature, 1.0, out
    )
    return out.reshape(-1)
