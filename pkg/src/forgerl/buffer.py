"""The data buffer: the one shared mutable structure between engines.

Rollout workers and the trainer never touch each other; everything goes
through here, under one lock.  The buffer plays two roles:

* **scheduler** — the trainer registers each step's task slots as
  tickets; workers draw tickets, but a ticket for step k is only
  dispensed once the published policy version has reached k − max_lag.
  That gate is the entire staleness-control mechanism: with max_lag 0
  the pipeline degenerates to strict rollout/train alternation, which is
  why the synchronous and zero-lag asynchronous modes produce identical
  runs.
* **filter + queue** — submitted groups pass the configured filters
  (zero-variance drop, staleness bound) or are counted as filtered;
  survivors queue per step, FIFO within a step by slot.

Rewards feeding step statistics are recorded *before* filtering, so
plateau detection sees the true rollout reward, not the filtered view.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .trajectory import Group

__all__ = ["BufferFull", "Ticket", "StepResult", "DataBuffer"]


class BufferFull(RuntimeError):
    """Backpressure: the queue is at capacity; the producer should retry."""


@dataclass(frozen=True)
class Ticket:
    """One scheduled rollout slot."""

    step: int
    slot: int
    task_id: str
    seed: np.random.SeedSequence
    max_turns: int


@dataclass
class _StepState:
    expected: int
    resolved: int = 0
    accepted: list = field(default_factory=list)  # (slot, Group)
    rewards: list = field(default_factory=list)  # every rolled reward, pre-filter
    max_staleness: int = 0
    n_zero_variance: int = 0
    n_stale: int = 0


@dataclass(frozen=True)
class StepResult:
    """Everything the trainer learns from one step's rollouts."""

    step: int
    groups: tuple[Group, ...]
    mean_reward: float
    max_staleness: int
    n_zero_variance: int
    n_stale: int


class DataBuffer:
    def __init__(
        self,
        groups_per_step: int,
        max_lag: int = 0,
        capacity: int = 64,
        drop_zero_variance: bool = True,
    ):
        if groups_per_step < 1:
            raise ValueError("groups_per_step must be >= 1")
        if max_lag < 0:
            raise ValueError("max_lag must be >= 0")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.groups_per_step = groups_per_step
        self.max_lag = max_lag
        self.capacity = capacity
        self.drop_zero_variance = drop_zero_variance

        self._lock = threading.Lock()
        self._work_cv = threading.Condition(self._lock)  # workers wait here
        self._done_cv = threading.Condition(self._lock)  # trainer waits here
        self._tickets: deque[Ticket] = deque()
        self._steps: dict[int, _StepState] = {}
        self._queue: deque[Group] = deque()  # un-ticketed FIFO (direct submits)
        self._n_accepted = 0  # queued groups across all steps
        self._published_version = -1
        self._closed = False

    # ── version + scheduling (trainer side) ──────────────────────────

    def set_version(self, version: int) -> None:
        with self._lock:
            if version < self._published_version:
                raise ValueError("published versions must not go backwards")
            self._published_version = version
            self._work_cv.notify_all()

    def schedule_step(self, step: int, tickets: list[Ticket]) -> None:
        """Register one trainer step's rollout slots."""
        if len(tickets) != self.groups_per_step:
            raise ValueError("one ticket per group slot")
        with self._lock:
            if step in self._steps:
                raise ValueError(f"step {step} already scheduled")
            self._steps[step] = _StepState(expected=len(tickets))
            self._tickets.extend(tickets)
            self._work_cv.notify_all()

    # ── worker side ──────────────────────────────────────────────────

    def next_ticket(self) -> Ticket | None:
        """Block until a gated-open ticket is available; None on close."""
        with self._lock:
            while True:
                if self._tickets and self._gate_open(self._tickets[0]):
                    return self._tickets.popleft()
                if self._closed:
                    return None
                self._work_cv.wait()

    def try_next_ticket(self) -> Ticket | None:
        """Non-blocking next_ticket; the synchronous mode drains inline."""
        with self._lock:
            if self._tickets and self._gate_open(self._tickets[0]):
                return self._tickets.popleft()
            return None

    def _gate_open(self, ticket: Ticket) -> bool:
        return self._published_version >= ticket.step - self.max_lag

    def resolve(self, ticket: Ticket, group: Group) -> bool:
        """Submit one ticketed rollout; returns whether it survived filters."""
        with self._lock:
            state = self._steps[ticket.step]
            state.rewards.extend(group.rewards)
            staleness = ticket.step - group.policy_version
            state.max_staleness = max(state.max_staleness, staleness)
            verdict = self._filter(group)
            if verdict == "ok":
                state.accepted.append((ticket.slot, group))
                self._n_accepted += 1
            elif verdict == "zero_variance":
                state.n_zero_variance += 1
            else:
                state.n_stale += 1
            state.resolved += 1
            if state.resolved == state.expected:
                self._done_cv.notify_all()
            return verdict == "ok"

    # ── direct queue interface (no tickets) ──────────────────────────

    def submit(self, group: Group) -> bool:
        """Filter and enqueue one group; False if filtered out.

        Raises BufferFull at capacity — the producer is expected to back
        off and retry once the trainer drains.
        """
        with self._lock:
            verdict = self._filter(group)
            if verdict != "ok":
                return False
            if self._n_accepted >= self.capacity:
                raise BufferFull(f"buffer at capacity {self.capacity}")
            self._queue.append(group)
            self._n_accepted += 1
            return True

    def dequeue(self) -> Group | None:
        """Pop the oldest direct-submitted group, FIFO."""
        with self._lock:
            if not self._queue:
                return None
            self._n_accepted -= 1
            return self._queue.popleft()

    def _filter(self, group: Group) -> str:
        if self.drop_zero_variance and len(set(group.rewards)) <= 1:
            return "zero_variance"
        if group.policy_version < self._published_version - self.max_lag:
            return "stale"
        return "ok"

    # ── trainer side ─────────────────────────────────────────────────

    def collect_step(self, step: int, timeout: float | None = None) -> StepResult:
        """Wait for every slot of ``step`` to resolve; return survivors.

        Groups come back sorted by slot, so downstream accumulation is
        order-deterministic no matter which worker finished first.
        """
        with self._lock:
            state = self._steps.get(step)
            if state is None:
                raise ValueError(f"step {step} was never scheduled")
            while state.resolved < state.expected:
                if not self._done_cv.wait(timeout=timeout):
                    raise TimeoutError(f"step {step} did not complete in time")
            del self._steps[step]
            state.accepted.sort(key=lambda pair: pair[0])
            groups = tuple(g for _, g in state.accepted)
            self._n_accepted -= len(groups)
            mean_reward = float(np.mean(state.rewards)) if state.rewards else 0.0
            return StepResult(
                step=step,
                groups=groups,
                mean_reward=mean_reward,
                max_staleness=state.max_staleness,
                n_zero_variance=state.n_zero_variance,
                n_stale=state.n_stale,
            )

    def size(self) -> int:
        with self._lock:
            return self._n_accepted

    def close(self) -> None:
        """Wake every blocked worker with a None ticket."""
        with self._lock:
            self._closed = True
            self._work_cv.notify_all()
