"""Hinted binary-tree search world.

The agent starts at the root of a depth-d binary tree holding one target
leaf and, each turn, selects one of eight menu slots.  At an internal
node a slot navigates to child ``slot % 2``; on the episode's final turn
— or as soon as a leaf page is reached — the slot is read as an answer,
naming leaf ``slot % 2**d``.  The environment's observations always tell
the truth: a direction hint while the target is still below, "lost"
once it is not, and the page label on arrival at any leaf.

Eight divides evenly by every leaf count (depths 1–3), so a uniform
policy forced to answer immediately is correct exactly 1/#leaves of the
time — the budget-0 baseline the turn-scaling runs are measured against.

Token layout: 0–7 model actions (slots), 8/9 left/right hints, 10 lost,
11–18 found-at-leaf markers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ..codec import ToolCall

__all__ = [
    "N_SLOTS",
    "HINT_LEFT",
    "HINT_RIGHT",
    "LOST_TOKEN",
    "FOUND_BASE",
    "N_TOKENS",
    "slot_call",
    "SearchWorldTask",
    "gen_search_tasks",
]

N_SLOTS = 8
HINT_LEFT = N_SLOTS
HINT_RIGHT = N_SLOTS + 1
LOST_TOKEN = N_SLOTS + 2
FOUND_BASE = N_SLOTS + 3
N_TOKENS = FOUND_BASE + N_SLOTS

MAX_DEPTH = 3


def slot_call(slot: int) -> ToolCall:
    return ToolCall("select", (("slot", str(slot)),))


@dataclass(frozen=True)
class SearchWorldTask:
    """One complete binary tree, one target leaf, one answer per leaf."""

    task_id: str
    depth: int
    target: int
    answers: tuple[str, ...]
    verified: bool = True
    oracle_solvable: bool = True

    def __post_init__(self) -> None:
        if not (1 <= self.depth <= MAX_DEPTH):
            raise ValueError(f"depth must be in [1, {MAX_DEPTH}]")
        leaves = 1 << self.depth
        if not (0 <= self.target < leaves):
            raise ValueError("target must name a leaf")
        if len(self.answers) != leaves:
            raise ValueError("need one answer string per leaf")
        if len(set(self.answers)) != leaves:
            raise ValueError("leaf answers must be distinct")

    @property
    def n_leaves(self) -> int:
        return 1 << self.depth

    def gold_answer(self) -> str:
        return self.answers[self.target]

    def on_target_path(self, level: int, index: int) -> bool:
        """Is node ``index`` at ``level`` an ancestor of the target?"""
        return index == (self.target >> (self.depth - level))

    def direction_at(self, level: int) -> int:
        """Next branch (0 left, 1 right) along the target's path."""
        return (self.target >> (self.depth - 1 - level)) & 1

    def oracle_action(self, tokens: Sequence[int]) -> int:
        """Follow the latest hint; answer the found page's leaf."""
        for t in reversed(tokens):
            if t == HINT_LEFT:
                return 0
            if t == HINT_RIGHT:
                return 1
            if FOUND_BASE <= t < FOUND_BASE + N_SLOTS:
                return t - FOUND_BASE
            if t == LOST_TOKEN:
                return 0
        return 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "world": "search",
            "task_id": self.task_id,
            "depth": self.depth,
            "target": self.target,
            "answers": list(self.answers),
            "verified": self.verified,
            "oracle_solvable": self.oracle_solvable,
        }

    @staticmethod
    def from_dict(rec: dict[str, Any]) -> "SearchWorldTask":
        return SearchWorldTask(
            task_id=rec["task_id"],
            depth=int(rec["depth"]),
            target=int(rec["target"]),
            answers=tuple(rec["answers"]),
            verified=bool(rec.get("verified", True)),
            oracle_solvable=bool(rec.get("oracle_solvable", True)),
        )


def gen_search_tasks(
    n: int,
    seed: int,
    depths: Sequence[int] = (1, 2, 3),
    id_prefix: str = "search",
) -> list[SearchWorldTask]:
    """Generate ``n`` search tasks with depths cycling through ``depths``."""
    for d in depths:
        if not (1 <= d <= MAX_DEPTH):
            raise ValueError(f"depth must be in [1, {MAX_DEPTH}]")
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        depth = int(depths[i % len(depths)])
        leaves = 1 << depth
        target = int(rng.integers(0, leaves))
        task_id = f"{id_prefix}-d{depth}-{i:04d}"
        answers = tuple(f"secret {task_id} {k}" for k in range(leaves))
        tasks.append(
            SearchWorldTask(task_id=task_id, depth=depth, target=target, answers=answers)
        )
    return tasks
