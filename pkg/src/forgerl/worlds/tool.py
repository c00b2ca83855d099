"""Cue-following tool world.

Each task is a short sequence of tool calls drawn from a fixed six-entry
menu.  The environment is cooperative: the opening user message hints at
the first call, and every correct call's observation hints at the next
one.  A policy that learns "do what the latest hint says" solves every
task, including ones it has never seen — which is exactly the
generalization the curriculum experiments measure.

Difficulty is depth: moderate tasks are 1–2 calls over menu entries
0–3; extreme tasks are 4–5 calls and always involve entry 4 or 5, which
moderate-task training never exercises.

Token layout: 0–5 model actions (menu indices), 6–11 hint tokens
(HINT_BASE + next index), 12 the wrong-call terminator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ..codec import ToolCall
from ..rewards import GoldStep

__all__ = [
    "MENU",
    "N_ACTIONS",
    "HINT_BASE",
    "WRONG_TOKEN",
    "N_TOKENS",
    "ToolWorldTask",
    "gen_tool_tasks",
]

MENU: tuple[ToolCall, ...] = (
    ToolCall("get_weather", (("city", "tokyo"),)),
    ToolCall("get_time", (("timezone", "utc"),)),
    ToolCall("search_web", (("query", "latest news"),)),
    ToolCall("read_file", (("path", "notes.txt"),)),
    ToolCall("send_email", (("to", "ops"), ("body", "status ok"))),
    ToolCall("run_query", (("sql", "select 1"),)),
)
N_ACTIONS = len(MENU)
HINT_BASE = N_ACTIONS
WRONG_TOKEN = HINT_BASE + N_ACTIONS
N_TOKENS = WRONG_TOKEN + 1

MODERATE_LENGTHS = (1, 2)
MODERATE_INDICES = (0, 1, 2, 3)
EXTREME_LENGTHS = (4, 5)
HARD_INDICES = (4, 5)


@dataclass(frozen=True)
class ToolWorldTask:
    """A hinted call sequence; ``gold_indices`` are menu positions."""

    task_id: str
    gold_indices: tuple[int, ...]
    verified: bool = True
    oracle_solvable: bool = True

    def __post_init__(self) -> None:
        if not self.gold_indices:
            raise ValueError("a task needs at least one gold call")
        for i in self.gold_indices:
            if not (0 <= i < N_ACTIONS):
                raise ValueError(f"gold index {i} outside the menu")

    def gold_steps(self) -> tuple[GoldStep, ...]:
        return tuple(GoldStep(MENU[i]) for i in self.gold_indices)

    def hint_token(self, step: int) -> int:
        return HINT_BASE + self.gold_indices[step]

    def oracle_action(self, tokens: Sequence[int]) -> int:
        """Follow the most recent hint token."""
        for t in reversed(tokens):
            if HINT_BASE <= t < HINT_BASE + N_ACTIONS:
                return t - HINT_BASE
        return 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "world": "tool",
            "task_id": self.task_id,
            "gold_indices": list(self.gold_indices),
            "verified": self.verified,
            "oracle_solvable": self.oracle_solvable,
        }

    @staticmethod
    def from_dict(rec: dict[str, Any]) -> "ToolWorldTask":
        return ToolWorldTask(
            task_id=rec["task_id"],
            gold_indices=tuple(int(i) for i in rec["gold_indices"]),
            verified=bool(rec.get("verified", True)),
            oracle_solvable=bool(rec.get("oracle_solvable", True)),
        )


def gen_tool_tasks(
    n: int,
    seed: int,
    kind: str = "moderate",
    id_prefix: str = "tool",
    unverified_rate: float = 0.0,
    moderate_lengths: tuple[int, ...] = MODERATE_LENGTHS,
) -> list[ToolWorldTask]:
    """Generate ``n`` tasks of one difficulty kind, deterministically.

    ``kind`` is "moderate" (easy menu entries, lengths drawn from
    ``moderate_lengths``), "extreme" (long, one hard entry), or "mixed"
    (half and half, interleaved).
    """
    if kind not in ("moderate", "extreme", "mixed"):
        raise ValueError(f"unknown task kind: {kind!r}")
    if any(length < 1 for length in moderate_lengths):
        raise ValueError("task lengths must be >= 1")
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        this_kind = kind if kind != "mixed" else ("extreme" if i % 2 else "moderate")
        if this_kind == "moderate":
            length = int(rng.choice(moderate_lengths))
            gold = tuple(int(a) for a in rng.choice(MODERATE_INDICES, size=length))
        else:
            # Long sequence of common entries with exactly one rare entry.
            # One rare step keeps the task reachable for a policy that has
            # already mastered the common entries, while the full sequence
            # stays far out of reach for an untrained one.
            length = int(rng.choice(EXTREME_LENGTHS))
            gold = [int(a) for a in rng.choice(MODERATE_INDICES, size=length)]
            gold[int(rng.integers(0, length))] = int(rng.choice(HARD_INDICES))
            gold = tuple(gold)
        verified = True
        if unverified_rate > 0.0:
            verified = bool(rng.random() >= unverified_rate)
        tasks.append(
            ToolWorldTask(
                task_id=f"{id_prefix}-{this_kind}-{i:04d}",
                gold_indices=gold,
                verified=verified,
            )
        )
    return tasks
