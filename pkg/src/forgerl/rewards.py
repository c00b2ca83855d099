"""Binary rewards for tool-calling traces.

Everything here is exact-match and deterministic: a step is right or it
is not, a trajectory succeeded or it did not.  Partial credit is out of
scope on purpose — downstream advantage estimation relies on rewards
being verifiable bits, not heuristic scores.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .codec import ToolCall

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, types only
    from .trajectory import Trajectory

__all__ = [
    "GoldStep",
    "TaskJudgment",
    "JUDGES",
    "calls_match",
    "step_reward",
    "trajectory_reward",
    "apply_format_penalty",
    "outcome_reward",
]

JUDGES = ("rule", "oracle")


@dataclass(frozen=True)
class GoldStep:
    """Reference call for one step of a task."""

    expected: ToolCall


@dataclass(frozen=True)
class TaskJudgment:
    """Verdict from a task's own checker.

    ``judge`` records which kind of checker produced the verdict; the
    toy environments all use deterministic rule judges.
    """

    completed: bool
    judge: str = "rule"

    def __post_init__(self) -> None:
        if self.judge not in JUDGES:
            raise ValueError(f"unknown judge kind: {self.judge!r}")


def calls_match(a: ToolCall, b: ToolCall) -> bool:
    """True iff two calls agree on name and exact argument mapping.

    Argument *order* is irrelevant; keys and values are compared
    verbatim, with no whitespace normalization.
    """
    return a.name == b.name and a.args_dict() == b.args_dict()


def step_reward(call: ToolCall | None, gold: GoldStep) -> int:
    """1 iff the emitted call parsed and exactly matches the gold call.

    ``call`` is None when the model's output for this step failed to
    parse; that is always reward 0.
    """
    if call is None:
        return 0
    return 1 if calls_match(call, gold.expected) else 0


def trajectory_reward(task_id: str, trace: "Trajectory", judgment: TaskJudgment) -> int:
    """1 iff every call in the trace is well-formed and the judge accepts.

    Format correctness is a hard gate: a single malformed call zeroes
    the whole trajectory regardless of what the judge says.  ``task_id``
    is accepted for symmetry with the judges' interface; the verdict
    itself already binds to the task.
    """
    del task_id
    if trace.halted:
        return 0
    if any(step.call is None for step in trace.steps):
        return 0
    return 1 if judgment.completed else 0


def apply_format_penalty(trace: "Trajectory") -> "Trajectory":
    """Truncate a trace at its first malformed call and zero the reward.

    The offending step is kept (inclusive truncation) so the failure is
    visible in logs, everything after it is dropped, and the result is
    marked halted.  Traces with no malformed call are returned
    unchanged.
    """
    fail_at = None
    for i, step in enumerate(trace.steps):
        if step.call is None:
            fail_at = i
            break
    if fail_at is None:
        return trace

    kept = trace.steps[: fail_at + 1]
    n_msgs = kept[-1].message_index + 1
    token_end = kept[-1].token_end
    return dataclasses.replace(
        trace,
        steps=kept,
        messages=trace.messages[:n_msgs],
        tokens=trace.tokens[:token_end],
        token_origins=trace.token_origins[:token_end],
        halted=True,
        reward=0.0,
    )


def outcome_reward(answer: str, gold_answer: str) -> int:
    """1 iff the answers match after whitespace normalization.

    Normalization trims the ends and collapses internal runs of
    whitespace to single spaces.  This applies to free-text answers
    only — call matching never normalizes.
    """
    return 1 if _normalize(answer) == _normalize(gold_answer) else 0


def _normalize(s: str) -> str:
    return " ".join(s.split())
