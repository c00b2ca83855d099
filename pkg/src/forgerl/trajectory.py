"""Trajectory and group records shared by the worlds, the trainer, and disk.

A trajectory carries two parallel views of an episode:

* the *message* view — the conversation as rendered through the template
  codec, suitable for storage and replay;
* the *token* view — the flat action/observation symbol stream the
  policy actually operates on, with per-token origin flags.

Steps tie the two together: each step records the raw assistant text,
the parse result, and where its model tokens sit in the token stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

from .codec import Message, ToolCall, message_from_dict, message_to_dict
from .rewards import TaskJudgment

__all__ = [
    "ORIGIN_MODEL",
    "ORIGIN_ENV",
    "StepRecord",
    "Trajectory",
    "Group",
    "trajectory_to_dict",
    "trajectory_from_dict",
]

ORIGIN_MODEL = "model"
ORIGIN_ENV = "env"
_ORIGINS = (ORIGIN_MODEL, ORIGIN_ENV)


@dataclass(frozen=True)
class StepRecord:
    """One assistant turn: what was emitted and how it parsed.

    ``call`` is None when the raw text failed to parse back through the
    codec.  ``token_start:token_end`` is the slice of the trajectory's
    token stream holding this step's model tokens.
    """

    raw: str
    call: ToolCall | None
    message_index: int
    token_start: int
    token_end: int


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    policy_version: int
    temperature: float
    messages: tuple[Message, ...]
    tokens: tuple[int, ...]
    token_origins: tuple[str, ...]
    steps: tuple[StepRecord, ...]
    reward: float
    halted: bool
    judgment: TaskJudgment | None = None
    answer: str | None = None

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.token_origins):
            raise ValueError("tokens and token_origins must have equal length")
        for o in self.token_origins:
            if o not in _ORIGINS:
                raise ValueError(f"unknown token origin: {o!r}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    def n_model_tokens(self) -> int:
        return sum(1 for o in self.token_origins if o == ORIGIN_MODEL)


@dataclass(frozen=True)
class Group:
    """K rollouts of one task under one policy version."""

    task_id: str
    trajectories: tuple[Trajectory, ...]
    rewards: tuple[float, ...]
    policy_version: int

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError("a group holds at least one trajectory")
        if len(self.rewards) != len(self.trajectories):
            raise ValueError("one reward per trajectory")
        for t in self.trajectories:
            if t.task_id != self.task_id:
                raise ValueError("all trajectories in a group share the task")
            if t.policy_version != self.policy_version:
                raise ValueError("all trajectories in a group share the policy version")
        for r in self.rewards:
            if not math.isfinite(r):
                raise ValueError("rewards must be finite")

    @property
    def size(self) -> int:
        return len(self.trajectories)


# ── JSONL (de)serialization ─────────────────────────────────────────────


def trajectory_to_dict(traj: Trajectory) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "task_id": traj.task_id,
        "policy_version": traj.policy_version,
        "temperature": traj.temperature,
        "messages": [message_to_dict(m) for m in traj.messages],
        "token_origins": list(traj.token_origins),
        "reward": traj.reward,
        "halted": traj.halted,
        "tokens": list(traj.tokens),
        "steps": [
            {
                "raw": s.raw,
                "call": _call_to_dict(s.call),
                "message_index": s.message_index,
                "token_start": s.token_start,
                "token_end": s.token_end,
            }
            for s in traj.steps
        ],
    }
    if traj.judgment is not None:
        rec["judgment"] = {"completed": traj.judgment.completed, "judge": traj.judgment.judge}
    if traj.answer is not None:
        rec["answer"] = traj.answer
    return rec


def trajectory_from_dict(rec: dict[str, Any]) -> Trajectory:
    judgment = None
    if rec.get("judgment") is not None:
        judgment = TaskJudgment(
            completed=bool(rec["judgment"]["completed"]),
            judge=rec["judgment"].get("judge", "rule"),
        )
    return Trajectory(
        task_id=rec["task_id"],
        policy_version=int(rec["policy_version"]),
        temperature=float(rec["temperature"]),
        messages=tuple(message_from_dict(m) for m in rec["messages"]),
        tokens=tuple(int(t) for t in rec["tokens"]),
        token_origins=tuple(rec["token_origins"]),
        steps=tuple(
            StepRecord(
                raw=s["raw"],
                call=_call_from_dict(s["call"]),
                message_index=int(s["message_index"]),
                token_start=int(s["token_start"]),
                token_end=int(s["token_end"]),
            )
            for s in rec["steps"]
        ),
        reward=float(rec["reward"]),
        halted=bool(rec["halted"]),
        judgment=judgment,
        answer=rec.get("answer"),
    )


def _call_to_dict(call: ToolCall | None) -> dict[str, Any] | None:
    if call is None:
        return None
    return {"name": call.name, "args": [[k, v] for k, v in call.args]}


def _call_from_dict(rec: dict[str, Any] | None) -> ToolCall | None:
    if rec is None:
        return None
    return ToolCall(rec["name"], tuple((k, v) for k, v in rec["args"]))
