"""Toy environments, the tabular policy, and rollout machinery."""

from .policy import (
    DEFAULT_HISTORY,
    DEFAULT_N_STATES,
    OraclePolicy,
    TabularPolicy,
    context_states,
    grad_log_prob,
    state_of,
)
from .rollout import (
    default_max_turns,
    estimate_difficulty,
    evaluate_temperatures,
    rollout,
    rollout_group,
    turn_budget_sweep,
)
from .search import SearchWorldTask, gen_search_tasks
from .tool import MENU, ToolWorldTask, gen_tool_tasks

__all__ = [
    "DEFAULT_HISTORY",
    "DEFAULT_N_STATES",
    "OraclePolicy",
    "TabularPolicy",
    "context_states",
    "grad_log_prob",
    "state_of",
    "default_max_turns",
    "estimate_difficulty",
    "evaluate_temperatures",
    "rollout",
    "rollout_group",
    "turn_budget_sweep",
    "MENU",
    "ToolWorldTask",
    "gen_tool_tasks",
    "SearchWorldTask",
    "gen_search_tasks",
    "task_to_dict",
    "task_from_dict",
]


def task_to_dict(task) -> dict:
    return task.to_dict()


def task_from_dict(rec: dict):
    world = rec.get("world")
    if world == "tool":
        return ToolWorldTask.from_dict(rec)
    if world == "search":
        return SearchWorldTask.from_dict(rec)
    raise ValueError(f"unknown world: {world!r}")
