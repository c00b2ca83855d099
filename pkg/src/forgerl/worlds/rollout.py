"""Episode generation: policies acting in worlds, through the template.

Every assistant turn is rendered to template text and parsed back before
the environment sees it — the same path a real serving stack would take
— so format failures are an actual failure mode here, not a simulated
one.  An optional corruptor deletes one character from the rendered text
at a configured rate to keep that path honest under test.

Rollouts are pure functions of (task, policy parameters, temperature,
max_turns, seed): same inputs, same trajectory bytes.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Mapping, Sequence

import numpy as np

from .. import _kernels as kernels
from ..codec import FormatError, Message, Segment, ToolCall, parse, render
from ..curriculum import DifficultyRecord, pass_at_k
from ..rewards import TaskJudgment, apply_format_penalty, outcome_reward, step_reward, trajectory_reward
from ..temperature import TempSchedule
from ..trajectory import ORIGIN_ENV, ORIGIN_MODEL, Group, StepRecord, Trajectory
from .policy import OraclePolicy, TabularPolicy
from .search import FOUND_BASE, HINT_LEFT, HINT_RIGHT, LOST_TOKEN, N_SLOTS, SearchWorldTask, slot_call
from .tool import MENU, WRONG_TOKEN, ToolWorldTask

__all__ = [
    "rollout",
    "rollout_group",
    "default_max_turns",
    "estimate_difficulty",
    "turn_budget_sweep",
    "evaluate_temperatures",
]

Task = ToolWorldTask | SearchWorldTask


def default_max_turns(task: Task) -> int:
    """Smallest turn budget under which the task is exactly solvable."""
    if isinstance(task, ToolWorldTask):
        return len(task.gold_indices)
    return task.depth + 1


def rollout(
    task: Task,
    policy,
    temperature: float,
    max_turns: int,
    seed,
    *,
    corrupt_rate: float = 0.0,
    policy_version: int = 0,
    greedy: bool = False,
) -> Trajectory:
    """Play one episode and score it.

    ``seed`` may be an int, a SeedSequence, or a Generator.  ``greedy``
    bypasses sampling (argmax actions) for deterministic evaluation;
    the recorded temperature is still ``temperature``.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    if isinstance(task, ToolWorldTask):
        body = _rollout_tool
    elif isinstance(task, SearchWorldTask):
        body = _rollout_search
    else:
        raise TypeError(f"unknown task type: {type(task).__name__}")
    return body(task, policy, temperature, max_turns, rng, corrupt_rate, policy_version, greedy)


def rollout_group(
    task: Task,
    policy,
    k: int,
    temperature: float,
    max_turns: int,
    seed,
    *,
    corrupt_rate: float = 0.0,
    policy_version: int = 0,
) -> Group:
    """K independent rollouts of one task under one policy version."""
    if k < 1:
        raise ValueError("group size must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    trajs = tuple(
        rollout(
            task,
            policy,
            temperature,
            max_turns,
            child,
            corrupt_rate=corrupt_rate,
            policy_version=policy_version,
        )
        for child in ss.spawn(k)
    )
    return Group(
        task_id=task.task_id,
        trajectories=trajs,
        rewards=tuple(t.reward for t in trajs),
        policy_version=policy_version,
    )


# ── per-world episode loops ──────────────────────────────────────────────


def _choose(task: Task, policy, tokens: list[int], temperature: float, rng, greedy: bool) -> int:
    if isinstance(policy, OraclePolicy):
        return int(policy.act(task, tokens))
    state = policy.state_of(tokens)
    if greedy:
        return policy.greedy(state)
    u = rng.random()
    return int(kernels.sample_row(policy.table[state], 1.0 / temperature, u))


def _mangle(raw: str, rng) -> str:
    """Delete one character somewhere in the rendered text."""
    pos = int(rng.integers(0, len(raw)))
    return raw[:pos] + raw[pos + 1 :]


def _parse_step(raw: str) -> ToolCall | None:
    """Recover the single tool call from one rendered assistant turn."""
    try:
        msgs, _ = parse(raw)
    except FormatError:
        return None
    if len(msgs) != 1:
        return None
    calls = msgs[0].tool_calls()
    if len(calls) != 1:
        return None
    return calls[0]


def _obs(text: str) -> Message:
    return Message("observation", (Segment.tool_response(text),))


def _emit_step(
    intended: ToolCall,
    messages: list[Message],
    tokens: list[int],
    origins: list[str],
    steps: list[StepRecord],
    action: int,
    rng,
    corrupt_rate: float,
) -> ToolCall | None:
    """Render, maybe corrupt, parse, and record one assistant turn."""
    asst = Message("assistant", (Segment.tool_call(intended),))
    raw = render([asst])
    if corrupt_rate > 0.0 and rng.random() < corrupt_rate:
        raw = _mangle(raw, rng)
    call = _parse_step(raw)
    steps.append(
        StepRecord(
            raw=raw,
            call=call,
            message_index=len(messages),
            token_start=len(tokens),
            token_end=len(tokens) + 1,
        )
    )
    messages.append(asst)
    tokens.append(action)
    origins.append(ORIGIN_MODEL)
    return call


def _finish(
    task_id: str,
    policy_version: int,
    temperature: float,
    messages: list[Message],
    tokens: list[int],
    origins: list[str],
    steps: list[StepRecord],
    completed: bool,
    answer: str | None = None,
) -> Trajectory:
    judgment = TaskJudgment(completed=completed, judge="rule")
    draft = Trajectory(
        task_id=task_id,
        policy_version=policy_version,
        temperature=temperature,
        messages=tuple(messages),
        tokens=tuple(tokens),
        token_origins=tuple(origins),
        steps=tuple(steps),
        reward=0.0,
        halted=False,
        judgment=judgment,
        answer=answer,
    )
    trace = apply_format_penalty(draft)
    if not trace.halted:
        reward = float(trajectory_reward(task_id, trace, judgment))
        trace = dataclasses.replace(trace, reward=reward)
    return trace


def _rollout_tool(
    task: ToolWorldTask,
    policy,
    temperature: float,
    max_turns: int,
    rng,
    corrupt_rate: float,
    policy_version: int,
    greedy: bool,
) -> Trajectory:
    gold = task.gold_steps()
    messages = [
        Message(
            "user",
            (Segment.text_(f"Run the hinted tools in order. hint={task.gold_indices[0]}"),),
        )
    ]
    tokens = [task.hint_token(0)]
    origins = [ORIGIN_ENV]
    steps: list[StepRecord] = []
    completed = False

    for t in range(max_turns):
        a = _choose(task, policy, tokens, temperature, rng, greedy)
        call = _emit_step(MENU[a], messages, tokens, origins, steps, a, rng, corrupt_rate)
        if call is None:
            break
        if step_reward(call, gold[t]) == 1:
            if t == len(gold) - 1:
                completed = True
                break
            nxt = task.gold_indices[t + 1]
            messages.append(_obs(f"ok; hint={nxt}"))
            tokens.append(task.hint_token(t + 1))
            origins.append(ORIGIN_ENV)
        else:
            messages.append(_obs("wrong call; task aborted"))
            tokens.append(WRONG_TOKEN)
            origins.append(ORIGIN_ENV)
            break

    return _finish(
        task.task_id, policy_version, temperature, messages, tokens, origins, steps, completed
    )


def _interpret_slot(call: ToolCall) -> int | None:
    if call.name != "select":
        return None
    args = call.args_dict()
    if set(args) != {"slot"}:
        return None
    try:
        s = int(args["slot"])
    except ValueError:
        return None
    return s if 0 <= s < N_SLOTS else None


def _rollout_search(
    task: SearchWorldTask,
    policy,
    temperature: float,
    max_turns: int,
    rng,
    corrupt_rate: float,
    policy_version: int,
    greedy: bool,
) -> Trajectory:
    first = task.direction_at(0)
    messages = [
        Message(
            "user",
            (
                Segment.text_(
                    f"Find the secret document. depth={task.depth}; "
                    f"hint={'left' if first == 0 else 'right'}"
                ),
            ),
        )
    ]
    tokens = [HINT_LEFT if first == 0 else HINT_RIGHT]
    origins = [ORIGIN_ENV]
    steps: list[StepRecord] = []
    completed = False
    answer: str | None = None
    level, index = 0, 0

    for t in range(max_turns):
        s = _choose(task, policy, tokens, temperature, rng, greedy)
        call = _emit_step(slot_call(s), messages, tokens, origins, steps, s, rng, corrupt_rate)
        if call is None:
            break
        slot = _interpret_slot(call)
        if slot is None:
            messages.append(_obs("unrecognized call; session closed"))
            break
        if t == max_turns - 1 or level == task.depth:
            leaf = slot % task.n_leaves
            answer = task.answers[leaf]
            completed = outcome_reward(answer, task.gold_answer()) == 1
            messages.append(_obs("answer recorded"))
            break
        index = 2 * index + (slot % 2)
        level += 1
        if level == task.depth and index == task.target:
            messages.append(_obs(f"found: page[{index}]"))
            tokens.append(FOUND_BASE + index)
            origins.append(ORIGIN_ENV)
        elif level < task.depth and task.on_target_path(level, index):
            b = task.direction_at(level)
            messages.append(_obs(f"hint: {'left' if b == 0 else 'right'}"))
            tokens.append(HINT_LEFT if b == 0 else HINT_RIGHT)
            origins.append(ORIGIN_ENV)
        else:
            # A wrong turn leaves the trail of hints for good, so the
            # session ends; the answer prompt is only reachable on-path.
            messages.append(_obs("lost; session closed"))
            tokens.append(LOST_TOKEN)
            origins.append(ORIGIN_ENV)
            break

    return _finish(
        task.task_id,
        policy_version,
        temperature,
        messages,
        tokens,
        origins,
        steps,
        completed,
        answer,
    )


# ── measurement utilities built on rollouts ──────────────────────────────


def estimate_difficulty(
    task: Task,
    policy,
    n: int,
    seed,
    *,
    temperature: float | None = None,
    max_turns: int | None = None,
    ks: Sequence[int] = (8,),
) -> DifficultyRecord:
    """Sample the task n times and summarize as a difficulty record."""
    if n < 1:
        raise ValueError("need at least one sample")
    temp = temperature if temperature is not None else policy.temperature
    turns = max_turns if max_turns is not None else default_max_turns(task)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    c = 0
    for child in ss.spawn(n):
        traj = rollout(task, policy, temp, turns, child)
        if traj.reward >= 1.0:
            c += 1
    pass_at = {k: pass_at_k(n, c, k) for k in ks if 1 <= k <= n}
    return DifficultyRecord(
        task_id=task.task_id,
        n_samples=n,
        n_correct=c,
        pass_at=pass_at,
        answer_verified=task.verified,
        oracle_solvable=task.oracle_solvable,
    )


def turn_budget_sweep(
    task_set: Iterable[Task],
    policy,
    budgets: Sequence[int],
    *,
    seed: int = 0,
    temperature: float | None = None,
    greedy: bool = True,
) -> dict[int, float]:
    """Mean outcome reward per interaction budget over a task set.

    A budget is the number of turns available before the forced answer,
    so the episode gets budget+1 turns in total.  Greedy decoding by
    default: sweeps measure the policy, not sampling noise.
    """
    budgets = list(budgets)
    if any(b < 0 for b in budgets):
        raise ValueError("budgets must be >= 0")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be strictly increasing")
    tasks = list(task_set)
    if not tasks:
        raise ValueError("empty task set")
    temp = temperature if temperature is not None else getattr(policy, "temperature", 1.0)

    result: dict[int, float] = {}
    for bi, b in enumerate(budgets):
        ss = np.random.SeedSequence(seed, spawn_key=(bi,))
        total = 0
        for task, child in zip(tasks, ss.spawn(len(tasks))):
            traj = rollout(task, policy, temp, b + 1, child, greedy=greedy)
            gold = task.gold_answer() if isinstance(task, SearchWorldTask) else None
            if gold is not None:
                total += outcome_reward(traj.answer or "", gold)
            else:
                total += int(traj.reward >= 1.0)
        result[b] = total / len(tasks)
    return result


def evaluate_temperatures(
    schedule: TempSchedule,
    policy,
    val_tasks: Iterable[Task],
    *,
    n_per_task: int = 4,
    seed: int = 0,
    max_turns: int | None = None,
) -> Mapping[float, float]:
    """Score every candidate temperature on the held-out set.

    Fills ``schedule.eval_scores`` in place (mean trajectory reward per
    candidate) and returns it.  Identical seeds per candidate, so the
    comparison across temperatures is paired.
    """
    tasks = list(val_tasks)
    if not tasks:
        raise ValueError("empty validation set")
    for temp in schedule.candidates:
        total = 0.0
        count = 0
        ss = np.random.SeedSequence(seed)
        for task, child in zip(tasks, ss.spawn(len(tasks))):
            turns = max_turns if max_turns is not None else default_max_turns(task)
            for grand in child.spawn(n_per_task):
                total += rollout(task, policy, temp, turns, grand).reward
                count += 1
        schedule.eval_scores[temp] = total / count
    return schedule.eval_scores
