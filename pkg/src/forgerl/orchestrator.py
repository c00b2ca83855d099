"""The training system: rollout engines, data buffer, trainer, snapshots.

One process, real threads, the same contracts a disaggregated system
would have: N rollout workers read immutable policy snapshots and feed
groups through the buffer; one trainer consumes them, updates the
full-precision parameters, and publishes versioned snapshots carrying a
block-quantized copy for the rollout side.

Two modes share every line of the loop.  ``colocated_sync`` runs the
rollouts inline between trainer steps; ``disaggregated_async`` lets the
workers run ahead, bounded by ``max_lag``.  At max_lag 0 the async
pipeline collapses to the sync schedule exactly — same tickets, same
seeds, same floats — which the tests check bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as kernels
from .buffer import DataBuffer, Ticket
from .config import ConfigError, ExperimentConfig, dump_config
from .curriculum import (
    EXTREME,
    MODERATE,
    CurriculumState,
    Thresholds,
    classify,
    maybe_switch,
)
from .grpo import loss_and_gradient, mask_model_tokens
from .quant import QuantizedParams, dequantize, quantize_blockwise
from .temperature import PlateauDetector, TempSchedule, select_temperature
from .trajectory import Trajectory, trajectory_to_dict
from .worlds import (
    TabularPolicy,
    default_max_turns,
    estimate_difficulty,
    evaluate_temperatures,
    gen_search_tasks,
    gen_tool_tasks,
    grad_log_prob,
    rollout,
    rollout_group,
    turn_budget_sweep,
)
from .worlds.search import N_SLOTS
from .worlds.tool import N_ACTIONS

__all__ = [
    "PolicySnapshot",
    "SnapshotStore",
    "TrainerState",
    "publish_snapshot",
    "EmptyDistillPool",
    "distill_round",
    "pool_log_likelihood",
    "WorldBundle",
    "build_world",
    "classify_pools",
    "eval_mean_reward",
    "RunReport",
    "run",
]


# ── snapshots ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable published view of the policy.

    ``parameters`` is a read-only full-precision copy; ``quantized`` is
    the 8-bit block-quantized form rollout workers actually load.  The
    sampling temperature and curriculum stage ride along so workers
    need no other channel to the trainer.
    """

    version: int
    parameters: np.ndarray
    quantized: QuantizedParams | None
    temperature: float
    stage: int
    n_states: int
    n_actions: int
    history: int

    def as_policy(self) -> TabularPolicy:
        table = np.asarray(self.parameters).reshape(self.n_states, self.n_actions)
        return TabularPolicy(self.n_states, self.n_actions, self.temperature, self.history, table)

    def rollout_policy(self, quantized: bool = True) -> TabularPolicy:
        if quantized and self.quantized is not None:
            params = dequantize(self.quantized)
        else:
            params = self.parameters
        table = np.asarray(params).reshape(self.n_states, self.n_actions)
        return TabularPolicy(self.n_states, self.n_actions, self.temperature, self.history, table)


@dataclass
class TrainerState:
    """The trainer's mutable half: live policy plus publication counter."""

    policy: TabularPolicy
    next_version: int = 0
    stage: int = 1


def publish_snapshot(
    trainer: TrainerState, *, block_size: int = 64, quantize: bool = True
) -> PolicySnapshot:
    """Freeze the trainer's parameters into the next snapshot version.

    The trainer's own table is untouched — the snapshot gets a copy, and
    quantization runs on that copy only.
    """
    params = trainer.policy.flat()
    params.flags.writeable = False
    q = quantize_blockwise(params, block_size) if quantize else None
    snap = PolicySnapshot(
        version=trainer.next_version,
        parameters=params,
        quantized=q,
        temperature=trainer.policy.temperature,
        stage=trainer.stage,
        n_states=trainer.policy.n_states,
        n_actions=trainer.policy.n_actions,
        history=trainer.policy.history,
    )
    trainer.next_version += 1
    return snap


class SnapshotStore:
    """Single-publisher, many-reader snapshot handoff."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._latest: PolicySnapshot | None = None

    def publish(self, snap: PolicySnapshot) -> None:
        with self._lock:
            if self._latest is not None and snap.version <= self._latest.version:
                raise ValueError("snapshot versions must be strictly increasing")
            self._latest = snap

    def latest(self) -> PolicySnapshot:
        with self._lock:
            if self._latest is None:
                raise RuntimeError("no snapshot published yet")
            return self._latest


# ── iterative distillation ───────────────────────────────────────────────


class EmptyDistillPool(RuntimeError):
    """No trajectory reached the distillation reward threshold."""


def pool_log_likelihood(policy: TabularPolicy, pool: Sequence[Trajectory]) -> float:
    """Mean per-trajectory masked log-likelihood of the pool."""
    if not pool:
        raise EmptyDistillPool("empty pool")
    total = 0.0
    for traj in pool:
        tokens = np.asarray(traj.tokens, dtype=np.int64)
        m = mask_model_tokens(traj)
        states = policy.context_states(tokens)[m]
        actions = tokens[m]
        total += kernels.masked_logprob_sum(
            policy.table, states, actions, 1.0 / policy.temperature
        )
    return total / len(pool)


def collect_distill_pool(
    policy: TabularPolicy,
    task_set: Iterable,
    threshold: float,
    *,
    k_per_task: int = 8,
    seed: int = 0,
    corrupt_rate: float = 0.0,
) -> list[Trajectory]:
    """Roll the current policy and keep trajectories scoring >= threshold."""
    pool: list[Trajectory] = []
    ss = np.random.SeedSequence(seed, spawn_key=(4,))
    tasks = list(task_set)
    for task, child in zip(tasks, ss.spawn(len(tasks))):
        group = rollout_group(
            task,
            policy,
            k_per_task,
            policy.temperature,
            default_max_turns(task),
            child,
            corrupt_rate=corrupt_rate,
        )
        pool.extend(t for t in group.trajectories if t.reward >= threshold)
    return pool


def distill_round(
    policy: TabularPolicy,
    task_set: Iterable,
    threshold: float = 1.0,
    *,
    k_per_task: int = 8,
    epochs: int = 30,
    lr: float = 0.5,
    seed: int = 0,
) -> TabularPolicy:
    """Behavior-clone the policy's own successes into a fresh policy.

    Collects reward-thresholded trajectories, then fits a zero-initialized
    policy to them by plain gradient ascent on the masked log-likelihood
    for a fixed epoch budget.  Raises EmptyDistillPool if nothing scored.
    """
    pool = collect_distill_pool(
        policy, task_set, threshold, k_per_task=k_per_task, seed=seed
    )
    if not pool:
        raise EmptyDistillPool(
            f"no trajectory reached reward {threshold}; nothing to distill"
        )
    return fit_to_pool(policy, pool, epochs=epochs, lr=lr)


def fit_to_pool(
    template: TabularPolicy, pool: Sequence[Trajectory], *, epochs: int, lr: float
) -> TabularPolicy:
    """Maximum-likelihood cloning of a trajectory pool into a fresh table."""
    fresh = TabularPolicy(
        template.n_states, template.n_actions, template.temperature, template.history
    )
    for _ in range(epochs):
        grad = np.zeros_like(fresh.table)
        for traj in pool:
            grad += grad_log_prob(fresh, traj, mask_model_tokens(traj)).reshape(
                fresh.table.shape
            )
        fresh.table += lr * (grad / len(pool))
    return fresh


# ── experiment worlds ────────────────────────────────────────────────────


@dataclass
class WorldBundle:
    kind: str
    train_pool: list
    holdout: list
    val: list
    by_id: dict
    n_actions: int


def build_world(cfg: ExperimentConfig) -> WorldBundle:
    w = cfg.world
    if w.kind == "tool":
        train = gen_tool_tasks(
            w.moderate_tasks, w.task_seed, "moderate", "train",
            moderate_lengths=w.moderate_lengths,
        ) + gen_tool_tasks(w.extreme_tasks, w.task_seed + 1, "extreme", "train")
        holdout = gen_tool_tasks(w.holdout_tasks, w.task_seed + 2, "extreme", "holdout")
        val = gen_tool_tasks(
            w.val_tasks, w.task_seed + 3, "moderate", "val",
            moderate_lengths=w.moderate_lengths,
        )
        n_actions = N_ACTIONS
    else:
        train = gen_search_tasks(w.moderate_tasks + w.extreme_tasks, w.task_seed, w.depths, "train")
        holdout = gen_search_tasks(w.holdout_tasks, w.task_seed + 2, w.depths, "holdout")
        val = gen_search_tasks(w.val_tasks, w.task_seed + 3, w.depths, "val")
        n_actions = N_SLOTS
    by_id = {t.task_id: t for t in train + holdout + val}
    if len(by_id) != len(train) + len(holdout) + len(val):
        raise RuntimeError("task id collision across pools")
    return WorldBundle(w.kind, train, holdout, val, by_id, n_actions)


def classify_pools(
    bundle: WorldBundle, policy: TabularPolicy, cfg: ExperimentConfig
) -> tuple[CurriculumState, list]:
    """Probe every training task and split it into stage pools.

    The search world is not staged: everything lands in stage one and
    the curriculum switch never fires for lack of a stage-two pool.
    Probing can also be turned off outright (curriculum.classify: false),
    which trains on the pool exactly as generated.
    """
    if bundle.kind != "tool" or not cfg.curriculum.classify:
        state = CurriculumState(
            stage=1, stage1_pool=tuple(t.task_id for t in bundle.train_pool)
        )
        return state, []
    thr = Thresholds(easy=cfg.curriculum.easy_threshold, min_samples=cfg.curriculum.min_samples)
    records = []
    stage1, stage2 = [], []
    for i, task in enumerate(bundle.train_pool):
        rec = estimate_difficulty(
            task,
            policy,
            cfg.curriculum.n_probe,
            np.random.SeedSequence(cfg.seed, spawn_key=(2, i)),
            ks=cfg.curriculum.ks,
        )
        records.append(rec)
        label = classify(rec, thr)
        if label == MODERATE:
            stage1.append(task.task_id)
        elif label == EXTREME:
            stage2.append(task.task_id)
        # too_easy and unusable tasks train nobody; they are dropped.
    if not stage1:
        raise RuntimeError("stage-one pool is empty after classification")
    state = CurriculumState(stage=1, stage1_pool=tuple(stage1), stage2_pool=tuple(stage2))
    return state, records


def eval_mean_reward(
    policy: TabularPolicy,
    tasks: Sequence,
    *,
    n_per_task: int = 8,
    temperature: float | None = None,
    seed=0,
    corrupt_rate: float = 0.0,
) -> float:
    """Mean sampled reward over a task set; the standard held-out probe."""
    temp = temperature if temperature is not None else policy.temperature
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    total = 0.0
    count = 0
    for task, child in zip(tasks, ss.spawn(len(tasks))):
        for grand in child.spawn(n_per_task):
            total += rollout(
                task,
                policy,
                temp,
                default_max_turns(task),
                grand,
                corrupt_rate=corrupt_rate,
            ).reward
            count += 1
    return total / count


# ── the run loop ─────────────────────────────────────────────────────────


@dataclass
class RunReport:
    mode: str
    steps: int
    final_version: int
    final_mean_reward: float
    switch_step: int | None
    temperature_decisions: list
    holdout_reward: float | None
    budget_accuracy: dict | None
    distill: dict | None
    wall_time_s: float
    out_dir: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class _JsonlWriter:
    def __init__(self, path: Path):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def close(self) -> None:
        self._fh.close()


def _turns_for(cfg: ExperimentConfig, task, step: int) -> int:
    base = cfg.train.max_turns if cfg.train.max_turns > 0 else default_max_turns(task)
    if cfg.train.length_schedule == "ramp":
        half = max(1, cfg.train.steps // 2)
        frac = min(1.0, (step + 1) / half)
        return max(1, min(base, int(np.ceil(base * frac))))
    return base


def run(cfg: ExperimentConfig) -> RunReport:
    """Execute one full experiment; see the module docstring for shape."""
    cfg.validate()
    t0 = time.monotonic()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    g = cfg.train.groups_per_step
    lag = cfg.train.max_lag
    capacity = cfg.train.buffer_capacity or (lag + 1) * g
    if capacity < (lag + 1) * g:
        raise ConfigError(
            "train.buffer_capacity must be at least (max_lag + 1) * groups_per_step",
            "train.buffer_capacity",
        )

    bundle = build_world(cfg)
    policy = TabularPolicy(
        cfg.world.n_states, bundle.n_actions, cfg.temperature.initial, cfg.world.history
    )
    curr, records = classify_pools(bundle, policy, cfg)
    if cfg.log.difficulty and records:
        writer = _JsonlWriter(out / "difficulty.jsonl")
        thr = Thresholds(cfg.curriculum.easy_threshold, cfg.curriculum.min_samples)
        for rec in records:
            row = {
                "task_id": rec.task_id,
                "n_samples": rec.n_samples,
                "n_correct": rec.n_correct,
                "pass_at": {str(k): v for k, v in sorted(rec.pass_at.items())},
                "answer_verified": rec.answer_verified,
                "oracle_solvable": rec.oracle_solvable,
                "label": classify(rec, thr),
            }
            writer.write(row)
        writer.close()

    trainer = TrainerState(policy=policy, next_version=0, stage=curr.stage)
    store = SnapshotStore()
    buffer = DataBuffer(g, lag, capacity, cfg.train.drop_zero_variance)
    detector = PlateauDetector(cfg.curriculum.plateau_window, cfg.curriculum.plateau_epsilon)
    temp_schedule = (
        TempSchedule(cfg.temperature.initial, cfg.temperature.candidates)
        if cfg.temperature.enabled
        else None
    )

    metrics = _JsonlWriter(out / "metrics.jsonl") if cfg.log.metrics else None
    traj_log = _JsonlWriter(out / "trajectories.jsonl") if cfg.log.trajectories else None

    def make_tickets(step: int) -> list[Ticket]:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, step)))
        pool = curr.active_pool()
        out_tickets = []
        for j in range(g):
            task = bundle.by_id[pool[int(rng.integers(0, len(pool)))]]
            out_tickets.append(
                Ticket(
                    step=step,
                    slot=j,
                    task_id=task.task_id,
                    seed=np.random.SeedSequence(cfg.seed, spawn_key=(0, step, j)),
                    max_turns=_turns_for(cfg, task, step),
                )
            )
        return out_tickets

    def schedule(step: int) -> None:
        if step < cfg.train.steps:
            buffer.schedule_step(step, make_tickets(step))

    def roll_ticket(ticket: Ticket) -> None:
        snap = store.latest()
        pol = snap.rollout_policy(cfg.train.quantized_rollout)
        group = rollout_group(
            bundle.by_id[ticket.task_id],
            pol,
            cfg.train.k,
            snap.temperature,
            ticket.max_turns,
            ticket.seed,
            corrupt_rate=cfg.world.corrupt_rate,
            policy_version=snap.version,
        )
        buffer.resolve(ticket, group)

    worker_errors: list[BaseException] = []

    def worker_loop() -> None:
        while True:
            ticket = buffer.next_ticket()
            if ticket is None:
                return
            try:
                roll_ticket(ticket)
            except BaseException as exc:  # retried once; rollouts are deterministic
                try:
                    roll_ticket(ticket)
                except BaseException:
                    worker_errors.append(exc)
                    return

    store.publish(
        publish_snapshot(trainer, block_size=cfg.train.block_size, quantize=cfg.train.quantized_rollout)
    )
    buffer.set_version(0)
    for step in range(min(lag, cfg.train.steps - 1) + 1):
        schedule(step)

    workers: list[threading.Thread] = []
    if cfg.mode == "disaggregated_async":
        for _ in range(max(1, cfg.train.n_workers)):
            th = threading.Thread(target=worker_loop, daemon=True)
            th.start()
            workers.append(th)

    switch_step: int | None = None
    temp_decisions: list[dict] = []
    block_sum, block_n = 0.0, 0
    last_mean = 0.0

    try:
        for step in range(cfg.train.steps):
            if cfg.mode == "colocated_sync":
                while (ticket := buffer.try_next_ticket()) is not None:
                    roll_ticket(ticket)
            if worker_errors:
                raise RuntimeError("rollout worker failed") from worker_errors[0]
            res = buffer.collect_step(step, timeout=120.0)
            last_mean = res.mean_reward

            grad = np.zeros_like(policy.table)
            loss_sum = 0.0
            for group in res.groups:
                l, gvec = loss_and_gradient(
                    group, policy, cfg.train.loss_mode, normalize_std=cfg.train.normalize_std
                )
                loss_sum += l
                grad += gvec.reshape(policy.table.shape)
            n_used = len(res.groups)
            if n_used:
                policy.table -= cfg.train.lr * (grad / n_used)
            loss = loss_sum / n_used if n_used else 0.0

            if traj_log is not None:
                for group in res.groups:
                    for traj in group.trajectories:
                        traj_log.write(trajectory_to_dict(traj))

            block_sum += res.mean_reward
            block_n += 1
            if block_n == cfg.curriculum.plateau_every:
                detector.push(block_sum / block_n)
                block_sum, block_n = 0.0, 0

            if cfg.curriculum.enabled and curr.stage == 1:
                new_state = maybe_switch(curr, list(detector.history), detector, step=step)
                if new_state.stage != curr.stage:
                    curr = new_state
                    switch_step = step
                    detector.reset()
                    block_sum, block_n = 0.0, 0

            if (
                temp_schedule is not None
                and (step + 1) % cfg.temperature.every == 0
                and detector.fired()
            ):
                eval_seed = int(
                    np.random.SeedSequence(cfg.seed, spawn_key=(3, step)).generate_state(1)[0]
                )
                eval_pol = _eval_policy(policy, cfg)
                evaluate_temperatures(
                    temp_schedule,
                    eval_pol,
                    bundle.val,
                    n_per_task=cfg.temperature.n_per_task,
                    seed=eval_seed,
                )
                before = policy.temperature
                chosen = select_temperature(temp_schedule)
                temp_decisions.append(
                    {
                        "step": step,
                        "from": before,
                        "to": chosen,
                        "scores": {f"{t:g}": s for t, s in sorted(temp_schedule.eval_scores.items())},
                    }
                )
                policy.temperature = chosen
                detector.reset()
                block_sum, block_n = 0.0, 0

            if metrics is not None:
                row = {
                    "step": step,
                    "version": step,
                    "mean_reward": res.mean_reward,
                    "loss": loss,
                    "loss_mode": cfg.train.loss_mode,
                    "temperature": policy.temperature,
                    "stage": curr.stage,
                    "buffer_size": buffer.size(),
                    "max_staleness": res.max_staleness,
                }
                if cfg.log.param_hash:
                    row["params_sha1"] = hashlib.sha1(policy.table.tobytes()).hexdigest()
                metrics.write(row)

            trainer.stage = curr.stage
            snap = publish_snapshot(
                trainer, block_size=cfg.train.block_size, quantize=cfg.train.quantized_rollout
            )
            store.publish(snap)
            buffer.set_version(snap.version)
            schedule(step + 1 + lag)
    finally:
        buffer.close()
        for th in workers:
            th.join(timeout=30.0)
        if metrics is not None:
            metrics.close()
        if traj_log is not None:
            traj_log.close()

    if worker_errors:
        raise RuntimeError("rollout worker failed") from worker_errors[0]

    holdout_reward = None
    budget_accuracy = None
    if bundle.kind == "tool":
        holdout_reward = eval_mean_reward(
            policy,
            bundle.holdout,
            n_per_task=8,
            seed=np.random.SeedSequence(cfg.seed, spawn_key=(5,)),
        )
    else:
        budget_accuracy = turn_budget_sweep(
            bundle.holdout, policy, (1, 2, 4, 8), seed=cfg.seed, greedy=True
        )

    distill_info = None
    if cfg.distill.rounds > 0:
        distill_info = _run_distill(cfg, policy, bundle)
        if distill_info.get("policy") is not None:
            policy = distill_info.pop("policy")

    np.savez(
        out / "final_params.npz",
        table=policy.table,
        temperature=policy.temperature,
        history=policy.history,
        n_states=policy.n_states,
        n_actions=policy.n_actions,
        stage=curr.stage,
    )

    report = RunReport(
        mode=cfg.mode,
        steps=cfg.train.steps,
        final_version=trainer.next_version - 1,
        final_mean_reward=last_mean,
        switch_step=switch_step,
        temperature_decisions=temp_decisions,
        holdout_reward=holdout_reward,
        budget_accuracy={str(k): v for k, v in budget_accuracy.items()}
        if budget_accuracy
        else None,
        distill=distill_info,
        wall_time_s=time.monotonic() - t0,
        out_dir=str(out),
    )
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return report


def _eval_policy(policy: TabularPolicy, cfg: ExperimentConfig) -> TabularPolicy:
    """The policy as rollout workers would see it (quantized if enabled)."""
    if not cfg.train.quantized_rollout:
        return policy
    params = dequantize(quantize_blockwise(policy.flat(), cfg.train.block_size))
    return TabularPolicy(
        policy.n_states,
        policy.n_actions,
        policy.temperature,
        policy.history,
        params.reshape(policy.table.shape),
    )


def _run_distill(cfg: ExperimentConfig, policy: TabularPolicy, bundle: WorldBundle) -> dict:
    """Post-RL distillation rounds; reports the likelihood movement."""
    info: dict = {"rounds": []}
    current = policy
    for r in range(cfg.distill.rounds):
        pool = collect_distill_pool(
            current,
            bundle.train_pool,
            cfg.distill.threshold,
            k_per_task=cfg.distill.k_per_task,
            seed=cfg.seed + r,
        )
        if not pool:
            info["rounds"].append({"round": r, "pool": 0, "note": "empty pool; stopped"})
            break
        fresh = fit_to_pool(current, pool, epochs=cfg.distill.epochs, lr=cfg.distill.lr)
        before = pool_log_likelihood(TabularPolicy(
            current.n_states, current.n_actions, current.temperature, current.history
        ), pool)
        after = pool_log_likelihood(fresh, pool)
        info["rounds"].append(
            {"round": r, "pool": len(pool), "ll_before": before, "ll_after": after}
        )
        current = fresh
    info["policy"] = current
    return info
