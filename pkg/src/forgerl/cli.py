"""``forge`` — run experiments and poke at their artifacts.

Subcommands: ``run``, ``gen-tasks``, ``codec render|parse``, ``eval-temp``,
``replay``, ``report``.  Config parsing is strict — an unknown key exits
with code 2 and names the key, so a typo can't silently change a run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import signal
import sys

import numpy as np

from .codec import FormatError, ToolSchema, message_from_dict, message_to_dict, parse, render
from .config import ConfigError, ExperimentConfig, load_config
from .rewards import TaskJudgment, trajectory_reward
from .temperature import TempSchedule, select_temperature
from .trajectory import trajectory_from_dict
from .worlds import (
    TabularPolicy,
    evaluate_temperatures,
    gen_search_tasks,
    gen_tool_tasks,
    task_to_dict,
)

METRIC_COLUMNS = (
    "step",
    "version",
    "mean_reward",
    "loss",
    "loss_mode",
    "temperature",
    "stage",
    "buffer_size",
    "max_staleness",
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a full experiment from a config file")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--mode", choices=("colocated_sync", "disaggregated_async"), default=None)
    run_p.add_argument("--loss-mode", choices=("token_weighted", "sequence_mean"), default=None)
    run_p.add_argument("--max-lag", type=int, default=None)
    run_p.add_argument("--out", default=None)

    gen_p = sub.add_parser("gen-tasks", help="write a task set as JSON lines")
    gen_p.add_argument("--world", choices=("tool", "search"), required=True)
    gen_p.add_argument("--n", type=int, required=True)
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.add_argument("--kind", choices=("moderate", "extreme", "mixed"), default="mixed",
                       help="tool world only: difficulty mix")
    gen_p.add_argument("--out", default="-", help="output path, or - for stdout")

    codec_p = sub.add_parser("codec", help="render or parse template text")
    codec_p.add_argument("direction", choices=("render", "parse"))
    codec_p.add_argument("file", nargs="?", default="-",
                         help="input path, or - for stdin (default)")

    temp_p = sub.add_parser("eval-temp", help="score temperature candidates on the validation set")
    temp_p.add_argument("config")
    temp_p.add_argument("--params", default=None, help="final_params.npz of a finished run")

    replay_p = sub.add_parser("replay", help="re-score a trajectory log; exit 1 on any mismatch")
    replay_p.add_argument("file")

    report_p = sub.add_parser("report", help="flatten a metrics log to CSV on stdout")
    report_p.add_argument("file")
    return p


def _load_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates: dict = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.mode is not None:
        updates["mode"] = args.mode
    if args.out is not None:
        updates["out_dir"] = args.out
    train_updates: dict = {}
    if args.loss_mode is not None:
        train_updates["loss_mode"] = args.loss_mode
    if args.max_lag is not None:
        train_updates["max_lag"] = args.max_lag
    if train_updates:
        updates["train"] = dataclasses.replace(cfg.train, **train_updates)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
        cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    from .orchestrator import run

    cfg = _load_with_overrides(args)
    report = run(cfg)
    print(f"mode={report.mode} steps={report.steps} final_version={report.final_version}")
    print(f"final_mean_reward={report.final_mean_reward:.4f}")
    if report.switch_step is not None:
        print(f"stage2_switch_step={report.switch_step}")
    if report.holdout_reward is not None:
        print(f"holdout_reward={report.holdout_reward:.4f}")
    if report.budget_accuracy is not None:
        pairs = " ".join(f"{k}:{v:.3f}" for k, v in sorted(report.budget_accuracy.items(), key=lambda kv: int(kv[0])))
        print(f"budget_accuracy {pairs}")
    print(f"artifacts in {report.out_dir}")
    return 0


def _cmd_gen_tasks(args) -> int:
    if args.n < 1:
        print("forge gen-tasks: --n must be >= 1", file=sys.stderr)
        return 1
    if args.world == "tool":
        tasks = gen_tool_tasks(args.n, args.seed, args.kind)
    else:
        tasks = gen_search_tasks(args.n, args.seed)
    out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8")
    try:
        for t in tasks:
            out.write(json.dumps(task_to_dict(t), separators=(",", ":")) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _read_input(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _cmd_codec(args) -> int:
    text = _read_input(args.file)
    if args.direction == "render":
        obj = json.loads(text)
        messages = tuple(message_from_dict(m) for m in obj["messages"])
        tools = tuple(ToolSchema(**t) for t in obj.get("tools", ()))
        sys.stdout.write(render(messages, tools))
        return 0
    try:
        messages, tools = parse(text)
    except FormatError as exc:
        print(f"parse error at byte {exc.offset}: {exc}", file=sys.stderr)
        return 1
    obj = {
        "tools": [
            {"name": t.name, "description": t.description, "parameters": t.parameters}
            for t in tools
        ],
        "messages": [message_to_dict(m) for m in messages],
    }
    json.dump(obj, sys.stdout, indent=2, ensure_ascii=False)
    sys.stdout.write("\n")
    return 0


def _cmd_eval_temp(args) -> int:
    from .orchestrator import build_world

    cfg = load_config(args.config)
    bundle = build_world(cfg)
    if args.params:
        d = np.load(args.params)
        policy = TabularPolicy(
            int(d["n_states"]), int(d["n_actions"]), float(d["temperature"]),
            int(d["history"]), d["table"],
        )
    else:
        policy = TabularPolicy(
            cfg.world.n_states, bundle.n_actions, cfg.temperature.initial, cfg.world.history
        )
    schedule = TempSchedule(cfg.temperature.initial, cfg.temperature.candidates)
    evaluate_temperatures(
        schedule, policy, bundle.val, n_per_task=cfg.temperature.n_per_task, seed=cfg.seed
    )
    for t in schedule.candidates:
        print(f"T={t:g}: score={schedule.eval_scores[t]:.4f}")
    print(f"selected T={select_temperature(schedule):g}")
    return 0


def _replay_one(rec: dict) -> list[str]:
    """Re-derive one stored trajectory's calls and reward; list mismatches."""
    problems = []
    traj = trajectory_from_dict(rec)
    for i, step in enumerate(traj.steps):
        try:
            msgs, _ = parse(step.raw)
            calls = [c for m in msgs for c in m.tool_calls()]
            call = calls[0] if len(msgs) == 1 and len(calls) == 1 else None
        except FormatError:
            call = None
        if call != step.call:
            problems.append(f"step {i}: stored call differs from re-parsed raw")
    none_at = [i for i, s in enumerate(traj.steps) if s.call is None]
    if none_at:
        if not traj.halted:
            problems.append("has an unparsable step but is not marked halted")
        if none_at[0] != len(traj.steps) - 1:
            problems.append("unparsable step is not the truncation point")
        if traj.reward != 0.0:
            problems.append(f"halted trajectory carries reward {traj.reward}")
    else:
        judgment = traj.judgment or TaskJudgment(completed=False)
        expect = float(trajectory_reward(traj.task_id, traj, judgment))
        if expect != traj.reward:
            problems.append(f"stored reward {traj.reward} != recomputed {expect}")
    return problems


def _cmd_replay(args) -> int:
    n, bad = 0, 0
    with open(args.file, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            n += 1
            problems = _replay_one(json.loads(line))
            if problems:
                bad += 1
                for msg in problems:
                    print(f"trajectory {n}: {msg}", file=sys.stderr)
    print(f"replayed {n} trajectories, {bad} mismatched")
    return 1 if bad else 0


def _cmd_report(args) -> int:
    import csv

    writer = csv.writer(sys.stdout)
    writer.writerow(METRIC_COLUMNS)
    with open(args.file, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            writer.writerow([row.get(col, "") for col in METRIC_COLUMNS])
    return 0


def main(argv=None) -> int:
    if hasattr(signal, "SIGPIPE"):
        signal.signal(signal.SIGPIPE, signal.SIG_DFL)
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-tasks":
            return _cmd_gen_tasks(args)
        if args.command == "codec":
            return _cmd_codec(args)
        if args.command == "eval-temp":
            return _cmd_eval_temp(args)
        if args.command == "replay":
            return _cmd_replay(args)
        if args.command == "report":
            return _cmd_report(args)
    except ConfigError as exc:
        print(f"forge: bad config: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
