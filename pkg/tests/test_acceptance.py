"""End-to-end checks of the headline behaviors, one summary line each.

These are the slow integration runs: multi-seed training races, curriculum
staging, sync/async equivalence, and distillation.  Each test prints a
single ``[tag] PASS/FAIL — detail`` line (run with ``-s`` to see them all;
a failing test shows its line in the captured output) and enforces its own
wall-clock budget.  Edge cases live in the sibling unit modules; nothing
here re-tests them.
"""

import random
import time

import numpy as np

from forgerl.codec import Message, Segment, ToolCall, escape_overhead, parse, render
from forgerl.config import ExperimentConfig
from forgerl.grpo import group_advantages, loss_and_gradient, mask_model_tokens
from forgerl.orchestrator import (
    TrainerState,
    build_world,
    collect_distill_pool,
    distill_round,
    eval_mean_reward,
    pool_log_likelihood,
    publish_snapshot,
    run,
)
from forgerl.quant import dequantize, quantize_blockwise
from forgerl.rewards import apply_format_penalty, step_reward
from forgerl.temperature import TempSchedule, select_temperature
from forgerl.worlds import TabularPolicy, gen_tool_tasks
from forgerl.worlds.rollout import rollout_group

from helpers import code_argument_corpus, make_conversation
from test_codec import FIXTURE, weather_conversation
from test_grpo import make_group, make_policy
from test_orchestrator import read_metrics
from test_rewards import ALL_CASES, _call, _make_trace


def check(tag: str, ok: bool, detail: str) -> None:
    print(f"[{tag}] {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"{tag}: {detail}"


# ── 1. codec: byte-exact template, total round-trips, escape-free code ────


def test_codec_byte_exact_round_trips_and_escape_free_code():
    t0 = time.perf_counter()
    messages, tools = weather_conversation()
    text = render(messages, tools)
    fixture_ok = text == FIXTURE.read_text().rstrip("\n")
    parsed = parse(text)
    fixture_ok = fixture_ok and parsed == (messages, tools)

    trips = 0
    for seed in range(500):
        m, t = make_conversation(random.Random(seed))
        wire = render(m, t)
        pm, pt = parse(wire)
        if pm == m and pt == t and render(pm, pt) == wire:
            trips += 1

    template_escapes = 0
    json_escapes = 0
    verbatim = True
    snippets = code_argument_corpus()
    for code in snippets:
        call = ToolCall("run_code", (("code", code),))
        overhead = escape_overhead(call)
        template_escapes += overhead.template_escapes
        json_escapes += overhead.json_escapes
        back, _ = parse(render([Message("assistant", (Segment.tool_call(call),))]))
        verbatim = verbatim and back[0].tool_calls()[0].args_dict()["code"] == code

    dt = time.perf_counter() - t0
    ok = (
        fixture_ok
        and trips == 500
        and verbatim
        and template_escapes == 0
        and json_escapes / len(snippets) >= 2.0
        and dt < 5.0
    )
    check(
        "codec exactness",
        ok,
        f"fixture byte-exact={fixture_ok}; round-trips {trips}/500; "
        f"code corpus: 0 template escapes vs {json_escapes / len(snippets):.2f} "
        f"JSON escapes/snippet; {dt:.2f}s",
    )


# ── 2. group-relative advantages and both loss modes ──────────────────────


def test_grpo_zero_sum_gradients_and_mode_equivalence():
    t0 = time.perf_counter()

    rng = np.random.default_rng(2024)
    worst_sum = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 17))
        rewards = rng.choice([0.0, 1.0, float(rng.normal())], size=k)
        for normalize in (False, True):
            adv = group_advantages(rewards, normalize_std=normalize)
            worst_sum = max(worst_sum, abs(float(adv.sum())))

    # central finite differences on every visited row plus three untouched
    h = 1e-5
    worst_rel = 0.0
    informative = 0
    for seed in range(100):
        group, pol = make_group(seed=seed, n_states=96)
        if len(set(group.rewards)) < 2:
            for mode in ("token_weighted", "sequence_mean"):
                _, grad = loss_and_gradient(group, pol, mode)
                assert np.all(grad == 0.0)
            continue
        informative += 1
        rows = sorted(
            {
                int(s)
                for traj in group.trajectories
                for s in pol.context_states(np.asarray(traj.tokens, dtype=np.int64))
            }
        ) + [0, 1, 2]
        for mode in ("token_weighted", "sequence_mean"):
            _, grad = loss_and_gradient(group, pol, mode)
            grad = grad.reshape(pol.table.shape)
            fd = np.zeros_like(pol.table)
            for s in rows:
                for a in range(pol.n_actions):
                    pol.table[s, a] += h
                    up, _ = loss_and_gradient(group, pol, mode)
                    pol.table[s, a] -= 2 * h
                    dn, _ = loss_and_gradient(group, pol, mode)
                    pol.table[s, a] += h
                    fd[s, a] = (up - dn) / (2 * h)
            sl = np.array(rows)
            rel = np.linalg.norm(fd[sl] - grad[sl]) / np.linalg.norm(fd[sl])
            worst_rel = max(worst_rel, float(rel))

    # single-call tasks give equal masked lengths: the modes must coincide
    task = gen_tool_tasks(10, seed=3, kind="moderate", moderate_lengths=(1,))[0]
    worst_mode_gap = 0.0
    compared = 0
    for seed in range(50):
        pol = make_policy(seed=seed)
        group = rollout_group(task, pol, 8, 1.0, 2, seed)
        if len(set(group.rewards)) < 2:
            continue
        assert {int(mask_model_tokens(t).sum()) for t in group.trajectories} == {1}
        compared += 1
        l_tw, g_tw = loss_and_gradient(group, pol, "token_weighted")
        l_sm, g_sm = loss_and_gradient(group, pol, "sequence_mean")
        worst_mode_gap = max(
            worst_mode_gap, abs(l_tw - l_sm), float(np.abs(g_tw - g_sm).max())
        )

    dt = time.perf_counter() - t0
    ok = (
        worst_sum <= 1e-12
        and informative >= 50
        and worst_rel < 1e-4
        and compared >= 10
        and worst_mode_gap <= 1e-12
        and dt < 30.0
    )
    check(
        "grpo math",
        ok,
        f"|Σadv| ≤ {worst_sum:.1e} on 1000 groups; grad-vs-FD rel err "
        f"{worst_rel:.1e} over {informative} informative seeds (both modes); "
        f"equal-length mode gap {worst_mode_gap:.1e} on {compared} groups; {dt:.1f}s",
    )


# ── 3. two-stage curriculum beats the static-moderate baseline ─────────────


def _staged_cfg(seed, out_dir, enabled):
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    cfg.world.kind = "tool"
    cfg.world.n_states = 1024
    cfg.world.moderate_tasks = 24
    cfg.world.extreme_tasks = 24
    cfg.world.holdout_tasks = 12
    cfg.world.val_tasks = 6
    cfg.world.task_seed = 11
    cfg.train.steps = 600
    cfg.train.k = 8
    cfg.train.groups_per_step = 8
    cfg.train.lr = 1.5
    cfg.curriculum.enabled = enabled
    cfg.curriculum.classify = True  # both arms probe; only one may switch
    cfg.curriculum.n_probe = 32
    cfg.curriculum.plateau_window = 3
    cfg.curriculum.plateau_epsilon = 0.08
    cfg.curriculum.plateau_every = 5
    cfg.log.metrics = False
    cfg.log.difficulty = False
    return cfg.validate()


def test_curriculum_beats_static_baseline_on_held_out_hard_tasks(tmp_path):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        staged = run(_staged_cfg(seed, tmp_path / f"curr{seed}", True))
        static = run(_staged_cfg(seed, tmp_path / f"stat{seed}", False))
        win = (
            staged.switch_step is not None
            and staged.holdout_reward > static.holdout_reward
        )
        wins += win
        rows.append(
            f"s{seed} {staged.holdout_reward:.3f}>{static.holdout_reward:.3f}"
            f"@{staged.switch_step}"
        )
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt < 600.0
    check("curriculum", ok, f"wins {wins}/5 ({', '.join(rows)}); {dt:.0f}s")


# ── 4. token_weighted reaches reward 0.8 before sequence_mean ──────────────


def _race_cfg(seed, out_dir, loss_mode):
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    cfg.world.kind = "tool"
    cfg.world.n_states = 1024
    cfg.world.moderate_tasks = 36
    cfg.world.extreme_tasks = 0
    cfg.world.holdout_tasks = 4
    cfg.world.val_tasks = 4
    cfg.world.task_seed = 21
    cfg.world.moderate_lengths = (1, 2, 3, 4, 5, 6)  # mixed lengths: the point
    cfg.train.steps = 2000
    cfg.train.k = 8
    cfg.train.groups_per_step = 8
    cfg.train.lr = 0.6
    cfg.train.loss_mode = loss_mode
    cfg.train.quantized_rollout = False  # keep the arms' dynamics independent
    cfg.curriculum.enabled = False
    cfg.curriculum.classify = False
    cfg.log.difficulty = False
    return cfg.validate()


def _first_step_at(rewards, target=0.8, window=50):
    """First step whose trailing-window mean reward reaches the target."""
    if len(rewards) < window:
        return None
    smooth = np.convolve(rewards, np.ones(window) / window, mode="valid")
    hit = smooth >= target
    return int(np.argmax(hit)) + window - 1 if hit.any() else None


def test_token_weighted_loss_reaches_target_reward_sooner(tmp_path):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        crossings = {}
        for mode in ("token_weighted", "sequence_mean"):
            cfg = _race_cfg(seed, tmp_path / f"{mode}{seed}", mode)
            run(cfg)
            rewards = [r["mean_reward"] for r in read_metrics(cfg.out_dir)]
            crossings[mode] = _first_step_at(rewards)
        tw, sm = crossings["token_weighted"], crossings["sequence_mean"]
        win = tw is not None and (sm is None or tw < sm)
        wins += win
        rows.append(f"s{seed} {tw}<{sm}")
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt < 600.0
    check("loss-mode race", ok, f"wins {wins}/5 (steps to 0.8: {', '.join(rows)}); {dt:.0f}s")


# ── 5. more revision turns, more search accuracy ────────────────────────────


def _search_cfg(seed, out_dir):
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    cfg.world.kind = "search"
    cfg.world.n_states = 4096
    cfg.world.moderate_tasks = 24
    cfg.world.extreme_tasks = 0
    cfg.world.holdout_tasks = 12
    cfg.world.val_tasks = 6
    cfg.world.task_seed = 11
    cfg.train.steps = 1200
    cfg.train.k = 8
    cfg.train.groups_per_step = 8
    cfg.train.lr = 4.0
    cfg.curriculum.enabled = False
    cfg.curriculum.classify = False
    cfg.log.metrics = False
    cfg.log.difficulty = False
    return cfg.validate()


def test_search_accuracy_scales_with_turn_budget(tmp_path):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        report = run(_search_cfg(seed, tmp_path / f"sweep{seed}"))
        acc = [report.budget_accuracy[k] for k in ("1", "2", "4", "8")]
        nondecreasing = all(b >= a for a, b in zip(acc, acc[1:]))
        gap = acc[-1] - acc[0]
        win = nondecreasing and gap >= 0.2
        wins += win
        rows.append(f"s{seed} {acc[0]:.2f}→{acc[-1]:.2f}")
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt < 600.0
    check("turn scaling", ok, f"wins {wins}/5 ({', '.join(rows)}); {dt:.0f}s")


# ── 6. temperature selection agrees with an exhaustive scan ────────────────


def test_temperature_selection_matches_exhaustive_scan():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    agree = 0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        ladder = tuple(np.round(np.cumsum(rng.uniform(0.05, 0.5, n)) + 0.1, 4))
        scores = {t: float(rng.uniform(0, 1)) for t in ladder}
        schedule = TempSchedule(
            current=ladder[0], candidates=ladder, eval_scores=dict(scores)
        )
        chosen = select_temperature(schedule)

        best = max(scores.values())
        passing = [t for t in ladder if scores[t] >= 0.99 * best]
        if chosen == max(passing) and scores[chosen] >= 0.99 * best:
            agree += 1
    dt = time.perf_counter() - t0
    ok = agree == 100 and dt < 1.0
    check(
        "temperature",
        ok,
        f"{agree}/100 tables: hottest candidate within 1% of scan optimum; {dt:.2f}s",
    )


# ── 7. async training: zero lag is exact, bounded lag stays bounded ────────


def _trace_cfg(seed, out_dir, **kw):
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    cfg.world.kind = "tool"
    cfg.world.n_states = 256
    cfg.world.moderate_tasks = 8
    cfg.world.extreme_tasks = 0
    cfg.world.holdout_tasks = 2
    cfg.world.val_tasks = 2
    cfg.world.moderate_lengths = (1, 2)
    cfg.train.steps = 500
    cfg.train.k = 4
    cfg.train.groups_per_step = 4
    cfg.train.lr = 0.2
    cfg.curriculum.enabled = False
    cfg.curriculum.classify = False
    cfg.log.param_hash = True  # per-step parameter digest in every row
    cfg.log.difficulty = False
    for key, value in kw.items():
        node = cfg
        *heads, leaf = key.split("__")
        for h in heads:
            node = getattr(node, h)
        setattr(node, leaf, value)
    return cfg.validate()


def test_async_zero_lag_is_bit_identical_and_staleness_is_bounded(tmp_path):
    t0 = time.perf_counter()

    sync_cfg = _trace_cfg(5, tmp_path / "sync")
    run(sync_cfg)
    async_cfg = _trace_cfg(
        5,
        tmp_path / "async",
        mode="disaggregated_async",
        train__max_lag=0,
        train__n_workers=3,
    )
    report = run(async_cfg)
    trace_equal = (
        (tmp_path / "sync" / "metrics.jsonl").read_bytes()
        == (tmp_path / "async" / "metrics.jsonl").read_bytes()
    )
    params_equal = np.array_equal(
        np.load(tmp_path / "sync" / "final_params.npz")["table"],
        np.load(tmp_path / "async" / "final_params.npz")["table"],
    )
    steps_ok = report.final_version == 500

    bounds = {}
    for lag in (1, 4):
        cfg = _trace_cfg(
            5,
            tmp_path / f"lag{lag}",
            mode="disaggregated_async",
            train__max_lag=lag,
            train__n_workers=8,
            train__groups_per_step=2,
            train__steps=150,
        )
        run(cfg)
        staleness = [r["max_staleness"] for r in read_metrics(cfg.out_dir)]
        bounds[lag] = max(staleness)

    rng = np.random.default_rng(0)
    x = rng.normal(0.0, 3.0, 10_000 * 64) * 10.0 ** rng.uniform(-3, 3, 10_000 * 64)
    q1 = quantize_blockwise(x, 64)
    once = dequantize(q1)
    q2 = quantize_blockwise(once, 64)
    idempotent = (
        np.array_equal(q1.scales, q2.scales)
        and np.array_equal(q1.codes, q2.codes)
        and np.array_equal(once, dequantize(q2))
    )

    trainer = TrainerState(
        policy=TabularPolicy(64, 8, history=1, table=rng.normal(size=(64, 8)))
    )
    before = trainer.policy.table.tobytes()
    publish_snapshot(trainer, block_size=16, quantize=True)
    trainer_untouched = (
        trainer.policy.table.tobytes() == before and trainer.policy.table.flags.writeable
    )

    dt = time.perf_counter() - t0
    ok = (
        trace_equal
        and params_equal
        and steps_ok
        and all(bounds[lag] <= lag for lag in bounds)
        and idempotent
        and trainer_untouched
        and dt < 120.0
    )
    check(
        "async equivalence",
        ok,
        f"zero-lag trace bit-identical={trace_equal and params_equal} over 500 steps; "
        f"staleness max {bounds[1]}≤1, {bounds[4]}≤4; quantizer idempotent on 10k "
        f"blocks={idempotent}; publish leaves trainer untouched={trainer_untouched}; {dt:.0f}s",
    )


# ── 8. step-reward truth table and the format-penalty gate ─────────────────


def test_step_reward_truth_table_and_format_halting():
    t0 = time.perf_counter()
    assert len(ALL_CASES) == 30
    hits = sum(
        1 for _, call, gold, expected in ALL_CASES if step_reward(call, gold) == expected
    )

    broken = _make_trace([_call(0), None, _call(2)])
    cut = apply_format_penalty(broken)
    halts = (
        cut.halted
        and cut.reward == 0.0
        and len(cut.steps) == 2  # malformed step kept, later steps dropped
        and cut.steps[-1].call is None
        and cut.messages == broken.messages[: cut.steps[-1].message_index + 1]
    )
    clean = _make_trace([_call(0), _call(1)])
    halts = halts and apply_format_penalty(clean) is clean
    halts = halts and apply_format_penalty(cut) == cut

    dt = time.perf_counter() - t0
    ok = hits == 30 and halts and dt < 1.0
    check(
        "rewards",
        ok,
        f"truth table {hits}/30; malformed step halts scoring and clean traces "
        f"pass through={halts}; {dt:.2f}s",
    )


# ── 9. one distillation round: likelihood up, held-out reward kept ─────────


def _teacher_cfg(seed, out_dir):
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    cfg.world.kind = "tool"
    cfg.world.n_states = 1024
    cfg.world.moderate_tasks = 24
    cfg.world.extreme_tasks = 0
    cfg.world.holdout_tasks = 2
    cfg.world.val_tasks = 2
    cfg.world.task_seed = 11
    cfg.world.moderate_lengths = (1, 2)
    cfg.train.steps = 120
    cfg.train.k = 8
    cfg.train.groups_per_step = 8
    cfg.train.lr = 1.5
    cfg.curriculum.enabled = False
    cfg.curriculum.classify = False
    cfg.log.metrics = False
    cfg.log.difficulty = False
    return cfg.validate()


def test_distillation_raises_likelihood_without_losing_reward(tmp_path):
    t0 = time.perf_counter()
    held_out = gen_tool_tasks(16, seed=99, kind="moderate", id_prefix="held")
    wins, rows = 0, []
    for seed in range(5):
        cfg = _teacher_cfg(seed, tmp_path / f"teacher{seed}")
        run(cfg)
        loaded = np.load(tmp_path / f"teacher{seed}" / "final_params.npz")
        teacher = TabularPolicy(
            int(loaded["n_states"]),
            int(loaded["n_actions"]),
            float(loaded["temperature"]),
            int(loaded["history"]),
            loaded["table"],
        )
        train_pool = build_world(cfg).train_pool

        student = distill_round(
            teacher, train_pool, 1.0, k_per_task=8, epochs=300, lr=1.0, seed=seed
        )
        # same seed, same pool: measure the likelihood the fit started from
        pool = collect_distill_pool(teacher, train_pool, 1.0, k_per_task=8, seed=seed)
        blank = TabularPolicy(
            teacher.n_states, teacher.n_actions, teacher.temperature, teacher.history
        )
        ll_before = pool_log_likelihood(blank, pool)
        ll_after = pool_log_likelihood(student, pool)

        before = eval_mean_reward(teacher, held_out, n_per_task=8, seed=1000 + seed)
        after = eval_mean_reward(student, held_out, n_per_task=8, seed=1000 + seed)
        win = ll_after > ll_before and after >= before
        wins += win
        rows.append(f"s{seed} ll {ll_before:.2f}→{ll_after:.2f}, reward {before:.2f}→{after:.2f}")
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt < 300.0
    check("distillation", ok, f"wins {wins}/5 ({'; '.join(rows)}); {dt:.0f}s")
