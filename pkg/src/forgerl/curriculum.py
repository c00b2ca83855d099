"""Difficulty estimation and the two-stage curriculum switch.

Tasks are bucketed by an unbiased pass@k estimate.  "Extreme" means the
policy solved none of n samples (estimated pass@8 = 0) while the task is
still known to be solvable — at desk scale that solvability evidence is
an oracle bit on the task rather than a 512-sample estimate — and its
answer is verified.  Training starts on the moderate pool and switches,
once and permanently, to the extreme pool when rewards plateau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .temperature import PlateauDetector, plateau

__all__ = [
    "TOO_EASY",
    "MODERATE",
    "EXTREME",
    "UNUSABLE",
    "DomainError",
    "InsufficientSamples",
    "pass_at_k",
    "DifficultyRecord",
    "Thresholds",
    "classify",
    "CurriculumState",
    "maybe_switch",
]

TOO_EASY = "too_easy"
MODERATE = "moderate"
EXTREME = "extreme"
UNUSABLE = "unusable"


class DomainError(ValueError):
    """Raised for pass@k arguments outside 0 <= c <= n, 1 <= k <= n."""


class InsufficientSamples(ValueError):
    """Raised when a record has too few samples to classify."""


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 − C(n−c, k)/C(n, k), computed in log space.

    Probability that at least one of k draws (without replacement from
    the n samples) is correct, given c of them were.
    """
    if not (0 <= c <= n) or not (1 <= k <= n):
        raise DomainError(f"pass@k domain violated: n={n}, c={c}, k={k}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    log_miss = 0.0
    for i in range(k):
        log_miss += math.log(n - c - i) - math.log(n - i)
    return 1.0 - math.exp(log_miss)


@dataclass(frozen=True)
class DifficultyRecord:
    """Sampling outcome for one task, plus verification bits.

    ``oracle_solvable`` stands in for "pass@512 > 0" at desk scale: the
    environment knows whether a solving action sequence exists, so large
    -k solvability does not need 512 samples.
    """

    task_id: str
    n_samples: int
    n_correct: int
    pass_at: Mapping[int, float]
    answer_verified: bool
    oracle_solvable: bool = False

    def __post_init__(self) -> None:
        if not (0 <= self.n_correct <= self.n_samples):
            raise ValueError("need 0 <= n_correct <= n_samples")
        prev = -1.0
        for k in sorted(self.pass_at):
            v = self.pass_at[k]
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"pass@{k} outside [0, 1]")
            if v < prev - 1e-12:
                raise ValueError("pass@k must be nondecreasing in k")
            prev = v


@dataclass(frozen=True)
class Thresholds:
    easy: float = 0.9
    min_samples: int = 8


def classify(record: DifficultyRecord, thresholds: Thresholds = Thresholds()) -> str:
    """Bucket a task as too_easy / moderate / extreme / unusable."""
    if record.n_samples < thresholds.min_samples:
        raise InsufficientSamples(
            f"{record.task_id}: {record.n_samples} samples < {thresholds.min_samples}"
        )
    if not record.answer_verified:
        return UNUSABLE
    p8 = record.pass_at.get(8)
    if p8 is None:
        p8 = pass_at_k(record.n_samples, record.n_correct, 8)
    if 512 in record.pass_at:
        solvable = record.pass_at[512] > 0.0
    else:
        solvable = record.oracle_solvable
    if p8 == 0.0 and solvable:
        return EXTREME
    if p8 > thresholds.easy:
        return TOO_EASY
    return MODERATE


@dataclass(frozen=True)
class CurriculumState:
    """Which pool is live.  The stage-two switch is one-way."""

    stage: int = 1
    stage1_pool: tuple[str, ...] = ()
    stage2_pool: tuple[str, ...] = ()
    switch_step: int | None = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        overlap = set(self.stage1_pool) & set(self.stage2_pool)
        if overlap:
            raise ValueError(f"pools must be disjoint, shared: {sorted(overlap)}")

    def active_pool(self) -> tuple[str, ...]:
        return self.stage1_pool if self.stage == 1 else self.stage2_pool


def maybe_switch(
    state: CurriculumState,
    reward_history: Sequence[float],
    detector: PlateauDetector,
    step: int | None = None,
) -> CurriculumState:
    """Move to stage two when stage-one rewards plateau.

    No-op if already in stage two or the stage-two pool is empty; the
    detector's window/epsilon decide what counts as a plateau.
    """
    if state.stage == 2:
        return state
    if not state.stage2_pool:
        return state
    if not plateau(reward_history, detector.window_size, detector.epsilon):
        return state
    return replace(state, stage=2, switch_step=step)
