"""Plateau detection and sampling-temperature selection.

The controller watches rollout rewards; once they stabilize it
re-evaluates a ladder of candidate temperatures on a held-out set and
moves to the hottest one whose validation score stays within 1% of the
best — trading no measurable quality for extra exploration.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

__all__ = [
    "plateau",
    "PlateauDetector",
    "TempSchedule",
    "MissingScores",
    "select_temperature",
]


class MissingScores(ValueError):
    """Raised when selection runs before every candidate has a score."""


def plateau(history: Sequence[float], window: int, epsilon: float) -> bool:
    """True iff the window is full and its reward range is below epsilon.

    Shift-invariant by construction: only max − min matters.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(history) < window:
        return False
    tail = list(history)[-window:]
    return (max(tail) - min(tail)) < epsilon


@dataclass
class PlateauDetector:
    """Ring of recent mean rewards with a range-based convergence test."""

    window_size: int = 20
    epsilon: float = 0.005
    history: deque = field(default_factory=deque, repr=False)

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        self.history = deque(self.history, maxlen=self.window_size)

    def push(self, mean_reward: float) -> None:
        self.history.append(float(mean_reward))

    def fired(self) -> bool:
        return plateau(self.history, self.window_size, self.epsilon)

    def reset(self) -> None:
        self.history.clear()


@dataclass
class TempSchedule:
    """Current temperature, the candidate ladder, and their eval scores."""

    current: float
    candidates: tuple[float, ...]
    eval_scores: dict[float, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.candidates = tuple(float(t) for t in self.candidates)
        if not self.candidates:
            raise ValueError("need at least one candidate temperature")
        if any(t <= 0.0 for t in self.candidates):
            raise ValueError("temperatures must be positive")
        if any(b <= a for a, b in zip(self.candidates, self.candidates[1:])):
            raise ValueError("candidates must be strictly increasing")
        if self.current not in self.candidates:
            raise ValueError("current temperature must be one of the candidates")


def select_temperature(schedule: TempSchedule) -> float:
    """Pick the largest candidate within 1% of the best validation score.

    Ties at the cutoff go to the hotter temperature.  Updates
    ``schedule.current`` and returns the choice.
    """
    missing = [t for t in schedule.candidates if t not in schedule.eval_scores]
    if missing:
        raise MissingScores(f"no eval score for candidates: {missing}")
    best = max(schedule.eval_scores[t] for t in schedule.candidates)
    cutoff = 0.99 * best
    passing = [t for t in schedule.candidates if schedule.eval_scores[t] >= cutoff]
    if passing:
        chosen = max(passing)
    else:
        # Negative scores make the literal 1%-of-best rule vacuous; the
        # argmax temperature is the only sensible answer there.
        chosen = max(t for t in schedule.candidates if schedule.eval_scores[t] == best)
    schedule.current = chosen
    return chosen
