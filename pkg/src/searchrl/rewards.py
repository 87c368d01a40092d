"""Step-wise reward components and their composite.

Three channels are computed for every search step plus the terminal
answering step:

* base = format + outcome: the format reward is 0 / -0.05 for valid /
  invalid search steps and +0.1 / -0.5 at the terminal step; the outcome
  reward is exact match of the final answer, paid only at the terminal
  step.
* efficiency: classifies each search step against the capability depth
  t_c (earliest step whose intermediate answer exactly matches a gold
  alias, -1 when none). Steps in a never-correct trajectory earn a small
  under-search bonus, steps up to t_c earn 0.4/(t_c+eps) - 0.05, and
  steps past t_c pay the over-search penalty.
* quality: the gain of the step's intermediate-answer F1 over the best
  F1 of all earlier steps (empty prefix counts as 0); the raw difference
  is kept, negatives included, unless clipping is switched on.

The cumulative-reward curve of an idealized trajectory stopping at depth
d peaks exactly at d = t_c, which is what drives policies toward the
minimal sufficient search depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .metrics import exact_match, token_f1
from .trajectory import QuestionRecord, StepRewards, Trajectory, with_scores

ABLATABLE_COMPONENTS = ("base", "efficiency", "quality")


@dataclass(frozen=True)
class RewardConstants:
    """Reward magnitudes; defaults are the published values."""

    format_valid_mid: float = 0.0
    format_invalid_mid: float = -0.05
    format_valid_terminal: float = 0.1
    format_invalid_terminal: float = -0.5
    undersearch: float = 0.025
    efficiency_numerator: float = 0.4
    efficiency_offset: float = -0.05
    oversearch_penalty: float = -0.1
    epsilon: float = 1e-6
    clip_quality: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        for name in (
            "format_valid_mid",
            "format_invalid_mid",
            "format_valid_terminal",
            "format_invalid_terminal",
            "undersearch",
            "efficiency_numerator",
            "efficiency_offset",
            "oversearch_penalty",
            "epsilon",
        ):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_dict(self) -> dict:
        return {
            "format_valid_mid": self.format_valid_mid,
            "format_invalid_mid": self.format_invalid_mid,
            "format_valid_terminal": self.format_valid_terminal,
            "format_invalid_terminal": self.format_invalid_terminal,
            "undersearch": self.undersearch,
            "efficiency_numerator": self.efficiency_numerator,
            "efficiency_offset": self.efficiency_offset,
            "oversearch_penalty": self.oversearch_penalty,
            "epsilon": self.epsilon,
            "clip_quality": self.clip_quality,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RewardConstants":
        return replace(cls(), **obj)


DEFAULT_CONSTANTS = RewardConstants()


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-step component lists: search steps 1..S, then the terminal step."""

    format: tuple[float, ...]
    outcome: tuple[float, ...]
    efficiency: tuple[float, ...]
    quality: tuple[float, ...]
    overall: tuple[float, ...]

    @property
    def search_steps(self) -> int:
        return len(self.overall) - 1

    def total(self) -> float:
        return sum(self.overall)


def format_reward(valid: bool, is_terminal: bool, constants: RewardConstants = DEFAULT_CONSTANTS) -> float:
    """Four-case step format reward."""
    if is_terminal:
        return constants.format_valid_terminal if valid else constants.format_invalid_terminal
    return constants.format_valid_mid if valid else constants.format_invalid_mid


def outcome_reward(final_answer: str | None, golds: Iterable[str], is_terminal: bool) -> float:
    """Exact-match reward, paid only at the terminal step."""
    if not is_terminal or final_answer is None:
        return 0.0
    return float(exact_match(final_answer, golds))


def find_capability_depth(intermediate_answers: Sequence[str | None], golds: Iterable[str]) -> int:
    """Earliest 1-based step whose intermediate answer exactly matches; -1 if none."""
    golds = list(golds)
    for t, answer in enumerate(intermediate_answers, start=1):
        if answer is not None and exact_match(answer, golds) == 1:
            return t
    return -1


def efficiency_reward(t: int, t_c: int, search_steps: int, constants: RewardConstants = DEFAULT_CONSTANTS) -> float:
    """Search-efficiency reward for search step t given capability depth t_c."""
    if not 1 <= t <= search_steps:
        raise ValueError(f"step index {t} outside 1..{search_steps}")
    if t_c != -1 and not 1 <= t_c <= search_steps:
        raise ValueError(f"capability depth {t_c} outside -1 or 1..{search_steps}")
    if t_c == -1:
        return constants.undersearch
    if t <= t_c:
        return constants.efficiency_numerator / (t_c + constants.epsilon) + constants.efficiency_offset
    return constants.oversearch_penalty


def quality_reward(f1_by_step: Sequence[float], t: int, constants: RewardConstants = DEFAULT_CONSTANTS) -> float:
    """F1 gain of step t over the best F1 of steps 1..t-1 (empty prefix = 0)."""
    if not 1 <= t <= len(f1_by_step):
        raise ValueError(f"step index {t} outside 1..{len(f1_by_step)}")
    previous_best = max(f1_by_step[: t - 1], default=0.0)
    gain = f1_by_step[t - 1] - previous_best
    if constants.clip_quality:
        gain = max(0.0, gain)
    return gain


def score_trajectory(
    traj: Trajectory,
    record: QuestionRecord,
    constants: RewardConstants = DEFAULT_CONSTANTS,
    *,
    ablate: Iterable[str] = (),
) -> tuple[RewardBreakdown, Trajectory]:
    """Compute all reward components for a trajectory.

    Returns the breakdown (search steps then terminal entry) together
    with a copy of the trajectory carrying t_c and per-step rewards.
    Components named in `ablate` are zeroed, which is how the reward
    ablation harness is expressed.
    """
    ablate = frozenset(ablate)
    unknown = ablate.difference(ABLATABLE_COMPONENTS)
    if unknown:
        raise ValueError(f"unknown reward components: {sorted(unknown)}")
    golds = record.gold_answers
    steps = traj.steps
    n = len(steps)
    for step in steps:
        if step.intermediate_answer is None:
            raise ValueError(
                f"step {step.index} of question {traj.question_id!r} has no intermediate "
                "answer; capability depth and quality rewards are undefined without it"
            )

    t_c = find_capability_depth([s.intermediate_answer for s in steps], golds)
    f1s = [token_f1(s.intermediate_answer, golds) for s in steps]

    fmt = [format_reward(s.valid, False, constants) for s in steps]
    fmt.append(format_reward(traj.final_answer is not None, True, constants))
    out = [0.0] * n + [outcome_reward(traj.final_answer, golds, True)]
    eff = [efficiency_reward(t, t_c, n, constants) for t in range(1, n + 1)] + [0.0]
    qual = [quality_reward(f1s, t, constants) for t in range(1, n + 1)] + [0.0]

    if "base" in ablate:
        fmt = [0.0] * (n + 1)
        out = [0.0] * (n + 1)
    if "efficiency" in ablate:
        eff = [0.0] * (n + 1)
    if "quality" in ablate:
        qual = [0.0] * (n + 1)

    overall = [f + o + e + q for f, o, e, q in zip(fmt, out, eff, qual)]
    breakdown = RewardBreakdown(
        format=tuple(fmt),
        outcome=tuple(out),
        efficiency=tuple(eff),
        quality=tuple(qual),
        overall=tuple(overall),
    )
    per_step = [
        StepRewards(format=fmt[i], outcome=out[i], efficiency=eff[i], quality=qual[i], overall=overall[i])
        for i in range(n)
    ]
    return breakdown, with_scores(traj, t_c, per_step)


def cumulative_reward_curve(
    t_c: int,
    max_depth: int,
    constants: RewardConstants = DEFAULT_CONSTANTS,
    *,
    include_outcome: bool = True,
) -> list[tuple[int, float]]:
    """Total reward of an idealized trajectory stopping at each depth 1..max_depth.

    Stopping short of t_c means the intermediate answer never matched, so
    every step earns the under-search bonus and the answer is wrong.
    Stopping at or past t_c pays the effective-step rewards up to t_c and
    the over-search penalty beyond, plus the correct-answer terminal
    rewards when include_outcome is set.
    """
    if not 1 <= t_c <= max_depth:
        raise ValueError(f"capability depth {t_c} outside 1..{max_depth}")
    effective = constants.efficiency_numerator / (t_c + constants.epsilon) + constants.efficiency_offset
    curve = []
    for depth in range(1, max_depth + 1):
        if depth < t_c:
            total = depth * constants.undersearch
        else:
            total = t_c * effective + (depth - t_c) * constants.oversearch_penalty
            if include_outcome:
                total += 1.0 + constants.format_valid_terminal
        curve.append((depth, total))
    return curve


def classify_steps(t_c: int | None, search_steps: int) -> dict[str, int]:
    """Count steps per efficiency branch for one scored trajectory."""
    if t_c is None:
        raise ValueError("trajectory has no capability depth; score it first")
    if t_c == -1:
        return {"under_search": search_steps, "effective_search": 0, "over_search": 0}
    effective = min(t_c, search_steps)
    return {
        "under_search": 0,
        "effective_search": effective,
        "over_search": search_steps - effective,
    }
