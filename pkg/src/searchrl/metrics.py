"""Answer normalization, EM / token-F1, and dataset-level evaluation.

Normalization follows the open-domain QA convention: lowercase, strip
punctuation, drop the articles "a"/"an"/"the", collapse whitespace.
Multi-alias gold sets score by the maximum over aliases.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping

from .errors import SchemaError

if TYPE_CHECKING:
    from .trajectory import QuestionRecord, Trajectory

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> list[str]:
    """Normalize free text into the token list used for matching."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return text.split()


def exact_match(pred: str | None, golds: Iterable[str]) -> int:
    """1 iff the normalized prediction equals any normalized gold alias."""
    golds = list(golds)
    if not golds:
        raise ValueError("gold alias set must be non-empty")
    if pred is None:
        return 0
    tokens = normalize_answer(pred)
    return int(any(tokens == normalize_answer(g) for g in golds))


def token_f1(pred: str | None, golds: Iterable[str]) -> float:
    """Best token-multiset F1 of the prediction against the gold aliases.

    For one alias with PN prediction tokens, RN alias tokens and IN
    overlapping tokens the score is 2*IN / (PN + RN); zero when there is
    no overlap or both sides are empty.
    """
    golds = list(golds)
    if not golds:
        raise ValueError("gold alias set must be non-empty")
    if pred is None:
        return 0.0
    pred_tokens = normalize_answer(pred)
    pred_counts = Counter(pred_tokens)
    best = 0.0
    for gold in golds:
        gold_tokens = normalize_answer(gold)
        total = len(pred_tokens) + len(gold_tokens)
        if total == 0:
            continue
        overlap = sum((pred_counts & Counter(gold_tokens)).values())
        if overlap == 0:
            continue
        best = max(best, 2.0 * overlap / total)
    return best


@dataclass(frozen=True)
class MetricsReport:
    """Dataset-level evaluation summary.

    se is em/sd while sd > 0; for zero mean search depth it degrades to
    em so that zero-search probes stay well defined.
    """

    n: int
    em: float
    f1: float
    sd: float
    se: float
    osr: float

    def to_dict(self) -> dict[str, float | int]:
        return {
            "n": self.n,
            "em": self.em,
            "f1": self.f1,
            "sd": self.sd,
            "se": self.se,
            "osr": self.osr,
        }

    CSV_COLUMNS = ("n", "em", "f1", "sd", "se", "osr")

    def csv_row(self) -> list[str]:
        d = self.to_dict()
        return [repr(d[c]) if isinstance(d[c], float) else str(d[c]) for c in self.CSV_COLUMNS]


def _as_record_map(dataset) -> Mapping[str, "QuestionRecord"]:
    if isinstance(dataset, Mapping):
        return dataset
    return {record.id: record for record in dataset}


def aggregate_metrics(trajectories: Iterable["Trajectory"], dataset) -> MetricsReport:
    """Aggregate EM/F1/SD/SE/OSR over trajectories against a dataset.

    A missing final answer scores zero; OSR counts questions where some
    step strictly before the last search step already produced an
    exactly-matching intermediate answer.
    """
    records = _as_record_map(dataset)
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty evaluation set")

    em_total = 0.0
    f1_total = 0.0
    steps_total = 0
    over_total = 0
    for traj in trajectories:
        record = records.get(traj.question_id)
        if record is None:
            raise SchemaError(
                f"trajectory references unknown question id {traj.question_id!r}",
                field="question_id",
            )
        golds = record.gold_answers
        em_total += exact_match(traj.final_answer, golds)
        f1_total += token_f1(traj.final_answer, golds)
        steps_total += len(traj.steps)
        last_index = len(traj.steps)
        early_hit = any(
            step.intermediate_answer is not None
            and step.index < last_index
            and exact_match(step.intermediate_answer, golds) == 1
            for step in traj.steps
        )
        over_total += int(early_hit)

    n = len(trajectories)
    em = em_total / n
    f1 = f1_total / n
    sd = steps_total / n
    se = em / sd if sd > 0 else em
    osr = over_total / n
    return MetricsReport(n=n, em=em, f1=f1, sd=sd, se=se, osr=osr)
