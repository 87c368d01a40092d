"""Trajectory data model, tagged-action grammar, and JSON Lines IO.

An agent turn is tagged text built from <think>, <search> and <answer>
spans; <information> spans are environment-injected observations and are
never actions. A trajectory is the ordered list of search steps made for
one question plus the terminal outcome. All types are immutable values;
every operation here is a pure function.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from .errors import SchemaError
from .metrics import normalize_answer

THINK = "think"
SEARCH = "search"
ANSWER = "answer"
INFORMATION = "information"

_SPAN_RE = re.compile(r"<(think|search|answer|information)>(.*?)</\1>", re.DOTALL)
_TAG_TOKEN_RE = re.compile(r"</?(?:think|search|answer|information)>")


@dataclass(frozen=True)
class AgentAction:
    """One parsed agent action: reasoning, a search query, or an answer."""

    kind: str
    payload: str

    def __post_init__(self):
        if self.kind not in (THINK, SEARCH, ANSWER):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind in (SEARCH, ANSWER) and not self.payload.strip():
            raise ValueError(f"{self.kind} action requires a non-empty payload")


@dataclass(frozen=True)
class ParsedText:
    """Result of parsing one piece of tagged text."""

    actions: tuple[AgentAction, ...]
    well_formed: bool
    observations: tuple[str, ...] = ()


def parse_tagged_text(raw: str) -> ParsedText:
    """Extract actions from tagged text, best effort, never raising.

    Well-formed means: every opened tag closes, no tag nesting, nothing
    but whitespace outside spans, and at least one search or answer
    action is present. Malformed input still yields whatever actions
    could be recovered, with the flag set to False.
    """
    actions: list[AgentAction] = []
    observations: list[str] = []
    well_formed = True
    pos = 0
    for match in _SPAN_RE.finditer(raw):
        if raw[pos : match.start()].strip():
            well_formed = False
        pos = match.end()
        kind = match.group(1)
        payload = match.group(2).strip()
        if _TAG_TOKEN_RE.search(payload):
            well_formed = False
        if kind == INFORMATION:
            observations.append(payload)
            continue
        if kind in (SEARCH, ANSWER) and not payload:
            well_formed = False
            continue
        actions.append(AgentAction(kind, payload))
    if raw[pos:].strip():
        well_formed = False
    if not any(a.kind in (SEARCH, ANSWER) for a in actions):
        well_formed = False
    return ParsedText(tuple(actions), well_formed, tuple(observations))


def actions_to_text(actions: Iterable[AgentAction]) -> str:
    """Serialize actions back to tagged text (inverse of the parser)."""
    return "".join(f"<{a.kind}>{a.payload}</{a.kind}>" for a in actions)


class Termination(str, enum.Enum):
    ANSWERED = "answered"
    MAX_TURNS_REACHED = "max_turns_reached"


@dataclass(frozen=True)
class QuestionRecord:
    """A question with its set of acceptable gold answer aliases."""

    id: str
    question: str
    gold_answers: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.gold_answers or any(not g.strip() for g in self.gold_answers):
            raise SchemaError(
                "gold_answers must be non-empty strings", field="gold_answers"
            )


@dataclass(frozen=True)
class StepRewards:
    """Per-step reward components and their sum."""

    format: float
    outcome: float
    efficiency: float
    quality: float
    overall: float

    def to_dict(self) -> dict[str, float]:
        return {
            "format": self.format,
            "outcome": self.outcome,
            "efficiency": self.efficiency,
            "quality": self.quality,
            "overall": self.overall,
        }


@dataclass(frozen=True)
class Step:
    """One search step: query, retrieval outcome, and self-evaluation."""

    index: int
    think: str
    search_query: str
    retrieved_doc_ids: tuple[str, ...]
    observation: str
    intermediate_answer: str | None = None
    valid: bool = True
    rewards: StepRewards | None = None

    def __post_init__(self):
        object.__setattr__(self, "retrieved_doc_ids", tuple(self.retrieved_doc_ids))
        if self.index < 1:
            raise SchemaError("step index must be >= 1", field="index")


@dataclass(frozen=True)
class Trajectory:
    """All steps taken for one question plus the terminal outcome.

    t_c is the capability depth: the earliest 1-based step whose
    intermediate answer exactly matches a gold alias, -1 when no step
    matches, or None before scoring.
    """

    question_id: str
    steps: tuple[Step, ...]
    final_answer: str | None
    termination: Termination
    t_c: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "termination", Termination(self.termination))
        for i, step in enumerate(self.steps, start=1):
            if step.index != i:
                raise SchemaError(
                    f"step indices must be consecutive from 1, got {step.index} at position {i}",
                    field=f"steps[{i - 1}].index",
                )
        answered = self.termination is Termination.ANSWERED
        if answered != (self.final_answer is not None):
            raise SchemaError(
                "termination is 'answered' iff final_answer is present",
                field="final_answer",
            )
        if self.t_c is not None:
            if self.t_c == -1:
                pass
            elif 1 <= self.t_c <= len(self.steps):
                if self.steps[self.t_c - 1].intermediate_answer is None:
                    raise SchemaError(
                        f"step {self.t_c} is marked as the capability depth but has "
                        "no intermediate answer",
                        field="t_c",
                    )
            else:
                raise SchemaError(
                    f"t_c must be -1 or in 1..{len(self.steps)}, got {self.t_c}",
                    field="t_c",
                )


def _normalized_query(query: str) -> str:
    return " ".join(normalize_answer(query))


def check_step_validity(step: Step, history: Iterable[Step], *, turn_well_formed: bool = True) -> bool:
    """False iff the turn was malformed or repeats an earlier retrieval.

    A repeat is either the same normalized query or the same retrieved
    doc-id set as any earlier step.
    """
    if not turn_well_formed:
        return False
    query = _normalized_query(step.search_query)
    doc_set = frozenset(step.retrieved_doc_ids)
    for prev in history:
        if _normalized_query(prev.search_query) == query:
            return False
        if frozenset(prev.retrieved_doc_ids) == doc_set:
            return False
    return True


def with_scores(traj: Trajectory, t_c: int, per_step: list[StepRewards]) -> Trajectory:
    """Return a copy of the trajectory with t_c and per-step rewards filled."""
    if len(per_step) != len(traj.steps):
        raise ValueError("one StepRewards entry required per search step")
    steps = tuple(replace(s, rewards=r) for s, r in zip(traj.steps, per_step))
    return replace(traj, steps=steps, t_c=t_c)


# --- JSON Lines serialization -------------------------------------------

def _require(obj: dict, key: str, kinds, *, line: int | None = None):
    if key not in obj:
        raise SchemaError(f"missing field {key!r}", field=key, line=line)
    value = obj[key]
    if not isinstance(value, kinds):
        raise SchemaError(
            f"field {key!r} has type {type(value).__name__}", field=key, line=line
        )
    return value


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "question_id": traj.question_id,
        "steps": [
            {
                "index": s.index,
                "think": s.think,
                "search_query": s.search_query,
                "retrieved_doc_ids": list(s.retrieved_doc_ids),
                "observation": s.observation,
                "intermediate_answer": s.intermediate_answer,
                "valid": s.valid,
                "rewards": s.rewards.to_dict() if s.rewards is not None else None,
            }
            for s in traj.steps
        ],
        "final_answer": traj.final_answer,
        "termination": traj.termination.value,
        "t_c": traj.t_c,
    }


def trajectory_from_dict(obj: dict, *, line: int | None = None) -> Trajectory:
    question_id = _require(obj, "question_id", str, line=line)
    raw_steps = _require(obj, "steps", list, line=line)
    steps = []
    for i, raw in enumerate(raw_steps):
        if not isinstance(raw, dict):
            raise SchemaError("step entries must be objects", field=f"steps[{i}]", line=line)
        rewards_obj = raw.get("rewards")
        rewards = None
        if rewards_obj is not None:
            if not isinstance(rewards_obj, dict):
                raise SchemaError(
                    "rewards must be an object or null",
                    field=f"steps[{i}].rewards",
                    line=line,
                )
            try:
                rewards = StepRewards(
                    format=float(rewards_obj["format"]),
                    outcome=float(rewards_obj["outcome"]),
                    efficiency=float(rewards_obj["efficiency"]),
                    quality=float(rewards_obj["quality"]),
                    overall=float(rewards_obj["overall"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(
                    f"malformed rewards object: {exc}",
                    field=f"steps[{i}].rewards",
                    line=line,
                ) from exc
        intermediate = raw.get("intermediate_answer")
        if intermediate is not None and not isinstance(intermediate, str):
            raise SchemaError(
                "intermediate_answer must be a string or null",
                field=f"steps[{i}].intermediate_answer",
                line=line,
            )
        try:
            steps.append(
                Step(
                    index=_require(raw, "index", int, line=line),
                    think=_require(raw, "think", str, line=line),
                    search_query=_require(raw, "search_query", str, line=line),
                    retrieved_doc_ids=tuple(_require(raw, "retrieved_doc_ids", list, line=line)),
                    observation=_require(raw, "observation", str, line=line),
                    intermediate_answer=intermediate,
                    valid=_require(raw, "valid", bool, line=line),
                    rewards=rewards,
                )
            )
        except SchemaError as exc:
            if exc.field and not exc.field.startswith("steps["):
                raise SchemaError(str(exc), field=f"steps[{i}].{exc.field}", line=line) from exc
            raise
    final_answer = obj.get("final_answer")
    if final_answer is not None and not isinstance(final_answer, str):
        raise SchemaError("final_answer must be a string or null", field="final_answer", line=line)
    termination = _require(obj, "termination", str, line=line)
    try:
        termination = Termination(termination)
    except ValueError as exc:
        raise SchemaError(
            f"unknown termination {termination!r}", field="termination", line=line
        ) from exc
    t_c = obj.get("t_c")
    if t_c is not None and not isinstance(t_c, int):
        raise SchemaError("t_c must be an integer or null", field="t_c", line=line)
    return Trajectory(
        question_id=question_id,
        steps=tuple(steps),
        final_answer=final_answer,
        termination=termination,
        t_c=t_c,
    )


def serialize_trajectory(traj: Trajectory) -> str:
    """One JSON Lines record for the trajectory."""
    return json.dumps(trajectory_to_dict(traj), ensure_ascii=False)


def load_trajectory(text: str, *, line: int | None = None) -> Trajectory:
    """Inverse of serialize_trajectory; raises SchemaError on bad records."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", line=line) from exc
    if not isinstance(obj, dict):
        raise SchemaError("trajectory record must be a JSON object", line=line)
    return trajectory_from_dict(obj, line=line)


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for traj in trajectories:
            handle.write(serialize_trajectory(traj))
            handle.write("\n")
            count += 1
    return count


def read_trajectories(path) -> Iterator[Trajectory]:
    with open(path, "r", encoding="utf-8") as handle:
        for i, raw in enumerate(handle, start=1):
            if raw.strip():
                yield load_trajectory(raw, line=i)


def write_dataset(path, records: Iterable[QuestionRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            obj = {
                "id": record.id,
                "question": record.question,
                "golden_answers": list(record.gold_answers),
            }
            handle.write(json.dumps(obj, ensure_ascii=False))
            handle.write("\n")
            count += 1
    return count


def read_dataset(path) -> dict[str, QuestionRecord]:
    """Load a {id, question, golden_answers[]} JSON Lines dataset."""
    records: dict[str, QuestionRecord] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for i, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line=i) from exc
            record = QuestionRecord(
                id=str(_require(obj, "id", (str, int), line=i)),
                question=_require(obj, "question", str, line=i),
                gold_answers=tuple(_require(obj, "golden_answers", list, line=i)),
            )
            if record.id in records:
                raise SchemaError(f"duplicate question id {record.id!r}", field="id", line=i)
            records[record.id] = record
    return records
