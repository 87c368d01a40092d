"""Episode rollout engine and the fixed-depth probe.

One episode alternates policy generation with parsing and retrieval:
search actions retrieve top-k documents, inject the observation, and
capture an intermediate answer from the same policy; an answer action
terminates. Under a fixed search quota, premature answers and over-quota
searches are rejected back to the policy; hitting the turn cap forces an
unanswered termination.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import TransportError, UsageError
from .metrics import aggregate_metrics
from .policy import (
    PolicyBackend,
    PolicySession,
    builtin_template,
    intermediate_answer,
    render_prompt,
)
from .retrieval import Document, OracleRetriever
from .tasks import SyntheticTask
from .trajectory import (
    ANSWER,
    SEARCH,
    THINK,
    QuestionRecord,
    Step,
    Termination,
    Trajectory,
    check_step_validity,
    parse_tagged_text,
)


class Retriever(Protocol):
    def retrieve(self, query: str, k: int = 3) -> list[Document]: ...


@dataclass(frozen=True)
class EpisodeConfig:
    """Rollout settings; the defaults follow the published setup."""

    max_turns: int = 4
    k: int = 3
    fixed_depth: int | None = None
    record_intermediate: bool = True
    max_new_text: int = 2048
    max_rejections: int = 4

    def __post_init__(self):
        if self.max_turns < 0 or self.k < 1:
            raise ValueError("max_turns must be >= 0 and k >= 1")
        if self.fixed_depth is not None:
            if not 0 <= self.fixed_depth <= 4:
                raise ValueError("fixed_depth must be in 0..4")
            if self.fixed_depth > self.max_turns:
                raise ValueError("fixed_depth must not exceed max_turns")

    def to_dict(self) -> dict:
        return {
            "max_turns": self.max_turns,
            "k": self.k,
            "fixed_depth": self.fixed_depth,
            "record_intermediate": self.record_intermediate,
            "max_new_text": self.max_new_text,
            "max_rejections": self.max_rejections,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EpisodeConfig":
        return replace(cls(), **obj)


def format_observation(docs: Sequence[Document]) -> str:
    """Observation text injected for a retrieval result."""
    return "\n".join(
        f"Doc {i} (Title: {doc.title}) {doc.body}" for i, doc in enumerate(docs, start=1)
    )


def _rollout_template(config: EpisodeConfig):
    if config.fixed_depth is None:
        return builtin_template("rollout")
    return builtin_template(f"fixed_depth_{config.fixed_depth}")


def run_episode(
    session: PolicySession,
    retriever: Retriever,
    record: QuestionRecord,
    config: EpisodeConfig = EpisodeConfig(),
) -> Trajectory:
    """Roll one question to termination and return the raw trajectory."""
    template = _rollout_template(config)
    steps: list[Step] = []
    rejections = 0

    def finish(final_answer: str | None) -> Trajectory:
        termination = Termination.ANSWERED if final_answer is not None else Termination.MAX_TURNS_REACHED
        return Trajectory(
            question_id=record.id,
            steps=tuple(steps),
            final_answer=final_answer,
            termination=termination,
        )

    while True:
        prompt = render_prompt(template, record.question, steps)
        try:
            text = session.generate(prompt, stop=("</search>", "</answer>"), max_new_text=config.max_new_text)
        except TransportError as exc:
            exc.question_id = record.id
            raise
        parsed = parse_tagged_text(text)
        action = next((a for a in parsed.actions if a.kind in (SEARCH, ANSWER)), None)

        if action is None:
            rejections += 1
            if rejections > config.max_rejections:
                return finish(None)
            continue

        if action.kind == ANSWER:
            if config.fixed_depth is not None and len(steps) < config.fixed_depth:
                # The quota is not met yet: reject the premature answer.
                rejections += 1
                if rejections > config.max_rejections:
                    return finish(None)
                continue
            return finish(action.payload)

        if len(steps) >= config.max_turns:
            return finish(None)
        if config.fixed_depth is not None and len(steps) >= config.fixed_depth:
            rejections += 1
            if rejections > config.max_rejections:
                return finish(None)
            continue

        think = " ".join(a.payload for a in parsed.actions if a.kind == THINK)
        docs = retriever.retrieve(action.payload, config.k)
        step = Step(
            index=len(steps) + 1,
            think=think,
            search_query=action.payload,
            retrieved_doc_ids=tuple(d.id for d in docs),
            observation=format_observation(docs),
            intermediate_answer=None,
            valid=True,
        )
        valid = check_step_validity(step, steps, turn_well_formed=parsed.well_formed)
        step = replace(step, valid=valid)
        if config.record_intermediate:
            answer = intermediate_answer(session, record.question, list(steps) + [step])
            step = replace(step, intermediate_answer=answer)
        steps.append(step)


def _episode_seed(root_seed: int, *context: int) -> int:
    return int(np.random.SeedSequence([root_seed, *context]).generate_state(1)[0])


def run_dataset(
    backend: PolicyBackend,
    records: Mapping[str, QuestionRecord],
    retriever_for: Callable[[str], Retriever],
    config: EpisodeConfig = EpisodeConfig(),
    *,
    tasks: Mapping[str, SyntheticTask] | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> list[Trajectory]:
    """Run every question in the dataset once, in dataset order."""
    ordered = sorted(records)

    def one(position: int) -> Trajectory:
        qid = ordered[position]
        record = records[qid]
        task = tasks.get(qid) if tasks else None
        depth_key = 0 if config.fixed_depth is None else config.fixed_depth + 1
        session = backend.session(
            record=record,
            task=task,
            fixed_depth=config.fixed_depth,
            seed=_episode_seed(seed, depth_key, position),
        )
        try:
            return run_episode(session, retriever_for(qid), record, config)
        except TransportError:
            raise
        except Exception as exc:
            raise UsageError(f"episode for question {qid!r} failed: {exc}") from exc

    if jobs <= 1:
        return [one(i) for i in range(len(ordered))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(len(ordered))))


def oracle_retriever_for(tasks: Mapping[str, SyntheticTask]) -> Callable[[str], Retriever]:
    def provider(question_id: str) -> Retriever:
        return OracleRetriever(tasks[question_id])

    return provider


def probe_fixed_depth(
    backend: PolicyBackend,
    records: Mapping[str, QuestionRecord],
    retriever_for: Callable[[str], Retriever],
    depths: Iterable[int] = (0, 1, 2, 3, 4),
    *,
    tasks: Mapping[str, SyntheticTask] | None = None,
    config: EpisodeConfig = EpisodeConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> list[dict]:
    """Force each probe depth on every question; tabulate EM and OSR."""
    depths = list(depths)
    if any(d < 0 or d > config.max_turns for d in depths):
        raise UsageError("probe depths must lie within 0..max_turns")
    rows = []
    for depth in depths:
        probe_config = replace(config, fixed_depth=depth)
        trajectories = run_dataset(
            backend,
            records,
            retriever_for,
            probe_config,
            tasks=tasks,
            seed=_episode_seed(seed, 1000 + depth),
            jobs=jobs,
        )
        report = aggregate_metrics(trajectories, records)
        rows.append({"depth": depth, "em": report.em, "osr": report.osr, "n": report.n})
    return rows
