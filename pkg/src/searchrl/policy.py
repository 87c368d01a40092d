"""Prompt templates and pluggable text-policy backends.

Three backends speak the same tagged-text protocol: a scripted policy
that simulates an agent of configurable capability on synthetic tasks, a
remote client for any HTTP text-generation endpoint, and an adapter that
drives the trainable decision policy through the text interface. Every
episode owns one backend session.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np
import requests

from .errors import ProtocolError, SchemaError, TransportError, UsageError
from .tasks import ANSWER_TOKENS, SyntheticTask
from .training import ANSWER_NOW, REPEAT_LAST, DecisionState, ParametricPolicy
from .trajectory import ANSWER, SEARCH, QuestionRecord, Step, parse_tagged_text

_COUNT_WORDS = {0: "zero", 1: "one", 2: "two", 3: "three", 4: "four"}

_ROLLOUT_PREAMBLE = (
    "Answer the given question. "
    "You must conduct reasoning inside <think> and </think> first every time you get new information. "
    "After reasoning, you can call a search engine by <search> query </search> and it will return "
    "the top searched results between <information> and </information>. "
)

_ANSWER_SUFFIX = (
    "you can directly provide the answer inside <answer> and </answer>, without detailed "
    "illustrations. For example, <answer> Beijing </answer>. Question: {question}\n{trajectory}"
)


def _fixed_depth_text(n: int) -> str:
    word = _COUNT_WORDS[n]
    times = "time" if n == 1 else "times"
    after = "After searching, " if n == 1 else "After all searching, "
    return (
        _ROLLOUT_PREAMBLE
        + f"You should search exactly {word} {times}. "
        + f"The number of searches must be no less than {word}. "
        + after
        + _ANSWER_SUFFIX
    )


INTERMEDIATE_PREAMBLE = (
    "Answer the given question according to search trajectories, which consists of multiple "
    "reasoning, search calls, and retrieved information. Important instructions: "
    "(1) You must conduct reasoning inside <think> and </think> first. "
    "(2) After reasoning, output the final answer wrapped in <answer> and </answer>. "
    "For example: <think> Reasoning </think> <answer> Jaden Smith </answer>. "
)

_BUILTIN_TEMPLATES = {
    "rollout": (
        _ROLLOUT_PREAMBLE + "You can search as many times as you need. After reasoning, " + _ANSWER_SUFFIX
    ),
    "intermediate_answer": (
        INTERMEDIATE_PREAMBLE
        + "Search trajectory: Question: {question}. Below are your previous reasoning, "
        "search calls, and retrieved information: {trajectory}"
    ),
    "fixed_depth_0": (
        "Answer the given question. You must conduct reasoning inside <think> and </think> first. "
        "After reasoning, " + _ANSWER_SUFFIX
    ),
    "fixed_depth_1": _fixed_depth_text(1),
    "fixed_depth_2": _fixed_depth_text(2),
    "fixed_depth_3": _fixed_depth_text(3),
    "fixed_depth_4": _fixed_depth_text(4),
}

TEMPLATE_NAMES = tuple(_BUILTIN_TEMPLATES)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def __post_init__(self):
        for placeholder in ("{question}", "{trajectory}"):
            if placeholder not in self.text:
                raise SchemaError(
                    f"template {self.name!r} lacks the {placeholder} placeholder",
                    field="text",
                )


def builtin_template(name: str) -> PromptTemplate:
    if name not in _BUILTIN_TEMPLATES:
        raise UsageError(f"unknown template {name!r}; known: {', '.join(TEMPLATE_NAMES)}")
    return PromptTemplate(name, _BUILTIN_TEMPLATES[name])


def load_template(name: str, path=None) -> PromptTemplate:
    """Builtin template, or an override read from a file path."""
    if path is None:
        return builtin_template(name)
    with open(path, "r", encoding="utf-8") as handle:
        return PromptTemplate(name, handle.read())


def serialize_prefix(steps: Iterable[Step]) -> str:
    """Interleaved think/search/information spans for prompt injection."""
    parts = []
    for step in steps:
        parts.append(f"<think>{step.think}</think>")
        parts.append(f"<search>{step.search_query}</search>")
        parts.append(f"<information>{step.observation}</information>")
    return " ".join(parts)


class _Resolver(dict):
    def __missing__(self, key):
        raise SchemaError(f"unresolved placeholder {key!r}", field=key)


def render_prompt(template: PromptTemplate, question: str, prefix: str | Iterable[Step]) -> str:
    """Substitute the question and the serialized trajectory prefix."""
    trajectory = prefix if isinstance(prefix, str) else serialize_prefix(prefix)
    return template.text.format_map(_Resolver(question=question, trajectory=trajectory))


class PolicySession(Protocol):
    def generate(self, prompt: str, stop: Sequence[str] = (), max_new_text: int = 2048) -> str: ...


class PolicyBackend(Protocol):
    kind: str

    def session(
        self,
        *,
        record: QuestionRecord,
        task: SyntheticTask | None = None,
        fixed_depth: int | None = None,
        seed: int = 0,
    ) -> PolicySession: ...


def generate(session: PolicySession, prompt: str, stop: Sequence[str] = (), max_new_text: int = 2048) -> str:
    return session.generate(prompt, stop, max_new_text)


def extract_answer_span(text: str) -> str:
    """The <answer> payload of a generation, or empty when absent."""
    parsed = parse_tagged_text(text)
    for action in parsed.actions:
        if action.kind == ANSWER:
            return action.payload
    return ""


def intermediate_answer(
    session: PolicySession,
    question: str,
    steps: Sequence[Step],
    template: PromptTemplate | None = None,
) -> str:
    """Ask the policy itself for an answer from the trajectory so far."""
    if not steps:
        raise ValueError("intermediate answers need at least one completed step")
    template = template or builtin_template("intermediate_answer")
    prompt = render_prompt(template, question, steps)
    return extract_answer_span(session.generate(prompt, stop=("</answer>",)))


# --- scripted capability backend ------------------------------------------

WRONG_ANSWER_POOL = (
    "unverified claim alpha",
    "unverified claim beta",
    "unverified claim gamma",
    "unverified claim delta",
    "unverified claim omega",
)


@dataclass(frozen=True)
class ScriptedCapability:
    """Simulated agent strength.

    hop_success_prob is the chance each search formulates the correct
    next bridge query; extraction_depth_bias shifts the earliest step at
    which the agent can answer correctly (negative models strong
    parametric knowledge, positive a weak extractor needing extra
    steps).
    """

    hop_success_prob: float = 1.0
    extraction_depth_bias: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hop_success_prob <= 1.0:
            raise ValueError("hop_success_prob must be in [0, 1]")


class ScriptedSession:
    """One scripted episode; deterministic given its seed."""

    def __init__(self, capability: ScriptedCapability, task: SyntheticTask, fixed_depth: int | None, seed: int):
        self.capability = capability
        self.task = task
        self.fixed_depth = fixed_depth
        self.rng = np.random.default_rng(seed)
        self.searches = 0
        self.progress = 0
        self.fumbles = 0

    def _required_progress(self) -> int:
        virtual = self.task.depth + self.capability.extraction_depth_bias
        return max(0, min(self.task.depth, virtual))

    def _required_searches(self) -> int:
        return max(0, self.task.depth + self.capability.extraction_depth_bias)

    @property
    def can_answer(self) -> bool:
        return self.progress >= self._required_progress() and self.searches >= self._required_searches()

    def _search_turn(self) -> str:
        if self.progress < self.task.depth and (
            self.capability.hop_success_prob >= 1.0
            or self.rng.random() < self.capability.hop_success_prob
        ):
            target = self.task.entities[self.progress]
            self.progress += 1
            query = f"trail from {target}"
        else:
            pool = self.task.distractor_entities
            entity = pool[self.fumbles % len(pool)]
            self.fumbles += 1
            query = f"field notes about {entity}"
        self.searches += 1
        return f"<think>looking for the next waypoint</think><search>{query}</search>"

    def _answer_turn(self) -> str:
        if self.can_answer:
            answer = self.task.answers[0]
        else:
            answer = WRONG_ANSWER_POOL[self.searches % len(WRONG_ANSWER_POOL)]
        return f"<think>settling on an answer</think><answer>{answer}</answer>"

    def generate(self, prompt: str, stop: Sequence[str] = (), max_new_text: int = 2048) -> str:
        if prompt.startswith(INTERMEDIATE_PREAMBLE):
            return self._answer_turn()
        if self.fixed_depth is not None:
            if self.searches < self.fixed_depth:
                return self._search_turn()
            return self._answer_turn()
        if self.can_answer:
            return self._answer_turn()
        return self._search_turn()


@dataclass(frozen=True)
class ScriptedPolicy:
    capability: ScriptedCapability = ScriptedCapability()
    kind: str = "scripted"

    def session(
        self,
        *,
        record: QuestionRecord,
        task: SyntheticTask | None = None,
        fixed_depth: int | None = None,
        seed: int = 0,
    ) -> ScriptedSession:
        if task is None:
            raise UsageError("the scripted policy needs synthetic task metadata")
        return ScriptedSession(self.capability, task, fixed_depth, seed)


# --- remote HTTP backend ----------------------------------------------------

TOKEN_ENV_VAR = "SEARCHRL_API_TOKEN"


@dataclass(frozen=True)
class RemotePolicy:
    """Client for a single-endpoint text-generation server.

    POSTs {prompt, max_tokens, stop[]} to <base_url>/generate and reads
    {text}. Transient transport failures are retried idempotently.
    """

    base_url: str
    timeout: float = 30.0
    max_retries: int = 2
    retry_wait: float = 0.05
    token_env_var: str = TOKEN_ENV_VAR
    kind: str = "remote"

    def session(
        self,
        *,
        record: QuestionRecord,
        task: SyntheticTask | None = None,
        fixed_depth: int | None = None,
        seed: int = 0,
    ) -> "RemoteSession":
        return RemoteSession(self)


class RemoteSession:
    def __init__(self, backend: RemotePolicy):
        self.backend = backend
        self._http = requests.Session()
        token = os.environ.get(backend.token_env_var)
        if token:
            self._http.headers["Authorization"] = f"Bearer {token}"

    def generate(self, prompt: str, stop: Sequence[str] = (), max_new_text: int = 2048) -> str:
        url = self.backend.base_url.rstrip("/") + "/generate"
        payload = {"prompt": prompt, "max_tokens": max_new_text, "stop": list(stop)}
        last_status = None
        last_error: Exception | None = None
        for attempt in range(self.backend.max_retries + 1):
            if attempt:
                time.sleep(self.backend.retry_wait * attempt)
            try:
                response = self._http.post(url, json=payload, timeout=self.backend.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            last_status = response.status_code
            if response.ok:
                try:
                    body = response.json()
                except ValueError as exc:
                    raise ProtocolError(f"endpoint returned non-JSON body: {exc}") from exc
                if not isinstance(body, dict) or not isinstance(body.get("text"), str):
                    raise ProtocolError("endpoint response lacks a string 'text' field")
                return body["text"]
        message = f"generation request to {url} failed after {self.backend.max_retries + 1} attempts"
        if last_status is not None:
            message += f" (last status {last_status})"
        elif last_error is not None:
            message += f" ({last_error})"
        raise TransportError(message, status=last_status)


# --- parametric backend (text adapter over the decision policy) ------------


class ParametricSession:
    """Drives the trainable decision policy through the text protocol."""

    def __init__(
        self,
        policy: ParametricPolicy,
        task: SyntheticTask,
        fixed_depth: int | None,
        seed: int,
        max_turns: int,
        k: int,
    ):
        self.policy = policy
        self.state = DecisionState(task, max_turns, k)
        self.fixed_depth = fixed_depth
        self.rng = np.random.default_rng(seed)

    def _decide(self) -> int:
        action, _ = self.policy.sample(self.state.features(), self.rng)
        if self.fixed_depth is not None:
            if len(self.state.steps) < self.fixed_depth and action == ANSWER_NOW:
                action = REPEAT_LAST if self.rng.random() < 0.5 else 0
            elif len(self.state.steps) >= self.fixed_depth:
                action = ANSWER_NOW
        return action

    def generate(self, prompt: str, stop: Sequence[str] = (), max_new_text: int = 2048) -> str:
        if prompt.startswith(INTERMEDIATE_PREAMBLE):
            return (
                "<think>weighing the evidence so far</think>"
                f"<answer>{self.state.intermediate_answer()}</answer>"
            )
        action = self._decide()
        if action == ANSWER_NOW:
            return (
                "<think>committing to an answer</think>"
                f"<answer>{self.state.final_answer()}</answer>"
            )
        step = self.state.apply_search(action)
        return f"<think>{step.think}</think><search>{step.search_query}</search>"


@dataclass(frozen=True)
class ParametricTextPolicy:
    policy: ParametricPolicy
    max_turns: int = 4
    k: int = 3
    kind: str = "parametric"

    def session(
        self,
        *,
        record: QuestionRecord,
        task: SyntheticTask | None = None,
        fixed_depth: int | None = None,
        seed: int = 0,
    ) -> ParametricSession:
        if task is None:
            raise UsageError("the parametric policy needs synthetic task metadata")
        return ParametricSession(self.policy, task, fixed_depth, seed, self.max_turns, self.k)
