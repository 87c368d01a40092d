"""Synthetic multi-hop task generation.

A depth-d task is an entity chain e_0..e_d with one bridge document per
hop. The document for hop i introduces the name of e_i; the final hop
document also carries the answer (an attribute of e_d). Entity names are
unique pseudo-words, so the answer is reachable through rule-based
retrieval only by following the whole chain: masking any bridge document
hides the next entity name and cuts the trail.

Depth-0 tasks have a single directly retrievable document that carries
the answer; answering them needs no search at all for an agent that
already knows the fact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import SchemaError
from .retrieval import Document
from .trajectory import QuestionRecord

_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu",
    "na", "pe", "qi", "ro", "su", "ta", "ve", "wi", "xo", "zu",
    "bra", "cle", "dri", "flo", "gra", "ple", "sti", "tro", "vla", "zre",
)

_ATTRIBUTES = ("sigil", "callsign", "watchword", "emblem", "cipher", "token")

ANSWER_TOKENS = 4
MIN_DISTRACTORS = 5


def _pseudo_word(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        n = int(rng.integers(3, 5))
        word = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n))
        if word not in used:
            used.add(word)
            return word


@dataclass(frozen=True)
class SyntheticTask:
    """One generated question with its private slice of the corpus."""

    id: str
    depth: int
    question: str
    answers: tuple[str, ...]
    attribute: str
    entities: tuple[str, ...]
    hop_docs: tuple[Document, ...]
    distractor_entities: tuple[str, ...]
    distractor_docs: tuple[Document, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "hop_docs", tuple(self.hop_docs))
        object.__setattr__(self, "distractor_entities", tuple(self.distractor_entities))
        object.__setattr__(self, "distractor_docs", tuple(self.distractor_docs))

    @property
    def answer_doc(self) -> Document:
        return self.hop_docs[-1]

    def entity_documents(self) -> Iterator[tuple[str, Document]]:
        """(entity, document keyed by it) pairs, chain entities first.

        Chain entity e_j keys the hop document that continues the trail
        from it; the terminal entity keys the answer document. Each
        distractor entity keys its own filler document.
        """
        docs = self.hop_docs
        for j, entity in enumerate(self.entities[:-1]):
            yield entity, docs[min(j, len(docs) - 1)]
        yield self.entities[-1], docs[-1]
        for entity, doc in zip(self.distractor_entities, self.distractor_docs):
            yield entity, doc

    def record(self) -> QuestionRecord:
        return QuestionRecord(id=self.id, question=self.question, gold_answers=self.answers)

    def documents(self) -> list[Document]:
        return list(self.hop_docs) + list(self.distractor_docs)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "depth": self.depth,
            "question": self.question,
            "answers": list(self.answers),
            "attribute": self.attribute,
            "entities": list(self.entities),
            "hop_docs": [{"id": d.id, "title": d.title, "text": d.body} for d in self.hop_docs],
            "distractor_entities": list(self.distractor_entities),
            "distractor_docs": [
                {"id": d.id, "title": d.title, "text": d.body} for d in self.distractor_docs
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticTask":
        def docs(key):
            return tuple(Document(id=d["id"], title=d["title"], body=d["text"]) for d in obj[key])

        return cls(
            id=obj["id"],
            depth=int(obj["depth"]),
            question=obj["question"],
            answers=tuple(obj["answers"]),
            attribute=obj["attribute"],
            entities=tuple(obj["entities"]),
            hop_docs=docs("hop_docs"),
            distractor_entities=tuple(obj["distractor_entities"]),
            distractor_docs=docs("distractor_docs"),
            seed=int(obj["seed"]),
        )


def generate_task(
    task_id: str,
    depth: int,
    rng: np.random.Generator,
    *,
    distractors: int = 6,
    seed: int = 0,
) -> SyntheticTask:
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if distractors < MIN_DISTRACTORS:
        raise ValueError(f"at least {MIN_DISTRACTORS} distractors required")
    used: set[str] = set()
    attribute = _ATTRIBUTES[int(rng.integers(0, len(_ATTRIBUTES)))]
    entities = tuple(_pseudo_word(rng, used) for _ in range(depth + 1))
    answer = " ".join(_pseudo_word(rng, used) for _ in range(ANSWER_TOKENS))

    hop_docs = []
    for i in range(1, depth + 1):
        if i < depth:
            body = f"Field log: the trail continues to the waypoint {entities[i]}."
        else:
            body = (
                f"Field log: the trail ends at {entities[depth]}. "
                f"The {attribute} of {entities[depth]} is {answer}."
            )
        hop_docs.append(Document(id=f"{task_id}-hop{i}", title=f"Trail log {task_id} part {i}", body=body))
    if depth == 0:
        hop_docs.append(
            Document(
                id=f"{task_id}-hop0",
                title=f"Trail log {task_id} part 0",
                body=f"Field log: the {attribute} of {entities[0]} is {answer}.",
            )
        )

    distractor_entities = tuple(_pseudo_word(rng, used) for _ in range(distractors))
    distractor_docs = tuple(
        Document(
            id=f"{task_id}-dx{m}",
            title=f"Field note {task_id} extra {m}",
            body=(
                f"Unrelated note: the {attribute} of {entity} is "
                + " ".join(_pseudo_word(rng, used) for _ in range(ANSWER_TOKENS))
                + "."
            ),
        )
        for m, entity in enumerate(distractor_entities, start=1)
    )

    if depth == 0:
        question = f"What is the {attribute} of {entities[0]}?"
    else:
        question = (
            f"What is the {attribute} of the final waypoint on the trail that starts at {entities[0]}?"
        )
    return SyntheticTask(
        id=task_id,
        depth=depth,
        question=question,
        answers=(answer,),
        attribute=attribute,
        entities=entities,
        hop_docs=tuple(hop_docs),
        distractor_entities=distractor_entities,
        distractor_docs=distractor_docs,
        seed=seed,
    )


def generate_tasks(
    count: int,
    depths: Sequence[int],
    seed: int,
    *,
    distractors: int = 6,
) -> list[SyntheticTask]:
    """Deterministically generate tasks with depths drawn from `depths`."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not depths or any(d < 0 for d in depths):
        raise ValueError("depths must be non-negative")
    root = np.random.default_rng(seed)
    tasks = []
    for i in range(count):
        depth = int(depths[int(root.integers(0, len(depths)))])
        tasks.append(
            generate_task(f"task{i:05d}", depth, root, distractors=distractors, seed=seed)
        )
    return tasks


def corpus_documents(tasks: Iterable[SyntheticTask]) -> list[Document]:
    docs = []
    for task in tasks:
        docs.extend(task.documents())
    return docs


def write_task_files(tasks: Sequence[SyntheticTask], dataset_path, corpus_path) -> None:
    """Write the dataset (with embedded task metadata) and corpus files."""
    with open(dataset_path, "w", encoding="utf-8") as handle:
        for task in tasks:
            obj = {
                "id": task.id,
                "question": task.question,
                "golden_answers": list(task.answers),
                "task": task.to_dict(),
            }
            handle.write(json.dumps(obj, ensure_ascii=False))
            handle.write("\n")
    with open(corpus_path, "w", encoding="utf-8") as handle:
        for doc in corpus_documents(tasks):
            handle.write(json.dumps({"id": doc.id, "title": doc.title, "text": doc.body}, ensure_ascii=False))
            handle.write("\n")


def load_tasks(dataset_path) -> dict[str, SyntheticTask]:
    """Read embedded task metadata back from a dataset file."""
    tasks: dict[str, SyntheticTask] = {}
    with open(dataset_path, "r", encoding="utf-8") as handle:
        for i, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line=i) from exc
            meta = obj.get("task")
            if meta is None:
                raise SchemaError(
                    "dataset record carries no synthetic task metadata; scripted policies "
                    "and oracle retrieval need a dataset produced by task generation",
                    field="task",
                    line=i,
                )
            task = SyntheticTask.from_dict(meta)
            tasks[task.id] = task
    return tasks
