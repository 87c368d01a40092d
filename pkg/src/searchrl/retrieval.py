"""Corpus ingestion, an immutable lexical index, and the task oracle.

The index scores with BM25 (Okapi idf, document-length damping) over the
same normalization used for answer matching. Results are deterministic:
descending score, ties broken by ascending doc id. The oracle retriever
answers synthetic multi-hop tasks by rule instead of text statistics.
"""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping

from .errors import SchemaError
from .metrics import normalize_answer

if TYPE_CHECKING:
    from .tasks import SyntheticTask

BM25_K1 = 1.5
BM25_B = 0.75


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str

    def __post_init__(self):
        if not self.title and not self.body:
            raise SchemaError("document title and body cannot both be empty", field="text")


class RetrievalIndex:
    """Immutable in-memory inverted index over title+body tokens."""

    def __init__(self, documents: Iterable[Document]):
        self._docs: dict[str, Document] = {}
        self._postings: dict[str, list[tuple[str, int]]] = {}
        self._doc_len: dict[str, int] = {}
        for doc in documents:
            if doc.id in self._docs:
                raise SchemaError(f"duplicate id {doc.id!r}", field="id")
            self._docs[doc.id] = doc
            tokens = normalize_answer(doc.title) + normalize_answer(doc.body)
            self._doc_len[doc.id] = len(tokens)
            for term, tf in Counter(tokens).items():
                self._postings.setdefault(term, []).append((doc.id, tf))
        for postings in self._postings.values():
            postings.sort()
        n = len(self._docs)
        self._avg_len = sum(self._doc_len.values()) / n if n else 0.0

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def document(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    @property
    def documents(self) -> Mapping[str, Document]:
        return dict(self._docs)

    def stats(self) -> dict:
        return {
            "documents": len(self._docs),
            "terms": len(self._postings),
            "postings": sum(len(p) for p in self._postings.values()),
            "avg_doc_len": self._avg_len,
        }

    def _idf(self, term: str) -> float:
        df = len(self._postings.get(term, ()))
        return math.log(1.0 + (len(self._docs) - df + 0.5) / (df + 0.5))

    def score(self, query: str, doc_id: str) -> float:
        """BM25 score of one document for a query (0 if no term matches)."""
        doc = self._docs[doc_id]
        counts = Counter(normalize_answer(doc.title) + normalize_answer(doc.body))
        total = 0.0
        for term in normalize_answer(query):
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            damp = tf + BM25_K1 * (1 - BM25_B + BM25_B * self._doc_len[doc_id] / self._avg_len)
            total += self._idf(term) * tf * (BM25_K1 + 1) / damp
        return total

    def search(self, query: str, k: int = 3) -> list[tuple[Document, float]]:
        """Top-k matching documents with scores, deterministic order."""
        if k < 1:
            raise ValueError("k must be >= 1")
        scores: dict[str, float] = {}
        for term in normalize_answer(query):
            postings = self._postings.get(term)
            if not postings:
                continue
            idf = self._idf(term)
            for doc_id, tf in postings:
                damp = tf + BM25_K1 * (1 - BM25_B + BM25_B * self._doc_len[doc_id] / self._avg_len)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (BM25_K1 + 1) / damp
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
        return [(self._docs[doc_id], score) for doc_id, score in ranked]

    def retrieve(self, query: str, k: int = 3) -> list[Document]:
        return [doc for doc, _ in self.search(query, k)]


def search(index: RetrievalIndex, query: str, k: int = 3) -> list[tuple[Document, float]]:
    return index.search(query, k)


def load_corpus(path) -> list[Document]:
    """Read a {id, title, text} JSON Lines corpus file."""
    documents = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for i, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line=i) from exc
            for key in ("id", "title", "text"):
                if key not in obj or not isinstance(obj[key], str):
                    raise SchemaError(f"missing or non-string field {key!r}", field=key, line=i)
            if obj["id"] in seen:
                raise SchemaError(f"duplicate id {obj['id']!r}", field="id", line=i)
            seen.add(obj["id"])
            documents.append(Document(id=obj["id"], title=obj["title"], body=obj["text"]))
    return documents


def write_corpus(path, documents: Iterable[Document]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for doc in documents:
            handle.write(json.dumps({"id": doc.id, "title": doc.title, "text": doc.body}, ensure_ascii=False))
            handle.write("\n")
            count += 1
    return count


def ingest_corpus(path) -> RetrievalIndex:
    """Build the lexical index from a corpus file."""
    return RetrievalIndex(load_corpus(path))


def _padding_order(query: str, pool_size: int) -> list[int]:
    # Stable across processes; rotates the distractor pool per query so
    # distinct queries observe distinct padding sets.
    if pool_size == 0:
        return []
    start = zlib.crc32(" ".join(normalize_answer(query)).encode("utf-8")) % pool_size
    return [(start + i) % pool_size for i in range(pool_size)]


def oracle_retrieve(task: "SyntheticTask", query: str, k: int = 3) -> list[Document]:
    """Rule-based retrieval for a synthetic task.

    The document keyed by each entity named in the query comes first
    (chain entities in hop order, then distractor entities); remaining
    slots are padded with distractor documents in a query-dependent but
    deterministic rotation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    tokens = set(normalize_answer(query))
    results: list[Document] = []
    seen: set[str] = set()

    def add(doc: Document):
        if doc.id not in seen and len(results) < k:
            seen.add(doc.id)
            results.append(doc)

    for entity, doc in task.entity_documents():
        if entity.lower() in tokens:
            add(doc)
    pool = task.distractor_docs
    for idx in _padding_order(query, len(pool)):
        add(pool[idx])
    return results


class OracleRetriever:
    """Retriever facade bound to one synthetic task."""

    def __init__(self, task: "SyntheticTask"):
        self.task = task

    def retrieve(self, query: str, k: int = 3) -> list[Document]:
        return oracle_retrieve(self.task, query, k)
