"""Core data types and readers/writers for corpora, queries, qrels and runs.

Corpus and query files are JSON-lines; qrels and runs follow the TREC text
conventions (``qid 0 docid gain`` and ``qid Q0 docid rank score tag``).
All files are strict UTF-8.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

PathLike = str | os.PathLike


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    title: str | None = None
    domain: str | None = None

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "text": self.text}
        if self.title is not None:
            out["title"] = self.title
        if self.domain is not None:
            out["domain"] = self.domain
        return out


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    domain: str

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "domain": self.domain}


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str

    def to_line(self) -> str:
        return f"{self.query_id} Q0 {self.doc_id} {self.rank} {self.score:.6f} {self.tag}"


@dataclass(frozen=True)
class Corpus:
    """Ordered documents plus an id index."""

    documents: tuple[Document, ...] = ()
    index: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_documents(cls, documents: Iterable[Document]) -> Corpus:
        docs = tuple(documents)
        index: dict[str, int] = {}
        for i, doc in enumerate(docs):
            _check_document(doc)
            if doc.id in index:
                raise ValidationError(f"duplicate document id {doc.id!r}")
            index[doc.id] = i
        return cls(docs, index)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self.index

    def __getitem__(self, doc_id: str) -> Document:
        return self.documents[self.index[doc_id]]

    def get(self, doc_id: str) -> Document | None:
        i = self.index.get(doc_id)
        return None if i is None else self.documents[i]

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.documents]


class Qrels(dict):
    """``{qid: {docid: gain}}``; ``duplicates`` counts overridden lines."""

    duplicates: int = 0


def _check_document(doc: Document) -> None:
    if not isinstance(doc.id, str) or not doc.id:
        raise ValidationError("document id must be a non-empty string")
    if not isinstance(doc.text, str) or not doc.text.strip():
        raise ValidationError(f"document {doc.id!r} has empty text")


def _iter_lines(path: PathLike) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, decoded line) with strict UTF-8 decoding."""
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ParseError(f"invalid UTF-8 ({exc.reason})", path, lineno) from None
            yield lineno, line.rstrip("\r\n")


def _iter_json_lines(path: PathLike) -> Iterator[tuple[int, dict]]:
    for lineno, line in _iter_lines(path):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", path, lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", path, lineno)
        yield lineno, obj


def _require_str(obj: dict, key: str, path: PathLike, lineno: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise ParseError(f"missing or non-string field {key!r}", path, lineno)
    return value


def load_corpus(path: PathLike) -> Corpus:
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, obj in _iter_json_lines(path):
        doc_id = _require_str(obj, "id", path, lineno)
        text = _require_str(obj, "text", path, lineno)
        if not doc_id:
            raise ParseError("empty document id", path, lineno)
        if not text.strip():
            raise ParseError(f"document {doc_id!r} has empty text", path, lineno)
        if doc_id in seen:
            raise ParseError(f"duplicate document id {doc_id!r}", path, lineno)
        seen.add(doc_id)
        docs.append(Document(doc_id, text, obj.get("title"), obj.get("domain")))
    return Corpus.from_documents(docs)


def write_corpus(documents: Iterable[Document], path: PathLike) -> None:
    _write_json_lines((d.to_json() for d in documents), path)


def load_queries(path: PathLike) -> list[Query]:
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, obj in _iter_json_lines(path):
        qid = _require_str(obj, "id", path, lineno)
        if qid in seen:
            raise ParseError(f"duplicate query id {qid!r}", path, lineno)
        seen.add(qid)
        queries.append(
            Query(qid, _require_str(obj, "text", path, lineno), _require_str(obj, "domain", path, lineno))
        )
    return queries


def write_queries(queries: Iterable[Query], path: PathLike) -> None:
    _write_json_lines((q.to_json() for q in queries), path)


def load_qrels(path: PathLike) -> Qrels:
    qrels = Qrels()
    duplicates = 0
    for lineno, line in _iter_lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", path, lineno)
        qid, _, docid, gain_text = parts
        try:
            gain = int(gain_text)
        except ValueError:
            raise ParseError(f"non-integer gain {gain_text!r}", path, lineno) from None
        if gain < 0:
            raise ParseError(f"negative gain {gain}", path, lineno)
        judged = qrels.setdefault(qid, {})
        if docid in judged:
            duplicates += 1
        judged[docid] = gain
    if duplicates:
        logger.warning("%s: %d duplicate qrels lines overridden", path, duplicates)
    qrels.duplicates = duplicates
    return qrels


def write_qrels(qrels: dict[str, dict[str, int]], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, judged in qrels.items():
            for docid, gain in judged.items():
                fh.write(f"{qid} 0 {docid} {gain}\n")


def validate_run(entries: Iterable[RunEntry]) -> None:
    """Check rank contiguity, score order and pair uniqueness per query."""
    by_query: dict[str, list[RunEntry]] = {}
    pairs: set[tuple[str, str]] = set()
    for e in entries:
        if (e.query_id, e.doc_id) in pairs:
            raise ValidationError(f"duplicate run pair ({e.query_id}, {e.doc_id})")
        pairs.add((e.query_id, e.doc_id))
        for name in ("query_id", "doc_id", "tag"):
            value = getattr(e, name)
            if not value or any(c.isspace() for c in value):
                raise ValidationError(f"run {name} {value!r} must be non-empty without whitespace")
        by_query.setdefault(e.query_id, []).append(e)
    for qid, rows in by_query.items():
        rows = sorted(rows, key=lambda e: e.rank)
        for expected, e in enumerate(rows, start=1):
            if e.rank != expected:
                raise ValidationError(f"query {qid}: rank gap, expected {expected}, found {e.rank}")
        for prev, cur in zip(rows, rows[1:]):
            if cur.score > prev.score:
                raise ValidationError(
                    f"query {qid}: score inversion at rank {cur.rank} ({cur.score} > {prev.score})"
                )


def write_run(entries: Iterable[RunEntry], path: PathLike) -> None:
    entries = list(entries)
    validate_run(entries)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_line() + "\n")


def load_run(path: PathLike) -> list[RunEntry]:
    entries: list[RunEntry] = []
    for lineno, line in _iter_lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", path, lineno)
        qid, _, docid, rank_text, score_text, tag = parts
        try:
            rank = int(rank_text)
            score = float(score_text)
        except ValueError:
            raise ParseError("non-numeric rank or score", path, lineno) from None
        entries.append(RunEntry(qid, docid, rank, score, tag))
    try:
        validate_run(entries)
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None
    return entries


def run_to_rankings(entries: Iterable[RunEntry]) -> dict[str, list[str]]:
    """Group a run into ``{qid: [docid, ...]}`` ordered by rank."""
    grouped: dict[str, list[RunEntry]] = {}
    for e in entries:
        grouped.setdefault(e.query_id, []).append(e)
    return {qid: [e.doc_id for e in sorted(rows, key=lambda e: e.rank)] for qid, rows in grouped.items()}


def _write_json_lines(rows: Iterable[dict], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")


def read_json_lines(path: PathLike) -> list[dict]:
    return [obj for _, obj in _iter_json_lines(path)]


def write_json_lines(rows: Iterable[dict], path: PathLike) -> None:
    _write_json_lines(rows, path)


def ensure_dir(path: PathLike) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
