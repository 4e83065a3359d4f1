"""Pointwise LLM reranking with explanation parsing and hybrid scoring.

Each candidate gets a generated explanation ending in a discrete label
(0 non-relevant, 1 partially relevant, 2 highly relevant). The final score
is ``retrieval_score + alpha * label``; with a large alpha the label decides
the band and the retrieval score orders documents within it.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import ExternalServiceError, ValidationError
from .gateway import Backend, ChatRequest, complete
from .models import Corpus, PathLike, Query, RunEntry, write_json_lines
from .prompts import render_rerank_prompt
from .retrieval import RetrievalResult

logger = logging.getLogger(__name__)

LABELS = (0, 1, 2)
RUN_TAG = "interank"

_LABEL_RE = re.compile(r"relevance\**\s*:\s*\**\s*([012])(?!\d)", re.IGNORECASE)
_BARE_RE = re.compile(r"\s*\**([012])\**\.?\s*")


@dataclass(frozen=True)
class RerankOutput:
    explanation: str
    label: int
    parse_ok: bool
    raw_text: str


@dataclass(frozen=True)
class RerankConfig:
    alpha: float = 100.0
    candidates: int = 100
    retries_on_parse_fail: int = 1
    normalize: str = "none"
    max_tokens: int = 1024
    concurrency: int = 8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.candidates < 1:
            raise ValidationError("candidates must be >= 1")
        if self.retries_on_parse_fail < 0:
            raise ValidationError("retries_on_parse_fail must be >= 0")
        if self.normalize not in ("none", "minmax"):
            raise ValidationError(f"normalize must be 'none' or 'minmax', got {self.normalize!r}")


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    retrieval_score: float
    label: int
    combined_score: float
    explanation: str
    parse_ok: bool = True


class RerankError(ExternalServiceError):
    """Gateway failure during reranking; carries how far the run got."""

    def __init__(self, query_id: str, doc_id: str, completed: int, total: int, cause: Exception):
        self.query_id = query_id
        self.doc_id = doc_id
        self.completed = completed
        self.total = total
        super().__init__(
            f"rerank failed at (query {query_id}, doc {doc_id}) after {completed}/{total} "
            f"candidates: {cause}"
        )


def parse_rerank_output(raw_text: str) -> RerankOutput:
    """Extract the final relevance label from a generation.

    Lines are scanned from the end; the first one holding ``Relevance: <l>``
    wins (last occurrence within that line). A bare ``0``/``1``/``2`` is
    accepted only as the last non-empty line. Failure yields label 0.
    """
    lines = raw_text.splitlines()
    last_nonempty = max((i for i, ln in enumerate(lines) if ln.strip()), default=-1)
    for i in range(len(lines) - 1, -1, -1):
        line = lines[i]
        matches = list(_LABEL_RE.finditer(line))
        if matches:
            m = matches[-1]
            head = line[: m.start()].rstrip()
            kept = lines[:i] + ([head] if head else []) + lines[i + 1:]
            return RerankOutput("\n".join(kept).strip(), int(m.group(1)), True, raw_text)
        if i == last_nonempty:
            bare = _BARE_RE.fullmatch(line)
            if bare:
                return RerankOutput("\n".join(lines[:i]).strip(), int(bare.group(1)), True, raw_text)
    return RerankOutput(raw_text, 0, False, raw_text)


def combined_score(retrieval_score: float, label: int, alpha: float = 100.0) -> float:
    if label not in LABELS:
        raise ValidationError(f"label must be in {{0,1,2}}, got {label!r}")
    return retrieval_score + alpha * label


def format_label_line(label: int) -> str:
    return f"Relevance: {label}"


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def label_document(
    backend: Backend,
    messages,
    retries: int,
    max_tokens: int = 1024,
) -> RerankOutput:
    """Greedy generation + parse, retried on parse failure."""
    request = ChatRequest.greedy(messages, max_tokens=max_tokens)
    out = parse_rerank_output(complete(backend, request)[0].text)
    for _ in range(retries):
        if out.parse_ok:
            break
        out = parse_rerank_output(complete(backend, request)[0].text)
    return out


def sort_scored(docs: Sequence[ScoredDoc]) -> list[ScoredDoc]:
    return sorted(docs, key=lambda d: (-d.combined_score, -d.retrieval_score, d.doc_id))


def rerank(
    query: Query | str,
    candidates: Sequence[RetrievalResult],
    backend: Backend,
    config: RerankConfig,
    corpus: Corpus | Mapping[str, str],
    relevance_definition: str | None = None,
    template_dir: PathLike | None = None,
) -> list[ScoredDoc]:
    """Rerank first-stage candidates for one query.

    Generations may run concurrently; the final order depends only on the
    parsed labels, never on completion order.
    """
    if not candidates:
        raise ValidationError("rerank needs at least one candidate")
    qid, qtext = (query.id, query.text) if isinstance(query, Query) else ("", query)
    cands = sorted(candidates, key=lambda c: c.rank)[: config.candidates]

    def text_of(doc_id: str) -> str:
        if isinstance(corpus, Corpus):
            return corpus[doc_id].text
        return corpus[doc_id]

    def work(c: RetrievalResult) -> RerankOutput:
        messages = render_rerank_prompt(qtext, text_of(c.doc_id), relevance_definition, template_dir=template_dir)
        return label_document(backend, messages, config.retries_on_parse_fail, config.max_tokens)

    with ThreadPoolExecutor(max_workers=max(1, config.concurrency)) as pool:
        futures = [pool.submit(work, c) for c in cands]
        outputs: list[RerankOutput] = []
        for i, (c, fut) in enumerate(zip(cands, futures)):
            try:
                outputs.append(fut.result())
            except ExternalServiceError as exc:
                for f in futures[i + 1:]:
                    f.cancel()
                raise RerankError(qid, c.doc_id, i, len(cands), exc) from exc

    retrieval = [c.score for c in cands]
    if config.normalize == "minmax":
        retrieval = _minmax(retrieval)
    scored = [
        ScoredDoc(c.doc_id, r, o.label, combined_score(r, o.label, config.alpha), o.explanation, o.parse_ok)
        for c, r, o in zip(cands, retrieval, outputs)
    ]
    failed = sum(not d.parse_ok for d in scored)
    if failed:
        logger.warning("query %s: %d/%d generations had no parsable label", qid or qtext[:40], failed, len(scored))
    return sort_scored(scored)


def to_run_entries(query_id: str, scored: Sequence[ScoredDoc], tag: str = RUN_TAG) -> list[RunEntry]:
    return [RunEntry(query_id, d.doc_id, rank, d.combined_score, tag) for rank, d in enumerate(scored, start=1)]


def explanation_rows(query_id: str, scored: Sequence[ScoredDoc]) -> list[dict]:
    return [
        {"qid": query_id, "docid": d.doc_id, "label": d.label, "parse_ok": d.parse_ok, "explanation": d.explanation}
        for d in scored
    ]


def write_explanations(rows: Sequence[dict], path: PathLike) -> None:
    write_json_lines(rows, path)
