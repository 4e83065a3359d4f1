"""Synthetic distillation data from community question-answer pairs.

Per seed: every link cited by the answer is fetched and annotated by the
teacher against the original question; then the teacher proposes related
questions, one is sampled, searched on the web, and one sampled result is
annotated against it. Each annotation becomes one record.
"""

from __future__ import annotations

import hashlib
import logging
import random
import re
import unicodedata
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import ExternalServiceError, ParseError, ValidationError
from .gateway import Backend, ChatRequest, complete
from .models import Document, PathLike, _iter_json_lines, read_json_lines, write_json_lines
from .prompts import render_related_queries_prompt, render_teacher_prompt
from .rerank import LABELS, parse_rerank_output
from .web import Fetcher, SearchError, WebSearchClient, extract_links, html_to_text

logger = logging.getLogger(__name__)

PROVENANCE = ("linked", "websearch")
COUNT_KEYS = (
    "seeds",
    "linked_found",
    "fetched",
    "fetch_failed",
    "annotated",
    "skipped",
    "search_failed",
    "websearch_ok",
)

_NUMBERED = re.compile(r"^\s*\(?\d+[.)]\s*(.*?)\s*$")


@dataclass(frozen=True)
class SeedPair:
    query: str
    answer: str
    community: str
    source_id: str

    def __post_init__(self):
        if not self.query.strip() or not self.answer.strip():
            raise ValidationError(f"seed {self.source_id!r}: query and answer must be non-empty")


@dataclass(frozen=True)
class SynthRecord:
    query: str
    doc: Document
    explanation: str
    label: int
    provenance: str
    teacher_model: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"label must be in {{0,1,2}}, got {self.label!r}")
        if self.provenance not in PROVENANCE:
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "doc_id": self.doc.id,
            "doc_text": self.doc.text,
            "explanation": self.explanation,
            "label": self.label,
            "provenance": self.provenance,
            "teacher_model": self.teacher_model,
        }

    @classmethod
    def from_json(cls, obj: dict) -> SynthRecord:
        return cls(
            query=obj["query"],
            doc=Document(obj["doc_id"], obj["doc_text"]),
            explanation=obj["explanation"],
            label=int(obj["label"]),
            provenance=obj["provenance"],
            teacher_model=obj["teacher_model"],
        )


def load_seeds(path: PathLike) -> list[SeedPair]:
    seeds = []
    for lineno, obj in _iter_json_lines(path):
        try:
            seeds.append(SeedPair(str(obj["query"]), str(obj["answer"]), str(obj["community"]), str(obj["id"])))
        except KeyError as exc:
            raise ParseError(f"seed missing field {exc.args[0]!r}", path, lineno) from None
        except ValidationError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return seeds


def group_by_community(seeds: Iterable[SeedPair]) -> dict[str, list[SeedPair]]:
    groups: dict[str, list[SeedPair]] = {}
    for s in seeds:
        groups.setdefault(s.community, []).append(s)
    return groups


def round_robin_sample(groups: Mapping[str, Sequence[SeedPair]], n: int, rng_seed: int | str) -> list[SeedPair]:
    """Cycle communities in sorted order, drawing one shuffled item from each per cycle."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    rng = random.Random(f"{rng_seed}:round_robin")
    pools = {}
    for name in sorted(groups):
        items = list(groups[name])
        rng.shuffle(items)
        pools[name] = items
    out: list[SeedPair] = []
    cursor = 0
    while len(out) < n:
        drew = False
        for name in sorted(pools):
            if len(out) >= n:
                break
            if cursor < len(pools[name]):
                out.append(pools[name][cursor])
                drew = True
        if not drew:
            break
        cursor += 1
    return out


def normalize_query(text: str) -> str:
    """Lowercase, drop punctuation and symbols, collapse whitespace."""
    kept = "".join(
        ch if not unicodedata.category(ch).startswith(("P", "S")) else " " for ch in text.lower()
    )
    return " ".join(kept.split())


def contamination_filter(seeds: Sequence[SeedPair], exclusion: Iterable[str]) -> tuple[list[SeedPair], int]:
    excluded = {normalize_query(q) for q in exclusion}
    kept = [s for s in seeds if normalize_query(s.query) not in excluded]
    return kept, len(seeds) - len(kept)


def annotate(
    teacher: Backend,
    query: str,
    doc_text: str,
    retries: int = 1,
    template_dir: PathLike | None = None,
) -> tuple[str, int] | None:
    """Teacher explanation and label, or None when no label parses after retries."""
    messages = render_teacher_prompt(query, doc_text, template_dir=template_dir)
    request = ChatRequest.greedy(messages)
    for _ in range(retries + 1):
        try:
            out = parse_rerank_output(complete(teacher, request)[0].text)
        except ExternalServiceError as exc:
            raise _with_context(exc, query, doc_text) from exc
        if out.parse_ok:
            return out.explanation, out.label
    return None


def _with_context(exc: ExternalServiceError, query: str, doc_text: str) -> ExternalServiceError:
    return ExternalServiceError(f"teacher failed for query {query[:60]!r}, doc {doc_text[:40]!r}: {exc}")


def parse_numbered_list(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        m = _NUMBERED.match(line)
        if m and m.group(1):
            out.append(m.group(1))
    return out


def generate_related_queries(
    teacher: Backend,
    seed: SeedPair,
    linked_docs: Sequence[str] = (),
    template_dir: PathLike | None = None,
) -> list[str]:
    messages = render_related_queries_prompt(
        seed.query, html_to_text(seed.answer) or seed.answer, list(linked_docs), template_dir=template_dir
    )
    return parse_numbered_list(complete(teacher, ChatRequest.greedy(messages))[0].text)


def generate_synth(
    seed: SeedPair,
    teacher: Backend,
    search: WebSearchClient,
    fetcher: Fetcher,
    rng: random.Random,
    counts: Counter | None = None,
    template_dir: PathLike | None = None,
) -> list[SynthRecord]:
    """All records for one seed: annotated linked docs, then at most one web record."""
    counts = counts if counts is not None else Counter()
    model = getattr(teacher, "model", "unknown")
    records: list[SynthRecord] = []

    links = extract_links(seed.answer)
    counts["linked_found"] += len(links)
    fetched_texts: list[str] = []
    for url in links:
        text = _fetch(fetcher, url, counts)
        if text is None:
            continue
        fetched_texts.append(text)
        ann = annotate(teacher, seed.query, text, template_dir=template_dir)
        if ann is None:
            counts["skipped"] += 1
            continue
        counts["annotated"] += 1
        records.append(SynthRecord(seed.query, Document(url, text), ann[0], ann[1], "linked", model))

    related = generate_related_queries(teacher, seed, fetched_texts, template_dir=template_dir)
    if not related:
        return records
    related_query = rng.choice(related)
    try:
        results = search.search(related_query)[:10]
    except (SearchError, ExternalServiceError) as exc:
        logger.warning("search failed for %r: %s", related_query, exc)
        counts["search_failed"] += 1
        return records
    if not results:
        return records
    hit = rng.choice(results)
    if hit.text:
        text = html_to_text(hit.text)
        counts["fetched" if text else "fetch_failed"] += 1
    else:
        text = _fetch(fetcher, hit.url, counts)
    if not text:
        return records
    ann = annotate(teacher, related_query, text, template_dir=template_dir)
    if ann is None:
        counts["skipped"] += 1
        return records
    counts["annotated"] += 1
    counts["websearch_ok"] += 1
    records.append(SynthRecord(related_query, Document(hit.url, text), ann[0], ann[1], "websearch", model))
    return records


def _fetch(fetcher: Fetcher, url: str, counts: Counter) -> str | None:
    try:
        text = fetcher.fetch(url)
    except ExternalServiceError as exc:
        logger.warning("fetch failed: %s", exc)
        counts["fetch_failed"] += 1
        return None
    if not text.strip():
        logger.warning("fetch of %s gave no text", url)
        counts["fetch_failed"] += 1
        return None
    counts["fetched"] += 1
    return text


def seed_rng(rng_seed: int | str, seed: SeedPair) -> random.Random:
    """Independent stream per seed so concurrency cannot change the draws."""
    return random.Random(f"{rng_seed}:datagen:{seed.source_id}")


def run_datagen(
    seeds: Sequence[SeedPair],
    teacher: Backend,
    search: WebSearchClient,
    fetcher: Fetcher,
    rng_seed: int | str,
    concurrency: int = 4,
    template_dir: PathLike | None = None,
) -> tuple[list[SynthRecord], dict[str, int], list[int]]:
    """Process seeds concurrently; returns records, totals and per-seed record counts."""

    def one(seed: SeedPair) -> tuple[list[SynthRecord], Counter]:
        c: Counter = Counter()
        return generate_synth(seed, teacher, search, fetcher, seed_rng(rng_seed, seed), c, template_dir), c

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(one, seeds))
    totals = Counter({"seeds": len(seeds)})
    records: list[SynthRecord] = []
    per_seed: list[int] = []
    for recs, c in results:
        totals.update(c)
        records.extend(recs)
        per_seed.append(len(recs))
    return records, {k: totals.get(k, 0) for k in COUNT_KEYS}, per_seed


def _record_key(r: SynthRecord) -> tuple:
    digest = hashlib.sha256(r.explanation.encode("utf-8")).hexdigest()
    return (r.query, r.doc.id, r.provenance, r.label, digest)


def emit_synth_dataset(records: Sequence[SynthRecord], path: PathLike, rng_seed: int | str = 0) -> None:
    """Write JSONL after a canonical sort and a seeded shuffle."""
    ordered = sorted(records, key=_record_key)
    random.Random(f"{rng_seed}:shuffle").shuffle(ordered)
    write_json_lines((r.to_json() for r in ordered), path)


def load_synth_dataset(path: PathLike) -> list[SynthRecord]:
    out = []
    for i, obj in enumerate(read_json_lines(path), start=1):
        try:
            out.append(SynthRecord.from_json(obj))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad synth record: {exc}", path, i) from None
    return out
