"""Reward-filtered refinement datasets.

For each (query, document) pair the current student samples k outputs, a
reward client scores them, rewards are min-max normalized within the
group, outputs below the threshold tau are dropped and the rest are
weighted by ``normalized ** m``. The resulting JSONL is what an external
trainer consumes; the loss convention is that ``weight`` multiplies the
sequence log-likelihood of ``completion`` given ``prompt``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import httpx

from .errors import APIError, ExternalServiceError, ParseError, TransportError, ValidationError
from .gateway import Backend, ChatRequest, Messages, complete
from .models import PathLike, _iter_json_lines, write_json_lines
from .prompts import render_rerank_prompt, render_reward_prompt
from .rerank import format_label_line

logger = logging.getLogger(__name__)


class Degenerate(enum.Enum):
    DEGENERATE = "degenerate"


DEGENERATE = Degenerate.DEGENERATE


@dataclass(frozen=True)
class RefineConfig:
    k: int = 8
    tau: float = 0.85
    m: int = 3
    temperature: float = 1.0
    top_p: float = 1.0
    iterations: int = 2
    max_tokens: int = 1024
    concurrency: int = 8

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError(f"k must be >= 2 (normalization needs spread), got {self.k}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must be in [0, 1], got {self.tau}")
        if self.m < 1:
            raise ValidationError(f"m must be a positive integer, got {self.m}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")


@dataclass(frozen=True)
class Sample:
    index: int
    text: str
    reward: float
    normalized: float | None = None


@dataclass
class SampleGroup:
    qid: str
    docid: str
    query: str
    doc_text: str
    samples: list[Sample] = field(default_factory=list)
    degenerate: bool = False


@dataclass(frozen=True)
class WeightedExample:
    prompt: Messages
    completion: str
    weight: float
    qid: str = ""
    docid: str = ""
    sample_index: int = 0

    def to_json(self, iteration: int) -> dict:
        return {
            "prompt": self.prompt,
            "completion": self.completion,
            "weight": self.weight,
            "qid": self.qid,
            "docid": self.docid,
            "iter": iteration,
        }


@dataclass(frozen=True)
class RefinePair:
    qid: str
    docid: str
    query: str
    doc_text: str


def _short_hash(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


def load_pairs(path: PathLike) -> list[RefinePair]:
    """Read (query, document) pairs.

    Accepts synth-dataset rows directly: ``doc_id``/``docid`` and
    ``doc_text``/``document`` are both recognised; missing ids are derived
    from content hashes.
    """
    pairs = []
    for lineno, obj in _iter_json_lines(path):
        query = obj.get("query")
        text = obj.get("doc_text", obj.get("document"))
        if not isinstance(query, str) or not isinstance(text, str) or not query.strip() or not text.strip():
            raise ParseError("pair needs non-empty 'query' and 'doc_text'", path, lineno)
        qid = str(obj.get("qid") or "q-" + _short_hash(query))
        docid = str(obj.get("docid") or obj.get("doc_id") or "d-" + _short_hash(text))
        pairs.append(RefinePair(qid, docid, query, text))
    return pairs


# --- reward normalization, selection, weighting --------------------------------

def normalize_rewards(rewards: Sequence[float]) -> list[float] | Degenerate:
    """Min-max scale to [0, 1]; DEGENERATE when all rewards are equal."""
    if len(rewards) < 2:
        raise ValidationError(f"need at least 2 rewards, got {len(rewards)}")
    lo, hi = min(rewards), max(rewards)
    if hi == lo:
        return DEGENERATE
    span = hi - lo
    return [(r - lo) / span for r in rewards]


def filter_by_threshold(group: SampleGroup, tau: float) -> list[Sample]:
    if group.degenerate:
        raise ValidationError("cannot filter a degenerate group")
    if any(s.normalized is None for s in group.samples):
        raise ValidationError("group has not been normalized")
    return [s for s in group.samples if s.normalized >= tau]


def weight_examples(
    selected: Sequence[Sample],
    m: int,
    prompt: Messages = (),
    qid: str = "",
    docid: str = "",
) -> list[WeightedExample]:
    if not selected:
        raise ValidationError("nothing selected to weight")
    return [
        WeightedExample(list(prompt), s.text, s.normalized**m, qid, docid, s.index) for s in selected
    ]


# --- reward clients -------------------------------------------------------------

class RewardClient(Protocol):
    def score(self, query: str, doc: str, output: str) -> float: ...


def reward_key(query: str, doc: str, output: str) -> str:
    blob = json.dumps([query, doc, output], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class MockRewardClient:
    """Scripted rewards looked up by (query, doc, output) hash, then by output text.

    ``fn`` is consulted before ``default`` for anything not scripted.
    """

    def __init__(
        self,
        by_key: dict[str, float] | None = None,
        by_output: dict[str, float] | None = None,
        default: float | None = None,
        fn: Callable[[str, str, str], float] | None = None,
    ):
        self.by_key = by_key or {}
        self.by_output = by_output or {}
        self.default = default
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path: PathLike) -> MockRewardClient:
        by_key: dict[str, float] = {}
        by_output: dict[str, float] = {}
        default = None
        for lineno, obj in _iter_json_lines(path):
            if "default" in obj:
                default = float(obj["default"])
            elif "output" in obj and "score" in obj:
                if "query" in obj and "document" in obj:
                    by_key[reward_key(obj["query"], obj["document"], obj["output"])] = float(obj["score"])
                else:
                    by_output[obj["output"]] = float(obj["score"])
            else:
                raise ParseError("expected {'output', 'score'} or {'default'}", path, lineno)
        return cls(by_key, by_output, default)

    def score(self, query: str, doc: str, output: str) -> float:
        with self._lock:
            self.calls += 1
        key = reward_key(query, doc, output)
        if key in self.by_key:
            return self.by_key[key]
        if output in self.by_output:
            return self.by_output[output]
        if self.fn is not None:
            return float(self.fn(query, doc, output))
        if self.default is not None:
            return self.default
        raise APIError(404, f"no scripted reward for output {output[:40]!r}")


_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class ChatRewardClient:
    """Reward via a chat model that replies with a number."""

    def __init__(self, backend: Backend, template_dir: PathLike | None = None, max_tokens: int = 16):
        self.backend = backend
        self.template_dir = template_dir
        self.max_tokens = max_tokens

    def score(self, query: str, doc: str, output: str) -> float:
        messages = render_reward_prompt(query, doc, output, template_dir=self.template_dir)
        text = complete(self.backend, ChatRequest.greedy(messages, max_tokens=self.max_tokens))[0].text
        m = _NUMBER.search(text)
        if not m:
            raise APIError(200, f"reward reply has no number: {text[:80]!r}")
        return float(m.group(0))


class HttpRewardClient:
    """``POST {url}`` with ``{query, document, output}``, expecting ``{"score": x}``."""

    def __init__(self, url: str, timeout: float = 60.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def score(self, query: str, doc: str, output: str) -> float:
        try:
            resp = self._client.post(self.url, json={"query": query, "document": doc, "output": output})
        except httpx.TransportError as exc:
            raise TransportError(f"reward request failed: {exc}") from exc
        if not resp.is_success:
            raise APIError(resp.status_code, resp.text)
        try:
            return float(resp.json()["score"])
        except (ValueError, KeyError, TypeError):
            raise APIError(resp.status_code, f"bad reward body: {resp.text[:200]}") from None


class CachedRewardClient:
    """Memoizes scores by (query, doc, output) hash."""

    def __init__(self, inner: RewardClient):
        self.inner = inner
        self._cache: dict[str, float] = {}
        self._lock = threading.Lock()
        self.hits = 0

    def score(self, query: str, doc: str, output: str) -> float:
        key = reward_key(query, doc, output)
        with self._lock:
            if key in self._cache:
                self.hits += 1
                return self._cache[key]
        value = self.inner.score(query, doc, output)
        with self._lock:
            self._cache[key] = value
        return value


# --- sampling and iteration -------------------------------------------------------

def sample_seed(rng_seed: int | str, iteration: int, qid: str, docid: str) -> int:
    digest = hashlib.sha256(f"{rng_seed}:sampling:{iteration}:{qid}:{docid}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def sample_outputs(
    backend: Backend,
    query: str,
    doc: str,
    config: RefineConfig,
    seed: int | None = None,
    template_dir: PathLike | None = None,
) -> list[str]:
    """k outputs from a single n=k request; duplicates are kept."""
    messages = render_rerank_prompt(query, doc, template_dir=template_dir)
    request = ChatRequest(
        messages,
        temperature=config.temperature,
        top_p=config.top_p,
        n=config.k,
        max_tokens=config.max_tokens,
        seed=seed,
    )
    return [c.text for c in complete(backend, request)]


def score_group(
    pair: RefinePair,
    texts: Sequence[str],
    reward: RewardClient,
) -> SampleGroup:
    rewards = [reward.score(pair.query, pair.doc_text, t) for t in texts]
    normalized = normalize_rewards(rewards)
    group = SampleGroup(pair.qid, pair.docid, pair.query, pair.doc_text)
    if normalized is DEGENERATE:
        group.degenerate = True
        group.samples = [Sample(i, t, r) for i, (t, r) in enumerate(zip(texts, rewards))]
    else:
        group.samples = [Sample(i, t, r, n) for i, (t, r, n) in enumerate(zip(texts, rewards, normalized))]
    return group


@dataclass
class IterationReport:
    iteration: int
    pairs: int = 0
    degenerate: int = 0
    kept_examples: int = 0
    mean_weight: float = 0.0
    status: str = "ok"
    error: str | None = None
    model: str = ""

    def to_json(self) -> dict:
        out = {
            "iter": self.iteration,
            "pairs": self.pairs,
            "degenerate": self.degenerate,
            "kept_examples": self.kept_examples,
            "mean_weight": self.mean_weight,
            "status": self.status,
            "model": self.model,
        }
        if self.error:
            out["error"] = self.error
        return out


def dataset_path(out_dir: PathLike, iteration: int) -> Path:
    return Path(out_dir) / f"refine_iter{iteration}.jsonl"


def run_iteration(
    pairs: Sequence[RefinePair],
    backend: Backend,
    reward: RewardClient,
    config: RefineConfig,
    out_path: PathLike,
    iteration: int = 1,
    rng_seed: int | str = 0,
    template_dir: PathLike | None = None,
) -> IterationReport:
    """Sample, score, normalize, filter and weight every pair; write D_t.

    Degenerate groups are skipped and counted. Rows are ordered by
    (qid, docid, sample index) so the file does not depend on scheduling.
    A client failure writes an ``aborted`` manifest next to ``out_path``
    covering the pairs finished before the failing one, then re-raises.
    """
    report = IterationReport(iteration, model=getattr(backend, "model", ""))

    def one(pair: RefinePair) -> tuple[SampleGroup, list[WeightedExample]]:
        seed = sample_seed(rng_seed, iteration, pair.qid, pair.docid)
        texts = sample_outputs(backend, pair.query, pair.doc_text, config, seed, template_dir)
        group = score_group(pair, texts, reward)
        if group.degenerate:
            return group, []
        prompt = render_rerank_prompt(pair.query, pair.doc_text, template_dir=template_dir)
        kept = filter_by_threshold(group, config.tau)
        return group, weight_examples(kept, config.m, prompt, pair.qid, pair.docid)

    examples: list[WeightedExample] = []
    with ThreadPoolExecutor(max_workers=max(1, config.concurrency)) as pool:
        futures = [pool.submit(one, p) for p in pairs]
        for pair, fut in zip(pairs, futures):
            try:
                group, rows = fut.result()
            except ExternalServiceError as exc:
                for f in futures:
                    f.cancel()
                report.status = "aborted"
                report.error = f"(query {pair.qid}, doc {pair.docid}): {exc}"
                _finish(report, examples)
                write_manifest(report, manifest_path(out_path))
                raise
            report.pairs += 1
            if group.degenerate:
                report.degenerate += 1
            examples.extend(rows)

    _finish(report, examples)
    examples.sort(key=lambda e: (e.qid, e.docid, e.sample_index))
    write_json_lines((e.to_json(iteration) for e in examples), out_path)
    return report


def _finish(report: IterationReport, examples: Sequence[WeightedExample]) -> None:
    report.kept_examples = len(examples)
    report.mean_weight = sum(e.weight for e in examples) / len(examples) if examples else 0.0


def manifest_path(out_path: PathLike) -> Path:
    p = Path(out_path)
    return p.with_name(p.stem + ".manifest.json")


def write_manifest(report: IterationReport, path: PathLike, extra: dict | None = None) -> None:
    body = report.to_json()
    if extra:
        body.update(extra)
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sft_completion(explanation: str, label: int) -> str:
    line = format_label_line(label)
    return f"{explanation}\n{line}" if explanation else line


def emit_sft_dataset(records, path: PathLike, template_dir: PathLike | None = None) -> int:
    """Distillation rows ``{"prompt", "completion", "weight": 1.0}`` from synth records."""
    rows = [
        {
            "prompt": render_rerank_prompt(r.query, r.doc.text, template_dir=template_dir),
            "completion": sft_completion(r.explanation, r.label),
            "weight": 1.0,
        }
        for r in records
    ]
    write_json_lines(rows, path)
    return len(rows)
