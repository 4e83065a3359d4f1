"""First-stage retrieval: BM25 inverted index and dense dot-product search."""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
import pickle
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .models import Corpus, Document, PathLike, _iter_json_lines

logger = logging.getLogger(__name__)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 100

_SPLIT = re.compile(r"[\W_]+")


@dataclass(frozen=True)
class RetrievalResult:
    doc_id: str
    score: float
    rank: int


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric character."""
    return [t for t in _SPLIT.split(text.lower()) if t]


@dataclass
class Bm25Index:
    """Inverted index with per-term postings of ``(doc ordinal, tf)``.

    Postings are append-only: adding a document never rewrites existing
    entries, so ordinals stay sorted.
    """

    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    doc_lengths: list[int] = field(default_factory=list)
    doc_ids: list[str] = field(default_factory=list)
    total_length: int = 0

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        return self.total_length / self.doc_count if self.doc_count else 0.0

    def add_document(self, doc_id: str, text: str) -> None:
        ordinal = len(self.doc_ids)
        terms = tokenize(text)
        for term, tf in Counter(terms).items():
            self.postings.setdefault(term, []).append((ordinal, tf))
        self.doc_ids.append(doc_id)
        self.doc_lengths.append(len(terms))
        self.total_length += len(terms)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def search(self, query: str, k: int = DEFAULT_TOP_K) -> list[RetrievalResult]:
        return bm25_search(self, query, k)


def build_index(corpus: Corpus | list[Document], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    index = Bm25Index(k1=k1, b=b)
    for doc in corpus:
        index.add_document(doc.id, doc.text)
    return index


def bm25_search(index: Bm25Index, query: str, k: int = DEFAULT_TOP_K) -> list[RetrievalResult]:
    """Top-k documents by Okapi BM25 with the non-negative idf variant.

    Repeated query terms contribute once per occurrence. Documents scoring 0
    are omitted; ties are broken by doc id ascending.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if index.doc_count == 0:
        return []
    scores: dict[int, float] = {}
    avgdl = index.avgdl
    k1, b = index.k1, index.b
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for ordinal, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[ordinal] / avgdl)
            scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
    ids = index.doc_ids
    ranked = heapq.nsmallest(
        k,
        ((-s, ids[o]) for o, s in scores.items() if s > 0.0),
    )
    return [RetrievalResult(doc_id, -neg, rank) for rank, (neg, doc_id) in enumerate(ranked, start=1)]


class EmbeddingStore:
    """Dense vectors keyed by id, all of one dimension."""

    def __init__(self, vectors: dict[str, list[float]] | None = None, dim: int | None = None):
        self.ids: list[str] = []
        rows: list[list[float]] = []
        for id_, vec in (vectors or {}).items():
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise ValidationError(f"vector {id_!r} has length {len(vec)}, expected {dim}")
            self.ids.append(id_)
            rows.append([float(x) for x in vec])
        if dim is not None and dim < 1:
            raise ValidationError("embedding dim must be positive")
        self.dim = dim or 0
        self.matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), self.dim)
        self._pos = {id_: i for i, id_ in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, id_: object) -> bool:
        return id_ in self._pos

    def vector(self, id_: str) -> np.ndarray:
        return self.matrix[self._pos[id_]]


def load_embeddings(path: PathLike) -> EmbeddingStore:
    vectors: dict[str, list[float]] = {}
    dim = None
    for lineno, obj in _iter_json_lines(path):
        id_ = obj.get("id")
        vec = obj.get("vector")
        if not isinstance(id_, str) or not isinstance(vec, list):
            raise ParseError("expected {'id': str, 'vector': [...]}", path, lineno)
        if id_ in vectors:
            raise ParseError(f"duplicate embedding id {id_!r}", path, lineno)
        if dim is None:
            dim = len(vec)
        if len(vec) != dim:
            raise ParseError(f"vector length {len(vec)} != {dim}", path, lineno)
        vectors[id_] = vec
    return EmbeddingStore(vectors, dim)


def dense_search(store: EmbeddingStore, query_vector, k: int = DEFAULT_TOP_K) -> list[RetrievalResult]:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (store.dim,):
        raise ValidationError(f"query vector has shape {q.shape}, store dim is {store.dim}")
    if not len(store):
        return []
    # Row-wise multiply+sum keeps each doc's score independent of its row position.
    scores = (store.matrix * q).sum(axis=1)
    ranked = heapq.nsmallest(k, ((-float(s), id_) for id_, s in zip(store.ids, scores)))
    return [RetrievalResult(id_, -neg, rank) for rank, (neg, id_) in enumerate(ranked, start=1)]


# --- index cache -------------------------------------------------------------

_CACHE_MAGIC = b"DRBM25\n"
CACHE_VERSION = 1


def corpus_hash(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_index(index: Bm25Index, path: PathLike, source_hash: str) -> None:
    header = _CACHE_MAGIC + f"{CACHE_VERSION}\n{source_hash}\n".encode("ascii")
    payload = pickle.dumps(
        (index.k1, index.b, index.postings, index.doc_lengths, index.doc_ids, index.total_length),
        protocol=4,
    )
    Path(path).write_bytes(header + payload)


def load_index(path: PathLike, source_hash: str, k1: float, b: float) -> Bm25Index | None:
    """Return the cached index, or None if absent, stale or unreadable."""
    p = Path(path)
    if not p.exists():
        return None
    data = p.read_bytes()
    try:
        if not data.startswith(_CACHE_MAGIC):
            raise ValueError("bad magic")
        rest = data[len(_CACHE_MAGIC):]
        version, cached_hash, payload = rest.split(b"\n", 2)
        if int(version) != CACHE_VERSION:
            logger.warning("index cache %s has version %s, rebuilding", p, version.decode())
            return None
        if cached_hash.decode("ascii") != source_hash:
            logger.info("index cache %s is stale, rebuilding", p)
            return None
        ck1, cb, postings, lengths, ids, total = pickle.loads(payload)
    except Exception as exc:  # any corruption means rebuild
        logger.warning("index cache %s is corrupted (%s), rebuilding", p, exc)
        return None
    if (ck1, cb) != (k1, b):
        logger.info("index cache %s built with different k1/b, rebuilding", p)
        return None
    return Bm25Index(k1=ck1, b=cb, postings=postings, doc_lengths=lengths, doc_ids=ids, total_length=total)
