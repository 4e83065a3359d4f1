"""nDCG@k evaluation with per-domain aggregation, and paired t-tests."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .errors import ValidationError
from .models import RunEntry, run_to_rankings

logger = logging.getLogger(__name__)


def ndcg_at_k(ranking: Sequence[str], gains: Mapping[str, int], k: int = 10) -> float:
    """Linear-gain nDCG; 0.0 when no document has positive gain."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    dcg = 0.0
    for i, doc_id in enumerate(ranking[:k]):
        g = gains.get(doc_id, 0)
        if g:
            dcg += g / math.log2(i + 2)
    ideal = sorted((g for g in gains.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


@dataclass
class EvalReport:
    k: int
    per_query: dict[str, float] = field(default_factory=dict)
    per_domain: dict[str, float] = field(default_factory=dict)
    overall: float = 0.0
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "metric": f"ndcg@{self.k}",
            "overall": self.overall,
            "per_domain": self.per_domain,
            "per_query": self.per_query,
            "missing_queries": self.missing,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def to_table(self, label: str = "run") -> str:
        """Aligned columns: one per domain in report order, then the average."""
        headers = ["run", *self.per_domain, "Avg."]
        values = [label, *(f"{100 * v:.1f}" for v in self.per_domain.values()), f"{100 * self.overall:.1f}"]
        widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
        head = "  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(headers, widths)))
        row = "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(values, widths)))
        return f"{head}\n{row}\n"


def evaluate_run(
    run: Iterable[RunEntry] | Mapping[str, Sequence[str]],
    qrels: Mapping[str, Mapping[str, int]],
    query_domains: Mapping[str, str],
    k: int = 10,
    domain_order: Sequence[str] | None = None,
) -> EvalReport:
    """Per-query nDCG@k, unweighted per-domain means, and their unweighted mean.

    Every query in ``qrels`` is scored; those absent from the run score 0
    and are listed in ``missing``.
    """
    rankings = dict(run) if isinstance(run, Mapping) else run_to_rankings(run)
    for qid in rankings:
        if qid not in qrels:
            raise ValidationError(f"run query {qid!r} has no qrels entry")
        if qid not in query_domains:
            raise ValidationError(f"run query {qid!r} has no known domain")
    report = EvalReport(k)
    by_domain: dict[str, list[float]] = {}
    for qid, gains in qrels.items():
        domain = query_domains.get(qid)
        if domain is None:
            raise ValidationError(f"qrels query {qid!r} has no known domain")
        if qid in rankings:
            score = ndcg_at_k(rankings[qid], gains, k)
        else:
            score = 0.0
            report.missing.append(qid)
        report.per_query[qid] = score
        by_domain.setdefault(domain, []).append(score)
    if report.missing:
        logger.warning("%d qrels queries missing from run, scored 0", len(report.missing))

    order = [d for d in (domain_order or []) if d in by_domain]
    order += [d for d in _first_seen(query_domains.values()) if d in by_domain and d not in order]
    report.per_domain = {d: sum(by_domain[d]) / len(by_domain[d]) for d in order}
    if report.per_domain:
        report.overall = sum(report.per_domain.values()) / len(report.per_domain)
    return report


def _first_seen(items: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for it in items:
        seen.setdefault(it, None)
    return list(seen)


# --- significance --------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    mean_difference: float

    @property
    def significant(self) -> bool:
        return self.p < 0.05

    def to_json(self) -> dict:
        return {"t": self.t, "p": self.p, "n": self.n, "mean_difference": self.mean_difference}


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * regularized_beta(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def student_t_cdf(t: float, df: float) -> float:
    return 1.0 - student_t_sf(t, df)


def paired_t_test(scores_a: Mapping[str, float], scores_b: Mapping[str, float]) -> TTestResult:
    """Two-sided paired t-test over the queries both runs scored.

    All-zero differences give t=0, p=1; constant nonzero differences give
    an infinite t and p=0.
    """
    common = sorted(set(scores_a) & set(scores_b))
    n = len(common)
    if n < 2:
        raise ValidationError(f"paired t-test needs >= 2 common queries, got {n}")
    diffs = [scores_a[q] - scores_b[q] for q in common]
    mean = sum(diffs) / n
    if all(d == 0.0 for d in diffs):
        return TTestResult(0.0, 1.0, n, 0.0)
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0 or all(d == diffs[0] for d in diffs):
        return TTestResult(math.copysign(math.inf, mean), 0.0, n, mean)
    t = mean / math.sqrt(var / n)
    p = min(1.0, max(0.0, 2.0 * student_t_sf(abs(t), n - 1)))
    return TTestResult(t, p, n, mean)
