"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line (also listed in the pytest summary)."""

import hashlib
import math
import random
import shutil
import time

import pytest

from distillrank.cli import main
from distillrank.datagen import emit_synth_dataset, load_synth_dataset, run_datagen
from distillrank.evaluate import evaluate_run, ndcg_at_k, paired_t_test
from distillrank.gateway import MockBackend
from distillrank.models import Corpus, Document, Query, read_json_lines
from distillrank.refine import (
    DEGENERATE,
    MockRewardClient,
    RefineConfig,
    RefinePair,
    Sample,
    SampleGroup,
    filter_by_threshold,
    normalize_rewards,
    run_iteration,
    weight_examples,
)
from distillrank.rerank import RerankConfig, rerank
from distillrank.retrieval import RetrievalResult, bm25_search, build_index

from helpers import SAMPLES, build_pipeline, datagen_fixture, label_responder, ranking_fixture, teacher
from test_retrieval import TOY, TOY_C_SCORES, brute_force_bm25


def report(number, ok, detail=""):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, detail


def brute_ndcg(ranking, gains, k):
    dcg = 0.0
    for i, d in enumerate(ranking[:k]):
        dcg += gains.get(d, 0) / math.log2(i + 2)
    ideal = sorted(gains.values(), reverse=True)[:k]
    idcg = 0.0
    for i, g in enumerate(ideal):
        idcg += g / math.log2(i + 2)
    return dcg / idcg if idcg > 0 else 0.0


def test_criterion_1_bm25_oracle(criterion):
    criterion(1, "BM25 hand-computed and brute-force oracles")
    start = time.perf_counter()
    index = build_index(TOY)
    toy = bm25_search(index, "c")
    ok = [r.doc_id for r in toy] == ["d3", "d2"] and all(
        abs(r.score - TOY_C_SCORES[r.doc_id]) <= 1e-6 for r in toy
    )
    rng = random.Random(1)
    vocab = [f"t{i}" for i in range(12)]
    mismatches = 0
    for _ in range(50):
        docs = [
            Document(f"d{i:02d}", " ".join(rng.choices(vocab, k=rng.randint(1, 12))))
            for i in range(rng.randint(1, 20))
        ]
        query = " ".join(rng.choices(vocab, k=rng.randint(1, 4)))
        k = rng.randint(1, 10)
        got = [(r.doc_id, r.score) for r in bm25_search(build_index(docs), query, k)]
        want = brute_force_bm25(docs, query)[:k]
        if [g[0] for g in got] != [w[0] for w in want] or any(
            abs(g[1] - w[1]) > 1e-9 for g, w in zip(got, want)
        ):
            mismatches += 1
    elapsed = time.perf_counter() - start
    report(1, ok and mismatches == 0 and elapsed < 1.0, f"toy_ok={ok} mismatches={mismatches} time={elapsed:.3f}s")


def test_criterion_2_ndcg_oracle(criterion):
    criterion(2, "nDCG brute-force oracle and fixed example")
    start = time.perf_counter()
    rng = random.Random(2)
    worst = 0.0
    for _ in range(200):
        docs = [f"d{i}" for i in range(rng.randint(1, 8))]
        ranking = rng.sample(docs, len(docs))
        gains = {d: rng.choice([0, 1, 2]) for d in docs}
        k = rng.randint(1, 10)
        worst = max(worst, abs(ndcg_at_k(ranking, gains, k) - brute_ndcg(ranking, gains, k)))
    fixed = ndcg_at_k(["d2", "d1"], {"d1": 1})
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and abs(fixed - 0.63093) <= 1e-5 and elapsed < 1.0
    report(2, ok, f"max_err={worst:.2e} fixed={fixed:.6f} time={elapsed:.3f}s")


def test_criterion_3_hybrid_dominance(criterion):
    criterion(3, "hybrid score orders by (label, retrieval score)")
    rng = random.Random(3)
    violations = 0
    for trial in range(500):
        n = rng.randint(1, 20)
        cands = [RetrievalResult(f"d{i:02d}", rng.uniform(0, 50), i + 1) for i in range(n)]
        labels = {c.doc_id: rng.choice([0, 1, 2]) for c in cands}

        def respond(messages, n_, seed, labels=labels):
            doc_id = messages[-1]["content"].split("Document:\n", 1)[1].split("\n", 1)[0]
            return [f"ok\nRelevance: {labels[doc_id]}"]

        out = rerank(f"q{trial}", cands, MockBackend(responder=respond), RerankConfig(concurrency=1),
                     {c.doc_id: c.doc_id for c in cands})
        keys = [(labels[d.doc_id], d.retrieval_score) for d in out]
        violations += sum(1 for a, b in zip(keys, keys[1:]) if a < b)
    report(3, violations == 0, f"violations={violations}")


def test_criterion_4_reward_math(criterion):
    criterion(4, "reward normalization, threshold and weights")
    checks = {"example": normalize_rewards([2, 4, 6]) == [0.0, 0.5, 1.0]}
    rng = random.Random(4)
    worst = 0.0
    filter_ok = weights_ok = True
    for _ in range(1000):
        rewards = [rng.uniform(-10, 10) for _ in range(rng.randint(2, 12))]
        a, c = rng.uniform(0.1, 10), rng.uniform(-100, 100)
        base = normalize_rewards(rewards)
        moved = normalize_rewards([a * r + c for r in rewards])
        worst = max(worst, max(abs(x - y) for x, y in zip(base, moved)))
        group = SampleGroup("q", "d", "q", "d", [Sample(i, str(i), r, v) for i, (r, v) in enumerate(zip(rewards, base))])
        kept = filter_by_threshold(group, 0.85)
        filter_ok &= {s.index for s in kept} == {i for i, v in enumerate(base) if v >= 0.85}
        weights_ok &= all(abs(e.weight - s.normalized**3) <= 1e-12 for e, s in zip(weight_examples(kept, 3), kept))
    checks.update(invariance=worst <= 1e-12, filter=filter_ok, weights=weights_ok)
    checks["degenerate"] = normalize_rewards([3.0] * 8) is DEGENERATE
    report(4, all(checks.values()), f"{checks} max_shift_scale_err={worst:.1e}")


def test_criterion_4_degenerate_counted(tmp_path):
    pairs = [RefinePair(f"q{i}", f"d{i}", f"query {i}", f"doc {i}") for i in range(3)]
    rep = run_iteration(pairs, MockBackend(default=SAMPLES), MockRewardClient(default=2.0), RefineConfig(), tmp_path / "d.jsonl")
    assert (rep.kept_examples, rep.degenerate) == (0, 3)


def test_criterion_5_record_count_law(criterion, tmp_path):
    criterion(5, "synthetic data record-count law and determinism")
    seeds, search, fetcher, expected = datagen_fixture(20)
    records, counts, per_seed = run_datagen(seeds, teacher(), search, fetcher, rng_seed=5, concurrency=4)
    law = per_seed == expected and len(records) == sum(expected)
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    emit_synth_dataset(records, paths[0], 5)
    again, _, _ = run_datagen(seeds, teacher(), search, fetcher, rng_seed=5, concurrency=1)
    emit_synth_dataset(again, paths[1], 5)
    identical = paths[0].read_bytes() == paths[1].read_bytes()
    round_trip = sorted(load_synth_dataset(paths[0]), key=repr) == sorted(records, key=repr)
    report(5, law and identical and round_trip,
           f"records={len(records)} expected={sum(expected)} identical={identical} round_trip={round_trip}")


def test_criterion_6_refine_fixture(criterion, tmp_path):
    criterion(6, "reward-filtered iteration on the 1..8 reward fixture")
    rewards = MockRewardClient(by_output={t: float(j) for j, t in enumerate(SAMPLES, start=1)})
    pairs = [RefinePair(f"q{i}", f"d{i}", f"query {i}", f"doc {i}") for i in range(4)]
    out = tmp_path / "refine_iter1.jsonl"
    rep = run_iteration(pairs, MockBackend(default=SAMPLES), rewards, RefineConfig(), out)
    rows = read_json_lines(out)
    per_group_ok = all(
        sorted(r["weight"] for r in rows if r["qid"] == p.qid) == pytest.approx([(6 / 7) ** 3, 1.0], abs=1e-12)
        for p in pairs
    )
    counts_ok = (rep.pairs, rep.degenerate, rep.kept_examples) == (4, 0, 8) == (len(pairs), 0, len(rows))
    report(6, per_group_ok and counts_ok, f"rows={len(rows)} weights={sorted({round(r['weight'], 4) for r in rows})}")


def test_criterion_7_rerank_beats_first_stage(criterion):
    criterion(7, "rerank improves nDCG@10 over BM25 by >= 0.1")
    docs, queries, qrels, labels = ranking_fixture(20, 10, flip_rate=0.1, seed=7)
    agreement = sum(labels[p] == qrels[p[0]][p[1]] for p in labels) / len(labels)
    corpus = Corpus.from_documents(docs)
    index = build_index(docs)
    backend = MockBackend(responder=label_responder(queries, docs, labels))
    bm25_runs, rerank_runs = {}, {}
    for q in queries:
        cands = bm25_search(index, q.text, 100)
        bm25_runs[q.id] = [c.doc_id for c in cands]
        rerank_runs[q.id] = [d.doc_id for d in rerank(q, cands, backend, RerankConfig(), corpus)]
    domains = {q.id: q.domain for q in queries}
    before = evaluate_run(bm25_runs, qrels, domains).overall
    after = evaluate_run(rerank_runs, qrels, domains).overall
    ok = len(docs) == 200 and agreement == pytest.approx(0.9) and after - before >= 0.1
    report(7, ok, f"agreement={agreement:.2f} bm25={before:.4f} rerank={after:.4f} delta={after - before:+.4f}")


def test_criterion_8_paired_t_test(criterion):
    criterion(8, "paired t-test identities, textbook fixture, antisymmetry")
    same = paired_t_test({"a": 0.2, "b": 0.4, "c": 0.9}, {"a": 0.2, "b": 0.4, "c": 0.9})
    diffs = [0.1, -0.05, 0.2, 0.0, 0.15]
    res = paired_t_test({f"q{i}": d for i, d in enumerate(diffs)}, {f"q{i}": 0.0 for i in range(5)})
    # mean 0.08, squared deviations sum to 0.043, variance 0.043 / 4
    t_hand = 0.08 / math.sqrt(0.01075 / 5)
    fixture_ok = abs(res.t - t_hand) <= 1e-6 and abs(res.p - 0.159552852698394003) <= 1e-6
    rng = random.Random(8)
    anti_ok = True
    for _ in range(200):
        n = rng.randint(2, 30)
        a = {f"q{i}": rng.random() for i in range(n)}
        b = {f"q{i}": rng.random() for i in range(n)}
        ab, ba = paired_t_test(a, b), paired_t_test(b, a)
        anti_ok &= abs(ab.t + ba.t) <= 1e-9 * max(1.0, abs(ab.t)) and abs(ab.p - ba.p) <= 1e-12
    ok = (same.t, same.p) == (0.0, 1.0) and fixture_ok and anti_ok
    report(8, ok, f"identical=({same.t}, {same.p}) t={res.t:.6f} p={res.p:.6f} antisymmetric={anti_ok}")


PIPELINE = [
    ["index"],
    ["retrieve"],
    ["rerank"],
    ["rerank", "--instruct"],
    ["datagen"],
    ["refine"],
    ["eval", "{out}/run.bm25.trec", "{out}/run.rerank.trec"],
    ["compare", "{out}/run.rerank.trec", "{out}/run.bm25.trec"],
]


def _run_pipeline(config):
    out = config.parent / "out"
    codes = []
    for cmd in PIPELINE:
        codes.append(main([*(a.format(out=out) for a in cmd), "--config", str(config)]))
    files = {
        p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(out.rglob("*"))
        if p.is_file()
    }
    return codes, files


def test_criterion_9_cli_determinism(criterion, tmp_path):
    criterion(9, "full CLI pipeline with mocks is byte-identical and < 60 s")
    config = build_pipeline(tmp_path / "fx", n_queries=20, docs_per_query=10, n_seeds=20)
    start = time.perf_counter()
    codes1, files1 = _run_pipeline(config)
    elapsed = time.perf_counter() - start
    shutil.rmtree(config.parent / "out")
    codes2, files2 = _run_pipeline(config)
    ok = set(codes1 + codes2) == {0} and files1 == files2 and len(files1) >= 15 and elapsed < 60
    report(9, ok, f"files={len(files1)} identical={files1 == files2} exit_codes={codes1} time={elapsed:.2f}s")
