"""Command-line entry point: ``distillrank <command> --config pipeline.toml``.

Exit codes: 0 success, 1 validation error, 2 external-service failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import PipelineConfig, describe, load_config, with_overrides
from .datagen import (
    contamination_filter,
    emit_synth_dataset,
    group_by_community,
    load_seeds,
    load_synth_dataset,
    round_robin_sample,
    run_datagen,
)
from .errors import DistillRankError, ExternalServiceError, ValidationError
from .evaluate import EvalReport, evaluate_run, paired_t_test
from .gateway import HttpBackend, MockBackend
from .models import RunEntry, ensure_dir, load_corpus, load_qrels, load_queries, load_run, read_json_lines, write_run
from .refine import (
    CachedRewardClient,
    ChatRewardClient,
    HttpRewardClient,
    MockRewardClient,
    dataset_path,
    emit_sft_dataset,
    load_pairs,
    manifest_path,
    run_iteration,
    write_manifest,
)
from .rerank import RerankError, explanation_rows, rerank, to_run_entries, write_explanations
from .retrieval import (
    RetrievalResult,
    bm25_search,
    build_index,
    corpus_hash,
    dense_search,
    load_embeddings,
    load_index,
    save_index,
)
from .web import BraveSearchClient, FixtureFetcher, FixtureSearchClient, LiveFetcher

logger = logging.getLogger("distillrank")

INDEX_FILE = "bm25.index"


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg: PipelineConfig, command: str, inputs: dict, outputs: dict, extra: dict | None = None) -> Path:
    body = {
        "command": command,
        "version": __version__,
        "config_sha256": cfg.fingerprint(),
        "config": describe(cfg),
        "inputs": {k: _sha256(p) for k, p in sorted(inputs.items()) if p is not None},
        "outputs": {k: _sha256(p) for k, p in sorted(outputs.items())},
    }
    if extra:
        body.update(extra)
    path = Path(cfg.paths.output) / f"{command}.manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _backend(cfg: PipelineConfig, role: str, model: str | None = None):
    gw = cfg.gateway
    model = model or getattr(gw, f"{role}_model")
    if gw.backend == "mock":
        fixture = getattr(gw, f"{role}_fixture")
        if fixture is None:
            raise ValidationError(f"gateway.backend is 'mock' but gateway.{role}_fixture is not set")
        if not Path(fixture).exists():
            raise ValidationError(f"gateway.{role}_fixture does not exist: {fixture}")
        return MockBackend.from_jsonl(fixture, model=model or f"mock-{role}")
    if not gw.base_url or not model:
        raise ValidationError(
            f"no {role} model endpoint configured: set gateway.base_url and gateway.{role}_model "
            "(or gateway.backend = \"mock\" with fixtures)"
        )
    return HttpBackend(
        gw.base_url,
        model,
        api_key_env=gw.api_key_env,
        max_retries=gw.retries,
        max_in_flight=gw.max_in_flight,
        timeout=gw.timeout,
    )


# --- commands ---------------------------------------------------------------------

def _get_index(cfg: PipelineConfig):
    (corpus_path,) = cfg.require("corpus")
    out = ensure_dir(cfg.paths.output)
    digest = corpus_hash(corpus_path)
    cache = out / INDEX_FILE
    index = load_index(cache, digest, cfg.retrieval.k1, cfg.retrieval.b)
    if index is not None:
        return index, True, cache
    index = build_index(load_corpus(corpus_path), cfg.retrieval.k1, cfg.retrieval.b)
    save_index(index, cache, digest)
    return index, False, cache


def cmd_index(cfg: PipelineConfig, args) -> int:
    index, hit, cache = _get_index(cfg)
    print(f"cache hit: {cache}" if hit else f"built index over {index.doc_count} documents: {cache}")
    _write_manifest(cfg, "index", {"corpus": cfg.paths.corpus}, {"index": cache}, {"cache_hit": hit})
    return 0


def cmd_retrieve(cfg: PipelineConfig, args) -> int:
    (queries_path,) = cfg.require("queries")
    queries = load_queries(queries_path)
    k = args.k or cfg.retrieval.k
    mode = cfg.retrieval.mode
    out = ensure_dir(cfg.paths.output)
    inputs = {"queries": queries_path}
    entries: list[RunEntry] = []
    if mode == "bm25":
        index, _, _ = _get_index(cfg)
        inputs["corpus"] = cfg.paths.corpus
        for q in queries:
            entries += _as_run(q.id, bm25_search(index, q.text, k), "bm25")
    else:
        doc_path, query_path = cfg.require("embeddings", "query_embeddings")
        docs, qvecs = load_embeddings(doc_path), load_embeddings(query_path)
        inputs.update(embeddings=doc_path, query_embeddings=query_path)
        for q in queries:
            if q.id not in qvecs:
                raise ValidationError(f"no embedding for query {q.id!r}")
            entries += _as_run(q.id, dense_search(docs, qvecs.vector(q.id), k), "dense")
    path = out / f"run.{mode}.trec"
    write_run(entries, path)
    print(f"wrote {len(entries)} entries for {len(queries)} queries: {path}")
    _write_manifest(cfg, "retrieve", inputs, {"run": path}, {"k": k, "mode": mode})
    return 0


def _as_run(qid: str, results: list[RetrievalResult], tag: str) -> list[RunEntry]:
    return [RunEntry(qid, r.doc_id, r.rank, r.score, tag) for r in results]


def cmd_rerank(cfg: PipelineConfig, args) -> int:
    corpus_path, queries_path = cfg.require("corpus", "queries")
    run_path = Path(args.run) if args.run else Path(cfg.paths.output) / f"run.{cfg.retrieval.mode}.trec"
    if not run_path.exists():
        raise ValidationError(f"first-stage run not found: {run_path}")
    backend = _backend(cfg, "student")
    corpus = load_corpus(corpus_path)
    queries = {q.id: q for q in load_queries(queries_path)}
    first_stage: dict[str, list[RetrievalResult]] = {}
    for e in load_run(run_path):
        first_stage.setdefault(e.query_id, []).append(RetrievalResult(e.doc_id, e.score, e.rank))
    out = ensure_dir(cfg.paths.output)
    entries: list[RunEntry] = []
    rows: list[dict] = []
    parse_failures = 0
    for qid, cands in first_stage.items():
        query = queries.get(qid)
        if query is None:
            raise ValidationError(f"run query {qid!r} not in queries file")
        definition = None
        if args.instruct:
            definition = cfg.relevance_definitions.get(query.domain)
            if definition is None:
                logger.warning("--instruct: no relevance definition for domain %r", query.domain)
        try:
            scored = rerank(query, cands, backend, cfg.rerank, corpus, definition, cfg.paths.templates)
        except RerankError as exc:
            print(f"rerank aborted after {len(set(e.query_id for e in entries))} complete queries: {exc}", file=sys.stderr)
            raise
        parse_failures += sum(not d.parse_ok for d in scored)
        entries += to_run_entries(qid, scored)
        rows += explanation_rows(qid, scored)
    run_out = out / "run.rerank.trec"
    expl_out = out / "explanations.jsonl"
    write_run(entries, run_out)
    write_explanations(rows, expl_out)
    print(f"reranked {len(first_stage)} queries ({parse_failures} unparsed generations): {run_out}")
    _write_manifest(
        cfg,
        "rerank",
        {"corpus": corpus_path, "queries": queries_path, "run": run_path},
        {"run": run_out, "explanations": expl_out},
        {"instruct": bool(args.instruct), "parse_failures": parse_failures},
    )
    return 0


def _load_exclusion(path: Path | None) -> list[str]:
    if path is None:
        return []
    if path.suffix == ".jsonl":
        return [str(o.get("text", o.get("query", ""))) for o in read_json_lines(path)]
    return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def cmd_datagen(cfg: PipelineConfig, args) -> int:
    dg = cfg.datagen
    if dg.mode == "live":
        # Fail before any teacher calls if search is unusable.
        search = BraveSearchClient(
            api_key_env=dg.search_api_key_env, **({"endpoint": dg.search_endpoint} if dg.search_endpoint else {})
        )
        fetcher = LiveFetcher(dg.fetch_timeout, dg.fetch_max_bytes)
    else:
        for name in ("search_fixture", "page_fixture"):
            value = getattr(dg, name)
            if value is None or not Path(value).exists():
                raise ValidationError(f"offline datagen needs datagen.{name} (got {value})")
        search = FixtureSearchClient.from_json(dg.search_fixture)
        fetcher = FixtureFetcher.from_json(dg.page_fixture)
    (seeds_path,) = cfg.require("seeds")
    teacher = _backend(cfg, "teacher")
    seeds = load_seeds(seeds_path)
    exclusion_path = cfg.paths.exclusion
    if exclusion_path is not None and not Path(exclusion_path).exists():
        raise ValidationError(f"paths.exclusion does not exist: {exclusion_path}")
    kept, dropped = contamination_filter(seeds, _load_exclusion(exclusion_path))
    limit = dg.limit if dg.limit is not None else len(kept)
    sampled = round_robin_sample(group_by_community(kept), limit, cfg.seed)
    records, counts, _ = run_datagen(
        sampled, teacher, search, fetcher, cfg.seed, dg.concurrency, cfg.paths.templates
    )
    out = ensure_dir(cfg.paths.output)
    synth = out / "synth.jsonl"
    sft = out / "sft.jsonl"
    emit_synth_dataset(records, synth, cfg.seed)
    emit_sft_dataset(load_synth_dataset(synth), sft, cfg.paths.templates)
    counts = dict(counts, contamination_dropped=dropped, records=len(records))
    print("datagen: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    _write_manifest(
        cfg,
        "datagen",
        {"seeds": seeds_path, "exclusion": exclusion_path, "search_fixture": dg.search_fixture, "page_fixture": dg.page_fixture}
        if dg.mode == "offline"
        else {"seeds": seeds_path, "exclusion": exclusion_path},
        {"synth": synth, "sft": sft},
        {"counts": counts, "mode": dg.mode},
    )
    return 0


def _reward_client(cfg: PipelineConfig):
    io = cfg.refine_io
    if io.reward_backend == "mock":
        if io.reward_fixture is None or not Path(io.reward_fixture).exists():
            raise ValidationError(f"refine.reward_backend is mock but refine.reward_fixture is unusable ({io.reward_fixture})")
        return CachedRewardClient(MockRewardClient.from_jsonl(io.reward_fixture))
    if io.reward_backend == "http":
        if not io.reward_url:
            raise ValidationError("refine.reward_backend is http but refine.reward_url is not set")
        return CachedRewardClient(HttpRewardClient(io.reward_url))
    return CachedRewardClient(ChatRewardClient(_backend(cfg, "reward"), cfg.paths.templates))


def cmd_refine(cfg: PipelineConfig, args) -> int:
    pairs_path = Path(args.pairs) if args.pairs else Path(cfg.paths.output) / "synth.jsonl"
    if not pairs_path.exists():
        raise ValidationError(f"pairs file not found: {pairs_path}")
    refine_cfg = cfg.refine
    if args.k is not None:
        refine_cfg = replace(refine_cfg, k=args.k)
    pairs = load_pairs(pairs_path)
    iterations = [args.iter] if args.iter else list(range(1, refine_cfg.iterations + 1))
    if any(t < 1 or t > refine_cfg.iterations for t in iterations):
        raise ValidationError(f"--iter must be in 1..{refine_cfg.iterations}")
    reward = _reward_client(cfg)
    out = ensure_dir(cfg.paths.output)
    models = cfg.refine_io.iteration_models
    for t in iterations:
        model = models[t - 1] if len(models) >= t else None
        backend = _backend(cfg, "student", model)
        path = dataset_path(out, t)
        report = run_iteration(pairs, backend, reward, refine_cfg, path, t, cfg.seed, cfg.paths.templates)
        write_manifest(
            report,
            manifest_path(path),
            {
                "config_sha256": cfg.fingerprint(),
                "inputs": {"pairs": _sha256(pairs_path)},
                "outputs": {"dataset": _sha256(path)},
                "tau": refine_cfg.tau,
                "m": refine_cfg.m,
                "k": refine_cfg.k,
                "version": __version__,
            },
        )
        print(
            f"iter {t}: pairs={report.pairs} degenerate={report.degenerate} "
            f"kept={report.kept_examples} mean_weight={report.mean_weight:.6f} -> {path}"
        )
    return 0


def _eval_inputs(cfg: PipelineConfig):
    qrels_path, queries_path = cfg.require("qrels", "queries")
    qrels = load_qrels(qrels_path)
    domains = {q.id: q.domain for q in load_queries(queries_path)}
    return qrels, domains, qrels_path, queries_path


def _evaluate_file(cfg: PipelineConfig, run_path: str, k: int, qrels, domains) -> EvalReport:
    p = Path(run_path)
    if not p.exists():
        raise ValidationError(f"run file not found: {p}")
    return evaluate_run(load_run(p), qrels, domains, k, cfg.domains)


def cmd_eval(cfg: PipelineConfig, args) -> int:
    qrels, domains, qrels_path, queries_path = _eval_inputs(cfg)
    k = args.k or 10
    out = ensure_dir(cfg.paths.output)
    outputs = {}
    for run_path in args.runs:
        report = _evaluate_file(cfg, run_path, k, qrels, domains)
        name = Path(run_path).stem
        dest = out / f"eval.{name}.json"
        dest.write_text(report.dumps(), encoding="utf-8")
        outputs[name] = dest
        sys.stdout.write(report.to_table(name))
    inputs = {"qrels": qrels_path, "queries": queries_path}
    inputs.update({f"run:{Path(r).stem}": Path(r) for r in args.runs})
    _write_manifest(cfg, "eval", inputs, outputs, {"k": k})
    return 0


def cmd_compare(cfg: PipelineConfig, args) -> int:
    qrels, domains, qrels_path, queries_path = _eval_inputs(cfg)
    k = args.k or 10
    a = _evaluate_file(cfg, args.run_a, k, qrels, domains)
    b = _evaluate_file(cfg, args.run_b, k, qrels, domains)
    result = paired_t_test(a.per_query, b.per_query)
    out = ensure_dir(cfg.paths.output)
    dest = out / "compare.json"
    body = dict(result.to_json(), ndcg_a=a.overall, ndcg_b=b.overall, k=k)
    dest.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"nDCG@{k}: a={a.overall:.4f} b={b.overall:.4f} diff={result.mean_difference:+.4f} n={result.n}")
    print(f"t={result.t:.6f}")
    print(f"p={result.p:.6g}")
    print("PASS: p < 0.05" if result.significant else "FAIL: p >= 0.05")
    _write_manifest(
        cfg,
        "compare",
        {"qrels": qrels_path, "queries": queries_path, "run_a": Path(args.run_a), "run_b": Path(args.run_b)},
        {"compare": dest},
    )
    return 0


# --- argument parsing -------------------------------------------------------------

COMMANDS = {
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "rerank": cmd_rerank,
    "datagen": cmd_datagen,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline TOML file")
    common.add_argument("--seed", type=int, help="override the config rng seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="distillrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("index", parents=[common], help="build or reuse the BM25 index cache")

    p = sub.add_parser("retrieve", parents=[common], help="first-stage retrieval to a run file")
    p.add_argument("--k", type=int, help="documents per query (default retrieval.k)")

    p = sub.add_parser("rerank", parents=[common], help="LLM rerank a first-stage run")
    p.add_argument("run", nargs="?", help="first-stage run (default <out>/run.<mode>.trec)")
    p.add_argument("--instruct", action="store_true", help="inject per-domain relevance definitions")
    p.add_argument("--alpha", type=float, help="hybrid score weight of the label")

    p = sub.add_parser("datagen", parents=[common], help="build the synthetic distillation dataset")
    p.add_argument("--limit", type=int, help="number of seeds to sample")

    p = sub.add_parser("refine", parents=[common], help="emit reward-filtered weighted datasets")
    p.add_argument("pairs", nargs="?", help="pairs JSONL (default <out>/synth.jsonl)")
    p.add_argument("--iter", type=int, help="run only iteration t")
    p.add_argument("--k", type=int, help="samples per pair")
    p.add_argument("--tau", type=float, help="normalized reward threshold")
    p.add_argument("--m", type=int, help="reward scaling power")

    p = sub.add_parser("eval", parents=[common], help="nDCG@k report for run files")
    p.add_argument("runs", nargs="+")
    p.add_argument("--k", type=int, help="nDCG cutoff (default 10)")

    p = sub.add_parser("compare", parents=[common], help="paired t-test between two runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--k", type=int, help="nDCG cutoff (default 10)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        cfg = with_overrides(
            cfg,
            seed=args.seed,
            out=args.out,
            limit=getattr(args, "limit", None),
            alpha=getattr(args, "alpha", None),
            tau=getattr(args, "tau", None),
            m=getattr(args, "m", None),
            k=getattr(args, "k", None),
            iter=getattr(args, "iter", None),
            instruct=getattr(args, "instruct", None) or None,
        )
        return COMMANDS[args.command](cfg, args)
    except ExternalServiceError as exc:
        print(f"error (external service): {exc}", file=sys.stderr)
        return 2
    except (DistillRankError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
