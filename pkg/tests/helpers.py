"""Scripted fixtures shared by the module and acceptance tests."""

from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path

from distillrank.datagen import SeedPair
from distillrank.gateway import MockBackend
from distillrank.models import Document, Query, write_corpus, write_qrels, write_queries
from distillrank.prompts import render_related_queries_prompt, render_rerank_prompt, render_teacher_prompt
from distillrank.web import FixtureFetcher, FixtureSearchClient, extract_links, html_to_text

GARBLE = "UNPARSEABLE"


def stable_label(text: str) -> int:
    return int(hashlib.sha256(text.encode()).hexdigest(), 16) % 3


def teacher_responder(messages, n, seed):
    """Numbered related queries for the query-writing prompt, labels otherwise."""
    system, user = messages[0]["content"], messages[-1]["content"]
    if system.startswith("You write search queries"):
        question = user.split("Question:\n", 1)[1].split("\n", 1)[0] if "Question:\n" in user else user[:40]
        if "NOLIST" in user:
            return ["I have no suggestions."] * n
        return [f"1. {question} related A\n2.   {question} related B  \n"] * n
    if GARBLE in user:
        return ["I am not sure about this one."] * n
    return [f"The document discusses the topic.\nRelevance: {stable_label(user)}"] * n


def teacher() -> MockBackend:
    return MockBackend(responder=teacher_responder, model="mock-teacher")


def datagen_fixture(n_seeds: int = 20):
    """Seeds plus search/fetch fixtures whose expected record counts are known by construction.

    Seed i cites ``i % 4`` links. Every third link has no page (fetch failure),
    every fifth page is unparseable for the teacher. Searches fail for seeds
    with ``i % 5 == 4``; for ``i % 5 == 3`` every result page is unparseable.
    """
    seeds, pages, search, fail, expected = [], {}, {}, set(), []
    link_no = 0
    for i in range(n_seeds):
        urls = []
        linked_ok = 0
        for _ in range(i % 4):
            url = f"https://site{link_no}.example.org/page"
            urls.append(url)
            if link_no % 3 != 2:
                garbled = link_no % 5 == 4
                pages[url] = f"<html><body><p>Page {link_no} text. {GARBLE if garbled else ''}</p></body></html>"
                linked_ok += not garbled
            link_no += 1
        body = " ".join(f'<a href="{u}">ref</a>' for u in urls)
        query = f"question number {i} about topic {i % 3}"
        seeds.append(SeedPair(query, f"An answer. {body}", f"comm{i % 3}", f"s{i:02d}"))
        web_ok = 0
        for suffix in ("related A", "related B"):
            rq = f"{query} {suffix}"
            if i % 5 == 4:
                fail.add(rq)
                continue
            results = []
            for r in range(3):
                url = f"https://web.example.com/{i}/{suffix[-1]}/{r}"
                text = f"web result {r} for {rq}" + (f" {GARBLE}" if i % 5 == 3 else "")
                results.append({"url": url, "title": f"t{r}", "description": "d"})
                pages[url] = text
            search[rq] = results
        if i % 5 not in (3, 4):
            web_ok = 1
        expected.append(linked_ok + web_ok)
    return seeds, FixtureSearchClient(search, fail), FixtureFetcher(pages), expected


# --- ranking and pipeline fixtures ------------------------------------------------

FILLER = [f"filler{i}" for i in range(60)]
DOMAINS = ["biology", "economics", "coding", "math"]
SAMPLES = [f"Sample {j} reasoning about the pair.\nRelevance: {j % 3}" for j in range(1, 9)]


def ranking_fixture(n_queries: int = 20, docs_per_query: int = 10, flip_rate: float = 0.1, seed: int = 0):
    """Queries whose relevant documents overlap weakly while distractors overlap strongly.

    Returns (corpus docs, queries, qrels, mock labels). Mock labels equal the
    qrels grade except on exactly ``flip_rate`` of the (query, own document)
    pairs, where the label is changed to a different grade.
    """
    rng = random.Random(seed)
    docs, queries, qrels = [], [], {}
    pairs = []
    for qi in range(n_queries):
        terms = [f"topic{qi}term{j}" for j in range(3)]
        qid = f"q{qi:02d}"
        queries.append(Query(qid, " ".join(terms), DOMAINS[qi % len(DOMAINS)]))
        grades = [2, 1, 1] + [0] * (docs_per_query - 3)
        qrels[qid] = {}
        for di, grade in enumerate(grades):
            did = f"doc{qi:02d}_{di:02d}"
            if grade:
                words = [terms[di % 3]] + rng.choices(FILLER, k=40)
            else:
                words = terms * 2 + rng.choices(FILLER, k=5)
            rng.shuffle(words)
            docs.append(Document(did, " ".join(words)))
            qrels[qid][did] = grade
            pairs.append((qid, did))
    labels = {p: qrels[p[0]][p[1]] for p in pairs}
    for p in rng.sample(pairs, round(flip_rate * len(pairs))):
        labels[p] = rng.choice([g for g in (0, 1, 2) if g != labels[p]])
    return docs, queries, qrels, labels


def label_responder(queries, docs, labels):
    """Responder that labels a rerank prompt by looking up its (query, document) text."""
    by_text = {}
    qtext = {q.id: q.text for q in queries}
    dtext = {d.id: d.text for d in docs}
    for (qid, did), label in labels.items():
        by_text[(qtext[qid], dtext[did])] = label

    def respond(messages, n, seed):
        user = messages[-1]["content"]
        query = user.split("Query:\n", 1)[1].split("\n", 1)[0]
        doc = user.split("Document:\n", 1)[1].split("\n", 1)[0]
        return [f"Checked the evidence.\nRelevance: {by_text.get((query, doc), 0)}"] * n

    return respond


def build_pipeline(root: Path, n_queries: int = 8, docs_per_query: int = 10, seed: int = 0, n_seeds: int = 10) -> Path:
    """Write every input file plus ``pipeline.toml`` under ``root`` and return the config path."""
    root.mkdir(parents=True, exist_ok=True)
    docs, queries, qrels, labels = ranking_fixture(n_queries, docs_per_query, seed=seed)
    write_corpus(docs, root / "corpus.jsonl")
    write_queries(queries, root / "queries.jsonl")
    write_qrels(qrels, root / "qrels.txt")

    rng = random.Random(seed)
    dim = 8
    with open(root / "doc_emb.jsonl", "w") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "vector": [round(rng.uniform(-1, 1), 4) for _ in range(dim)]}) + "\n")
    with open(root / "query_emb.jsonl", "w") as fh:
        for q in queries:
            fh.write(json.dumps({"id": q.id, "vector": [round(rng.uniform(-1, 1), 4) for _ in range(dim)]}) + "\n")

    definitions = {d: f"A document is relevant to a {d} question when it supplies the needed concept." for d in DOMAINS}
    qtext = {q.id: q for q in queries}
    dtext = {d.id: d.text for d in docs}
    student = MockBackend(default=SAMPLES)
    for (qid, did), label in labels.items():
        q = qtext[qid]
        reply = [f"Reasoning about {did}.\nRelevance: {label}"]
        student.add(render_rerank_prompt(q.text, dtext[did]), reply)
        student.add(render_rerank_prompt(q.text, dtext[did], definitions[q.domain]), reply)
    student.to_jsonl(root / "student.jsonl")

    seeds, search, fetcher, _ = datagen_fixture(n_seeds)
    with open(root / "seeds.jsonl", "w") as fh:
        for s in seeds:
            fh.write(json.dumps({"id": s.source_id, "community": s.community, "query": s.query, "answer": s.answer}) + "\n")
    (root / "search.json").write_text(json.dumps(search.table, indent=1, sort_keys=True))
    (root / "pages.json").write_text(json.dumps(fetcher.pages, indent=1, sort_keys=True))
    (root / "exclusion.txt").write_text(seeds[0].query.upper() + "?\n")
    teacher_table = MockBackend()
    for s in seeds:
        fetched = []
        for url in extract_links(s.answer):
            if url in fetcher.pages:
                text = html_to_text(fetcher.pages[url])
                fetched.append(text)
                msgs = render_teacher_prompt(s.query, text)
                teacher_table.add(msgs, teacher_responder(msgs, 1, None))
        msgs = render_related_queries_prompt(s.query, html_to_text(s.answer) or s.answer, fetched)
        teacher_table.add(msgs, teacher_responder(msgs, 1, None))
        for rq, results in search.table.items():
            if rq.startswith(s.query + " related"):
                for r in results:
                    m2 = render_teacher_prompt(rq, html_to_text(fetcher.pages[r["url"]]))
                    teacher_table.add(m2, teacher_responder(m2, 1, None))
    teacher_table.to_jsonl(root / "teacher.jsonl")

    with open(root / "rewards.jsonl", "w") as fh:
        for j, text in enumerate(SAMPLES, start=1):
            fh.write(json.dumps({"output": text, "score": j}) + "\n")

    domain_list = ", ".join(json.dumps(d) for d in DOMAINS)
    defs = "\n".join(f"{d} = {json.dumps(t)}" for d, t in definitions.items())
    config = f"""seed = {seed}
domains = [{domain_list}]

[paths]
corpus = "corpus.jsonl"
queries = "queries.jsonl"
qrels = "qrels.txt"
embeddings = "doc_emb.jsonl"
query_embeddings = "query_emb.jsonl"
seeds = "seeds.jsonl"
exclusion = "exclusion.txt"
output = "out"

[gateway]
backend = "mock"
student_fixture = "student.jsonl"
teacher_fixture = "teacher.jsonl"

[retrieval]
mode = "bm25"
k = 20

[rerank]
alpha = 100.0

[refine]
reward_backend = "mock"
reward_fixture = "rewards.jsonl"

[datagen]
mode = "offline"
search_fixture = "search.json"
page_fixture = "pages.json"

[relevance_definitions]
{defs}
"""
    path = root / "pipeline.toml"
    path.write_text(config)
    return path

