"""Prompt templates and context-budget truncation.

Template texts live in ``templates/<name>.system.txt`` and
``templates/<name>.user.txt``; a directory passed as ``template_dir``
overrides the packaged copies file by file.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import ValidationError
from .gateway import Messages
from .models import PathLike

CONTEXT_TOKENS = 4096
OUTPUT_TOKENS = 1024
TRUNCATION_MARKER = "…[truncated]"
SNIPPET_TOKENS = 150

_WORD = re.compile(r"\S+")


def approx_tokens(text: str) -> int:
    """Whitespace words x 1.3, rounded up (integer arithmetic, no float drift)."""
    words = len(text.split())
    return (words * 13 + 9) // 10


def truncate_to_budget(text: str, budget: int) -> str:
    """Keep the head of ``text`` so it fits ``budget`` approximate tokens.

    A trailing marker from an earlier truncation is not counted, which
    makes the function idempotent. At least one word is always kept.
    """
    if budget < 1:
        raise ValidationError(f"budget must be >= 1, got {budget}")
    body = text
    if body.endswith(" " + TRUNCATION_MARKER):
        body = body[: -len(TRUNCATION_MARKER) - 1]
    if approx_tokens(body) <= budget:
        return text
    keep = max(1, (10 * budget) // 13)
    end = 0
    for i, m in enumerate(_WORD.finditer(body)):
        if i == keep:
            break
        end = m.end()
    return body[:end] + " " + TRUNCATION_MARKER


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_text: str

    def render(self, **values: str) -> Messages:
        return [
            {"role": "system", "content": _fill(self.system_text, values, self.name)},
            {"role": "user", "content": _fill(self.user_text, values, self.name)},
        ]

    def placeholders(self) -> set[str]:
        fields = set()
        for text in (self.system_text, self.user_text):
            fields.update(f for _, f, _, _ in string.Formatter().parse(text) if f)
        return fields


def _fill(text: str, values: dict[str, str], name: str) -> str:
    try:
        return text.format_map(values)
    except KeyError as exc:
        raise ValidationError(f"template {name!r}: unbound placeholder {exc.args[0]!r}") from None


def _read_part(name: str, part: str, template_dir: PathLike | None) -> str:
    filename = f"{name}.{part}.txt"
    if template_dir is not None:
        candidate = Path(template_dir) / filename
        if candidate.exists():
            return candidate.read_text(encoding="utf-8").rstrip("\n")
    return resources.files(__package__).joinpath("templates", filename).read_text(encoding="utf-8").rstrip("\n")


@lru_cache(maxsize=None)
def _load_cached(name: str, template_dir: str | None) -> PromptTemplate:
    return PromptTemplate(name, _read_part(name, "system", template_dir), _read_part(name, "user", template_dir))


def load_template(name: str, template_dir: PathLike | None = None) -> PromptTemplate:
    return _load_cached(name, None if template_dir is None else str(template_dir))


def _document_budget(template: PromptTemplate, context_tokens: int, output_tokens: int, **others: str) -> int:
    skeleton = template.render(document="", **others)
    used = sum(approx_tokens(m["content"]) for m in skeleton)
    # the marker word a truncation appends also costs tokens
    return max(1, context_tokens - output_tokens - used - approx_tokens(TRUNCATION_MARKER))


def render_rerank_prompt(
    query: str,
    document: str,
    relevance_definition: str | None = None,
    *,
    template_dir: PathLike | None = None,
    context_tokens: int = CONTEXT_TOKENS,
    output_tokens: int = OUTPUT_TOKENS,
) -> Messages:
    """Messages asking for a step-by-step explanation ending in ``Relevance: <0|1|2>``.

    The document is truncated so the whole prompt plus the generation fits
    the context budget.
    """
    if not query.strip() or not document.strip():
        raise ValidationError("query and document must be non-empty")
    template = load_template("rerank", template_dir)
    definition = ""
    if relevance_definition:
        definition = f"\n\nRelevance definition for this domain:\n{relevance_definition}"
    budget = _document_budget(
        template, context_tokens, output_tokens, query=query, relevance_definition=definition
    )
    return template.render(
        query=query, document=truncate_to_budget(document, budget), relevance_definition=definition
    )


def render_teacher_prompt(
    query: str,
    document: str,
    *,
    template_dir: PathLike | None = None,
    context_tokens: int = CONTEXT_TOKENS,
    output_tokens: int = OUTPUT_TOKENS,
) -> Messages:
    if not query.strip() or not document.strip():
        raise ValidationError("query and document must be non-empty")
    template = load_template("teacher", template_dir)
    budget = _document_budget(template, context_tokens, output_tokens, query=query)
    return template.render(query=query, document=truncate_to_budget(document, budget))


def render_related_queries_prompt(
    query: str,
    answer: str,
    linked_docs: list[str] | tuple[str, ...] = (),
    *,
    template_dir: PathLike | None = None,
) -> Messages:
    """Ask for a numbered list of related queries.

    Each linked document contributes a short snippet; with no documents the
    section is left out.
    """
    if not query.strip() or not answer.strip():
        raise ValidationError("query and answer must be non-empty")
    section = ""
    if linked_docs:
        parts = [
            f"[{i}] {truncate_to_budget(text, SNIPPET_TOKENS)}"
            for i, text in enumerate(linked_docs, start=1)
        ]
        section = "\nCited documents:\n" + "\n\n".join(parts) + "\n"
    template = load_template("related_queries", template_dir)
    return template.render(query=query, answer=answer, linked_docs=section)


def render_reward_prompt(
    query: str, document: str, output: str, *, template_dir: PathLike | None = None
) -> Messages:
    template = load_template("reward", template_dir)
    doc_budget = CONTEXT_TOKENS - OUTPUT_TOKENS - approx_tokens(output) - approx_tokens(query) - 200
    return template.render(
        query=query, document=truncate_to_budget(document, max(1, doc_budget)), output=output
    )
