"""HTML handling, web search clients and document fetchers.

Search and fetch are contracts with two implementations each: an offline
fixture used by tests and reproducible runs, and a live HTTP one.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Protocol
from urllib.parse import urlsplit

import httpx

from .errors import APIError, ExternalServiceError, TransportError, ValidationError
from .models import PathLike

MAX_RESULTS = 10
BRAVE_ENDPOINT = "https://api.search.brave.com/res/v1/web/search"

_BARE_URL = re.compile(r"https?://[^\s<>\"'`]+", re.IGNORECASE)
_TRAILING = ".,;:!?)]}'\""
_SKIP_TAGS = {"script", "style", "noscript", "template"}


class FetchError(ExternalServiceError):
    pass


class SearchError(ExternalServiceError):
    pass


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip = 0

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_TAGS:
            self._skip += 1
        else:
            self.parts.append(" ")

    def handle_endtag(self, tag):
        if tag in _SKIP_TAGS and self._skip:
            self._skip -= 1
        else:
            self.parts.append(" ")

    def handle_data(self, data):
        if not self._skip:
            self.parts.append(data)


def html_to_text(html: str) -> str:
    """Strip tags (dropping script/style bodies), decode entities, collapse whitespace."""
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    return " ".join("".join(parser.parts).split())


def _clean_url(url: str) -> str | None:
    url = url.strip().rstrip(_TRAILING)
    parts = urlsplit(url)
    if parts.scheme.lower() not in ("http", "https") or not parts.netloc:
        return None
    return url


class _LinkExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.found: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "a":
            for name, value in attrs:
                if name == "href" and value:
                    self.found.append(value)

    def handle_data(self, data):
        self.found.extend(m.group(0) for m in _BARE_URL.finditer(data))


def extract_links(answer: str) -> list[str]:
    """http(s) links from anchor hrefs and bare URLs, first occurrence order, deduplicated."""
    parser = _LinkExtractor()
    parser.feed(answer)
    parser.close()
    seen: set[str] = set()
    out: list[str] = []
    for raw in parser.found:
        url = _clean_url(raw)
        if url and url not in seen:
            seen.add(url)
            out.append(url)
    return out


@dataclass(frozen=True)
class SearchResult:
    url: str
    title: str = ""
    snippet: str = ""
    text: str | None = None


class WebSearchClient(Protocol):
    def search(self, query: str) -> list[SearchResult]: ...


class Fetcher(Protocol):
    def fetch(self, url: str) -> str: ...


def _parse_results(data) -> list[SearchResult]:
    if isinstance(data, dict):
        if isinstance(data.get("web"), dict):
            data = data["web"].get("results", [])
        else:
            data = data.get("results", [])
    if not isinstance(data, list):
        raise SearchError("search response has no results list")
    out = []
    for item in data[:MAX_RESULTS]:
        if not isinstance(item, dict) or not item.get("url"):
            continue
        out.append(
            SearchResult(
                url=item["url"],
                title=item.get("title", "") or "",
                snippet=item.get("description", item.get("snippet", "")) or "",
                text=item.get("text"),
            )
        )
    return out


class FixtureSearchClient:
    """Offline search: ``{query: [{"url", "title", "description", "text"?}, ...]}``.

    Unknown queries return no results.
    """

    def __init__(self, table: dict[str, list[dict]] | None = None, fail: set[str] | None = None):
        self.table = table or {}
        self.fail = fail or set()
        self.queries: list[str] = []

    @classmethod
    def from_json(cls, path: PathLike) -> FixtureSearchClient:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: search fixture must be a JSON object")
        return cls(data)

    def search(self, query: str) -> list[SearchResult]:
        self.queries.append(query)
        if query in self.fail:
            raise SearchError(f"scripted search failure for {query!r}")
        return _parse_results(self.table.get(query, []))


class BraveSearchClient:
    """GET ``{endpoint}?q=...&count=10`` with the key in ``X-Subscription-Token``."""

    def __init__(
        self,
        api_key: str | None = None,
        api_key_env: str = "SEARCH_API_KEY",
        endpoint: str = BRAVE_ENDPOINT,
        timeout: float = 20.0,
        transport: httpx.BaseTransport | None = None,
    ):
        key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        if not key:
            raise ValidationError(f"web search needs an API key in ${api_key_env}")
        self.endpoint = endpoint
        self._client = httpx.Client(
            timeout=timeout,
            headers={"Accept": "application/json", "X-Subscription-Token": key},
            transport=transport,
        )

    def search(self, query: str) -> list[SearchResult]:
        try:
            resp = self._client.get(self.endpoint, params={"q": query, "count": MAX_RESULTS})
        except httpx.TransportError as exc:
            raise TransportError(f"search request failed: {exc}") from exc
        if not resp.is_success:
            raise APIError(resp.status_code, resp.text)
        return _parse_results(resp.json())


class FixtureFetcher:
    """Offline fetcher: ``{url: html_or_text}``. Unknown URLs fail."""

    def __init__(self, pages: dict[str, str] | None = None):
        self.pages = pages or {}

    @classmethod
    def from_json(cls, path: PathLike) -> FixtureFetcher:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: page fixture must be a JSON object")
        return cls(data)

    def fetch(self, url: str) -> str:
        if url not in self.pages:
            raise FetchError(f"no fixture page for {url}")
        return html_to_text(self.pages[url])


class LiveFetcher:
    def __init__(self, timeout: float = 15.0, max_bytes: int = 2_000_000, transport: httpx.BaseTransport | None = None):
        self.max_bytes = max_bytes
        self._client = httpx.Client(
            timeout=timeout,
            follow_redirects=True,
            headers={"User-Agent": "distillrank/0.1 (+research data pipeline)"},
            transport=transport,
        )

    def fetch(self, url: str) -> str:
        try:
            with self._client.stream("GET", url) as resp:
                if not resp.is_success:
                    raise FetchError(f"{url}: HTTP {resp.status_code}")
                chunks: list[bytes] = []
                size = 0
                for chunk in resp.iter_bytes():
                    size += len(chunk)
                    if size > self.max_bytes:
                        raise FetchError(f"{url}: larger than {self.max_bytes} bytes")
                    chunks.append(chunk)
                encoding = resp.encoding or "utf-8"
        except httpx.HTTPError as exc:
            raise FetchError(f"{url}: {exc}") from exc
        return html_to_text(b"".join(chunks).decode(encoding, errors="replace"))
