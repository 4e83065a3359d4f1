import json

import httpx
import pytest

from distillrank.errors import APIError, ValidationError
from distillrank.web import (
    BraveSearchClient,
    FetchError,
    FixtureFetcher,
    FixtureSearchClient,
    LiveFetcher,
    extract_links,
    html_to_text,
)


def test_extract_anchor():
    assert extract_links('<a href="https://x.org/p">see</a>') == ["https://x.org/p"]


def test_extract_dedup():
    assert extract_links("see https://a.io and https://a.io") == ["https://a.io"]


def test_extract_drops_other_schemes():
    assert extract_links("mailto:a@b.c") == []
    assert extract_links('<a href="mailto:a@b.c">m</a><a href="#top">t</a>') == []


def test_extract_mixed_order_and_punctuation():
    text = 'First (see http://b.org/x). Then <a href="https://c.org">c</a>, and http://b.org/x again.'
    assert extract_links(text) == ["http://b.org/x", "https://c.org"]


def test_html_to_text():
    html = "<html><head><style>p{}</style><script>var x=1;</script></head><body><p>A &amp; B</p>\n<p>  C </p></body></html>"
    assert html_to_text(html) == "A & B C"


def test_fixture_search_and_fetch():
    client = FixtureSearchClient({"q": [{"url": f"https://e.org/{i}"} for i in range(15)]})
    assert len(client.search("q")) == 10
    assert client.search("unknown") == []
    fetcher = FixtureFetcher({"https://e.org/0": "<b>bold</b> text"})
    assert fetcher.fetch("https://e.org/0") == "bold text"
    with pytest.raises(FetchError):
        fetcher.fetch("https://e.org/missing")


def test_brave_requires_key(monkeypatch):
    monkeypatch.delenv("SEARCH_API_KEY", raising=False)
    with pytest.raises(ValidationError, match="SEARCH_API_KEY"):
        BraveSearchClient()


def test_brave_request_and_parse():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["token"] = request.headers["X-Subscription-Token"]
        seen["q"] = request.url.params["q"]
        results = [{"url": f"https://r/{i}", "title": "T", "description": "D"} for i in range(12)]
        return httpx.Response(200, json={"web": {"results": results}})

    client = BraveSearchClient(api_key="k", transport=httpx.MockTransport(handler))
    results = client.search("bm25 idf")
    assert seen == {"token": "k", "q": "bm25 idf"}
    assert len(results) == 10 and results[0].snippet == "D"


def test_brave_http_error():
    client = BraveSearchClient(api_key="k", transport=httpx.MockTransport(lambda r: httpx.Response(403, text="no")))
    with pytest.raises(APIError) as err:
        client.search("q")
    assert err.value.status == 403


def test_live_fetcher_strips_and_caps():
    def handler(request):
        if request.url.path == "/big":
            return httpx.Response(200, content=b"x" * 5000)
        if request.url.path == "/gone":
            return httpx.Response(404)
        return httpx.Response(200, html="<p>hello <i>world</i></p>")

    fetcher = LiveFetcher(max_bytes=1000, transport=httpx.MockTransport(handler))
    assert fetcher.fetch("https://h/ok") == "hello world"
    with pytest.raises(FetchError):
        fetcher.fetch("https://h/big")
    with pytest.raises(FetchError):
        fetcher.fetch("https://h/gone")


def test_fixture_from_json(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"q": [{"url": "https://a"}]}))
    assert FixtureSearchClient.from_json(path).search("q")[0].url == "https://a"
