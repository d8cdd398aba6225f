import json
from datetime import datetime

import httpx
import pytest
from hypothesis import given, strategies as st

from servicetime.workload import (
    LlmClientConfig, LlmWorkloadClient, default_template, fallback_score, parse_llm_score, score_requests,
    score_workload,
)

from conftest import make_request

WHEN = datetime(2023, 4, 7, 9, 30)


def test_fallback_examples():
    assert fallback_score("2 chairs") == 3.5
    assert fallback_score("sofa pick up in rear") == 2.5
    assert fallback_score(", ".join(f"item{k}" for k in range(40))) == 10.0
    assert fallback_score("2 mattress, bed frame, 3 desk, 2 cabinet, hamper, flag pole") == 10.0
    assert fallback_score("2 bags of leaves") == 3.5


def test_missing_is_zero():
    for text in (None, "", "   \n"):
        s = score_workload(text)
        assert (s.w, s.source) == (0.0, "missing")


@given(st.text(max_size=200))
def test_fallback_bounds_and_purity(text):
    w = fallback_score(text)
    assert 0.0 <= w <= 10.0
    assert fallback_score(text) == w


def test_parse_llm_score():
    assert parse_llm_score("8\nlots of furniture") == 8.0
    assert parse_llm_score("Score: 12") == 10.0
    assert parse_llm_score("-3") == 0.0
    assert parse_llm_score("no idea") is None


def test_template_fields():
    t = default_template()
    for key in ("{request_type}", "{weekday}", "{date}", "{week}", "{year}", "{description}"):
        assert key in t
    assert "0–10 scale, answer with a single number" in t


def _llm(replies, calls):
    def handler(request):
        body = json.loads(request.content)
        calls.append(body["messages"][0]["content"])
        reply = replies.pop(0) if replies else "5"
        if isinstance(reply, int):
            return httpx.Response(reply)
        return httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})

    return httpx.MockTransport(handler)


def test_llm_score_and_cache(tmp_path):
    cache = tmp_path / "cache.jsonl"
    calls = []
    cfg = LlmClientConfig(cache_path=str(cache), max_retries=0)
    client = LlmWorkloadClient(cfg, transport=_llm(["8\nheavy items"], calls))
    s = score_workload("2 mattress, bed frame", "Bulk Trash", WHEN, client)
    assert (s.w, s.source, s.rationale) == (8.0, "llm", "heavy items")
    assert "Bulk Trash" in calls[0] and "Friday" in calls[0] and "2023-04-07" in calls[0]
    again = score_workload("2 mattress, bed frame", "Bulk Trash", WHEN, client)
    assert again == s and client.network_calls == 1
    # a fresh client reads the JSONL cache and never hits the network
    fresh = LlmWorkloadClient(cfg, transport=_llm([], calls))
    assert fresh.score("2 mattress, bed frame", "Bulk Trash", WHEN) == s
    assert fresh.network_calls == 0
    assert fresh.cached("2 mattress, bed frame", WHEN) == s
    rec = json.loads(cache.read_text().splitlines()[0])
    assert set(rec) == {"key", "w", "rationale"}


def test_cache_key_depends_on_date_and_template():
    a = LlmWorkloadClient(LlmClientConfig())
    b = LlmWorkloadClient(LlmClientConfig(prompt_template="{description} {request_type}"))
    f1 = {"date": "2023-01-01", "weekday": "Sunday", "week": "52", "year": "2023"}
    f2 = dict(f1, date="2023-01-02")
    assert a.cache_key("x", f1) != a.cache_key("x", f2)
    assert a.cache_key("x", f1) != b.cache_key("x", f1)
    assert a.cache_key("x", f1) == a.cache_key("x", dict(f1))


def test_unparsable_then_retry():
    calls = []
    client = LlmWorkloadClient(LlmClientConfig(max_retries=1), transport=_llm(["hmm", "4"], calls))
    assert client.score("a couch", "Bulk Trash", WHEN).w == 4.0
    assert len(calls) == 2


def test_network_failure_falls_back():
    calls = []
    client = LlmWorkloadClient(LlmClientConfig(max_retries=2), transport=_llm([500, 500, 503], calls))
    s = client.score("2 chairs", "Bulk Trash", WHEN)
    assert (s.w, s.source) == (3.5, "fallback")
    assert client.network_calls == 3


def test_timeout_must_be_positive():
    with pytest.raises(ValueError):
        LlmClientConfig(timeout=0)


def test_parallel_scoring_second_pass_hits_cache(tmp_path):
    calls = []
    cfg = LlmClientConfig(cache_path=str(tmp_path / "c.jsonl"), parallelism=4)
    reqs = [make_request(k, 1.0, description=f"{k % 7} bags") for k in range(40)]
    client = LlmWorkloadClient(cfg, transport=_llm([], calls))
    first = score_requests(reqs, client)
    n = client.network_calls
    assert 0 < n <= 40
    second = score_requests(reqs, LlmWorkloadClient(cfg, transport=_llm([], calls)))
    assert first == second and len(calls) == n
