"""Workload index in [0, 10] from a request's free-text description.

Scores come from a chat-completions LLM endpoint behind an on-disk cache, or
from :func:`fallback_score`, a deterministic offline heuristic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Iterable

import httpx

log = logging.getLogger(__name__)

W_MIN, W_MAX = 0.0, 10.0

_SEGMENT_SPLIT = re.compile(r",|;|\band\b|&", re.IGNORECASE)
_LEADING_QTY = re.compile(r"^\s*(\d+)\s*(.*)$", re.DOTALL)
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class WorkloadScore:
    w: float
    source: str  # "llm", "fallback" or "missing"
    rationale: str | None = None


def _clamp(x: float) -> float:
    return min(max(float(x), W_MIN), W_MAX)


def _item_noun(text: str) -> str:
    words = re.findall(r"[a-z]+", text.lower())
    return " ".join(w[:-1] if len(w) > 3 and w.endswith("s") and not w.endswith("ss") else w
                    for w in words)


def fallback_score(description: str) -> float:
    """``clamp(1 + total quantity + 0.5 * distinct items, 0, 10)``.

    The description is cut into segments at commas, semicolons, "&" and "and";
    a segment's quantity is its leading integer, else 1.
    """
    qty = 0
    items = set()
    for seg in _SEGMENT_SPLIT.split(description):
        if not seg.strip():
            continue
        m = _LEADING_QTY.match(seg)
        if m:
            qty += int(m.group(1))
            rest = m.group(2)
        else:
            qty += 1
            rest = seg
        noun = _item_noun(rest)
        if noun:
            items.add(noun)
    return _clamp(1 + qty + 0.5 * len(items))


def date_fields(ts: datetime | None) -> dict:
    if ts is None:
        return {"date": "", "weekday": "", "week": "", "year": ""}
    iso = ts.isocalendar()
    return {"date": ts.date().isoformat(), "weekday": ts.strftime("%A"),
            "week": str(iso[1]), "year": str(ts.year)}


def default_template() -> str:
    return resources.files("servicetime").joinpath("prompts/workload.txt").read_text(encoding="utf-8")


def parse_llm_score(text: str) -> float | None:
    m = _NUMBER.search(text or "")
    return None if m is None else _clamp(float(m.group(0)))


@dataclass
class LlmClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "meta-llama/Meta-Llama-3-8B-Instruct"
    prompt_template: str | None = None  # text; the packaged template when None
    timeout: float = 30.0
    max_retries: int = 2
    cache_path: str | None = None
    parallelism: int = 4
    api_key: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.prompt_template is None:
            self.prompt_template = default_template()

    @property
    def template_hash(self) -> str:
        return hashlib.sha256(self.prompt_template.encode("utf-8")).hexdigest()[:16]


class LlmWorkloadClient:
    """Scores descriptions through a chat-completions endpoint.

    Results are cached in memory and appended to ``config.cache_path`` as JSON
    lines ``{"key", "w", "rationale"}``; a cached key never reaches the network.
    """

    def __init__(self, config: LlmClientConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.network_calls = 0
        self._cache: dict[str, tuple[float, str | None]] = {}
        self._lock = threading.Lock()
        self._http = httpx.Client(timeout=config.timeout, transport=transport)
        if config.cache_path and Path(config.cache_path).exists():
            with open(config.cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[rec["key"]] = (rec["w"], rec.get("rationale"))

    def close(self):
        self._http.close()

    def cache_key(self, description: str, fields: dict) -> str:
        blob = json.dumps([self.config.model, self.config.template_hash, description,
                           fields["date"], fields["weekday"], fields["week"], fields["year"]])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _query(self, prompt: str) -> str:
        headers = {"Authorization": f"Bearer {self.config.api_key}"} if self.config.api_key else {}
        payload = {"model": self.config.model, "temperature": 0,
                   "messages": [{"role": "user", "content": prompt}]}
        with self._lock:
            self.network_calls += 1
        resp = self._http.post(self.config.endpoint, json=payload, headers=headers)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def cached(self, description: str, created_at: datetime | None) -> WorkloadScore | None:
        """Cache lookup only; never touches the network."""
        with self._lock:
            hit = self._cache.get(self.cache_key(description, date_fields(created_at)))
        return None if hit is None else WorkloadScore(hit[0], "llm", hit[1])

    def score(self, description: str, request_type: str, created_at: datetime | None) -> WorkloadScore:
        fields = date_fields(created_at)
        key = self.cache_key(description, fields)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return WorkloadScore(hit[0], "llm", hit[1])
        prompt = self.config.prompt_template.format(description=description,
                                                    request_type=request_type, **fields)
        for attempt in range(self.config.max_retries + 1):
            try:
                text = self._query(prompt)
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                continue
            w = parse_llm_score(text)
            if w is None:
                log.warning("no number in LLM reply (attempt %d): %r", attempt + 1, text[:80])
                continue
            rationale = text.strip().split("\n", 1)[1].strip() if "\n" in text.strip() else None
            self._store(key, w, rationale)
            return WorkloadScore(w, "llm", rationale)
        return WorkloadScore(fallback_score(description), "fallback")

    def _store(self, key, w, rationale):
        with self._lock:
            self._cache[key] = (w, rationale)
            if self.config.cache_path:
                with open(self.config.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "w": w, "rationale": rationale}) + "\n")


def score_workload(description: str | None, request_type: str = "",
                   created_at: datetime | None = None,
                   client: LlmWorkloadClient | None = None) -> WorkloadScore:
    """Workload for one request; blank text scores 0 with source ``missing``."""
    if description is None or not description.strip():
        return WorkloadScore(0.0, "missing")
    if client is None:
        return WorkloadScore(fallback_score(description), "fallback")
    return client.score(description, request_type, created_at)


def score_requests(requests: Iterable, client: LlmWorkloadClient | None = None) -> list[WorkloadScore]:
    """Score many requests, with bounded concurrency when an LLM client is given."""
    requests = list(requests)

    def one(r):
        return score_workload(r.description, r.request_type, r.created_at, client)

    if client is None or client.config.parallelism <= 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=client.config.parallelism) as pool:
        return list(pool.map(one, requests))
