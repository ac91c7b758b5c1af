"""Open-loop load generator for OpenAI-compatible streaming chat endpoints."""
from __future__ import annotations

import asyncio
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence
from urllib.parse import urlparse

import aiohttp

from .core import RequestSpec, RunRecord, TokenTimeline, config_fingerprint, rng_stream
from .metrics import nearest_rank

__all__ = [
    "EndpointConfig",
    "ClientError",
    "ConnectError",
    "Timeout",
    "ProtocolError",
    "SaturatedGenerator",
    "filler_prompt",
    "stream_request",
    "run_load",
    "API_KEY_ENV",
]

logger = logging.getLogger(__name__)

API_KEY_ENV = "INFERMETER_API_KEY"


class ClientError(RuntimeError):
    pass


class ConnectError(ClientError):
    pass


class Timeout(ClientError):
    def __init__(self, request_id: str, timeout_s: float):
        super().__init__(f"request {request_id} exceeded {timeout_s}s")
        self.request_id = request_id


class ProtocolError(ClientError):
    pass


class SaturatedGenerator(ClientError):
    """Dispatch fell behind the arrival schedule; ``record`` still holds the run."""

    def __init__(self, p99_skew: float, bound: float, record: RunRecord):
        super().__init__(f"p99 dispatch skew {p99_skew * 1e3:.2f} ms exceeds bound {bound * 1e3:.2f} ms")
        self.p99_skew = p99_skew
        self.record = record


@dataclass
class EndpointConfig:
    base_url: str
    model_name: str = "default"
    api_key: Optional[str] = None
    request_timeout_s: float = 600.0
    max_concurrency: int = 256
    retries: int = 0
    max_dispatch_skew_s: float = 0.010
    warmup_frac: float = 0.05
    extra_headers: dict = field(default_factory=dict)

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"base_url is not an http(s) URL: {self.base_url!r}")
        self.base_url = self.base_url.rstrip("/")
        if not self.request_timeout_s > 0:
            raise ValueError("request_timeout_s must be > 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV)

    @property
    def url(self) -> str:
        return self.base_url + "/v1/chat/completions"

    def headers(self) -> dict:
        h = {"Content-Type": "application/json", **self.extra_headers}
        if self.api_key:
            h["Authorization"] = f"Bearer {self.api_key}"
        return h

    def public_dict(self) -> dict:
        return {"base_url": self.base_url, "model_name": self.model_name,
                "request_timeout_s": self.request_timeout_s, "max_concurrency": self.max_concurrency,
                "retries": self.retries}


def filler_prompt(n_words: int, seed: int = 0) -> str:
    """Deterministic prompt of ``n_words`` whitespace-separated words."""
    rng = rng_stream(seed, f"filler:{n_words}")
    idx = rng.integers(0, len(_VOCAB), size=n_words)
    return " ".join(_VOCAB[i] for i in idx.tolist())


_VOCAB = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
          "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa")


@dataclass
class _Capture:
    times: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    finish_reason: Optional[str] = None
    usage_seen: bool = False
    reported_tokens: Optional[int] = None


def _body(spec: RequestSpec, ep: EndpointConfig, seed: int) -> dict:
    text = spec.prompt_text if spec.prompt_text is not None else filler_prompt(spec.prompt_tokens, seed)
    return {"model": ep.model_name, "messages": [{"role": "user", "content": text}],
            "stream": True, "max_tokens": spec.decode_tokens}


async def stream_request(session: aiohttp.ClientSession, ep: EndpointConfig, body: dict,
                         clock=time.perf_counter) -> _Capture:
    """POST one streaming request and timestamp every SSE data event on receipt.

    Raises ProtocolError when the response is not an SSE stream, a data line
    is not JSON, or the stream ends without ``[DONE]``.
    """
    cap = _Capture()
    try:
        async with session.post(ep.url, json=body, headers=ep.headers()) as resp:
            if resp.status != 200:
                text = await resp.text()
                raise ProtocolError(f"HTTP {resp.status}: {text[:200]}")
            ctype = resp.headers.get("Content-Type", "")
            if not ctype.startswith("text/event-stream"):
                raise ProtocolError(f"expected text/event-stream, got {ctype or 'no content type'}")
            done = False
            prev_usage = 0
            async for raw in resp.content:
                ts = clock()
                line = raw.strip()
                if not line or line.startswith(b":") or not line.startswith(b"data:"):
                    continue
                payload = line[5:].strip()
                if payload == b"[DONE]":
                    done = True
                    break
                try:
                    chunk = json.loads(payload)
                except json.JSONDecodeError as exc:
                    raise ProtocolError(f"malformed SSE data: {payload[:80]!r}") from exc
                if "error" in chunk:
                    raise ProtocolError(f"server error event: {chunk['error']}")
                choices = chunk.get("choices") or []
                content = ""
                if choices:
                    content = (choices[0].get("delta") or {}).get("content") or ""
                    cap.finish_reason = choices[0].get("finish_reason") or cap.finish_reason
                usage = chunk.get("usage") or {}
                total = usage.get("completion_tokens")
                if not isinstance(total, int):
                    total = None
                else:
                    cap.reported_tokens = total
                # usage on a content chunk is a per-event delta; usage-only chunks are just totals
                if content:
                    n_tok = 1
                    if total is not None and total > prev_usage:
                        n_tok = total - prev_usage
                        cap.usage_seen = True
                    cap.times.append(ts)
                    cap.counts.append(n_tok)
                if total is not None:
                    prev_usage = max(prev_usage, total)
            if not done:
                raise ProtocolError("stream ended without [DONE]")
    except aiohttp.ClientConnectorError as exc:
        raise ConnectError(str(exc)) from exc
    except aiohttp.ClientPayloadError as exc:
        raise ProtocolError(f"truncated response: {exc}") from exc
    return cap


async def _run(workload: Sequence[RequestSpec], ep: EndpointConfig, seed: int) -> RunRecord:
    timeout = aiohttp.ClientTimeout(total=None, sock_connect=30)
    connector = aiohttp.TCPConnector(limit=ep.max_concurrency)
    async with aiohttp.ClientSession(timeout=timeout, connector=connector) as session:
        probe = RequestSpec(id="preflight", prompt_tokens=1, decode_tokens=1)
        try:
            await asyncio.wait_for(stream_request(session, ep, _body(probe, ep, seed)), ep.request_timeout_s)
        except asyncio.TimeoutError:
            raise Timeout("preflight", ep.request_timeout_s) from None

        sem = asyncio.Semaphore(ep.max_concurrency)
        t0 = time.perf_counter()
        clock = lambda: time.perf_counter() - t0

        async def one(spec: RequestSpec) -> TokenTimeline:
            target = spec.arrival_time
            delay = target - clock()
            if delay > 0:
                await asyncio.sleep(delay)
            async with sem:
                submit = clock()
                skew = max(submit - target, 0.0)
                body = _body(spec, ep, seed)
                err, cap = None, _Capture()
                for attempt in range(ep.retries + 1):
                    try:
                        cap = await asyncio.wait_for(stream_request(session, ep, body, clock), ep.request_timeout_s)
                        err = None
                        break
                    except asyncio.TimeoutError:
                        err = str(Timeout(spec.id, ep.request_timeout_s))
                    except ClientError as exc:
                        err = f"{type(exc).__name__}: {exc}"
                    except aiohttp.ClientError as exc:
                        err = f"ConnectError: {exc}"
                    cap = _Capture()
            if err is not None:
                logger.warning("request %s failed: %s", spec.id, err)
                return TokenTimeline(request_id=spec.id, submit_time=submit, finished=False,
                                     finish_reason="error", usage_reported=False,
                                     dispatch_skew_s=skew, error=err)
            reason = cap.finish_reason if cap.finish_reason in ("length", "stop") else "stop"
            return TokenTimeline(
                request_id=spec.id, submit_time=submit, token_times=tuple(cap.times),
                tokens_per_event=tuple(cap.counts), finished=True, finish_reason=reason,
                usage_reported=cap.usage_seen, dispatch_skew_s=skew,
                reported_tokens=cap.reported_tokens)

        timelines = await asyncio.gather(*(one(s) for s in workload))

    start = min(r.arrival_time for r in workload)
    ends = [t.finish_time for t in timelines if t.finish_time is not None]
    end = max(ends) if ends else start
    window = end - start
    return RunRecord(
        config_fingerprint=config_fingerprint(ep.public_dict()), seed=int(seed),
        requests=list(workload), timelines=list(timelines),
        warmup_cutoff=start + ep.warmup_frac * window, cooldown_cutoff=end - ep.warmup_frac * window,
        meta={"source": "client", "endpoint": ep.public_dict()})


def run_load(workload: Sequence[RequestSpec], ep: EndpointConfig, seed: int = 0,
             check_skew: bool = True) -> RunRecord:
    """Dispatch every request at its ``arrival_time`` and record its token timeline.

    Per-request failures (timeouts, protocol errors) are recorded on the
    timeline with ``finish_reason="error"``. A failing preflight request
    raises instead. With ``check_skew``, a p99 dispatch lag beyond
    ``ep.max_dispatch_skew_s`` raises :class:`SaturatedGenerator` carrying the
    finished record.
    """
    if not workload:
        raise ValueError("empty workload")
    if any(r.arrival_time is None for r in workload):
        raise ValueError("every request needs an arrival_time")
    arrivals = [r.arrival_time for r in workload]
    if any(b < a for a, b in zip(arrivals, arrivals[1:])):
        raise ValueError("workload must be sorted by arrival_time")
    record = asyncio.run(_run(workload, ep, seed))
    skews = sorted(t.dispatch_skew_s for t in record.timelines if t.dispatch_skew_s is not None)
    p99 = nearest_rank(skews, 99) if skews else 0.0
    record.meta["dispatch_skew_p99_s"] = p99
    record.meta["saturated"] = p99 > ep.max_dispatch_skew_s
    if record.meta["saturated"]:
        logger.warning("open-loop dispatch lagged: p99 skew %.2f ms", p99 * 1e3)
        if check_skew:
            raise SaturatedGenerator(p99, ep.max_dispatch_skew_s, record)
    return record
