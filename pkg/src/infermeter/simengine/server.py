"""OpenAI-compatible streaming mock backed by the simulator."""
from __future__ import annotations

import asyncio
import json
import logging
import threading
import time
from typing import Optional

from aiohttp import web

from ..core import RequestSpec
from .config import PolicyConfig
from .engine import simulate_isolated

logger = logging.getLogger(__name__)


class BindError(OSError):
    pass


def _bad_request(message: str) -> web.Response:
    return web.json_response(
        {"error": {"message": message, "type": "invalid_request_error"}}, status=400)


def _parse_body(body) -> tuple:
    if not isinstance(body, dict):
        raise ValueError("body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise ValueError("messages must be a non-empty list")
    text = ""
    for m in messages:
        if not isinstance(m, dict) or not isinstance(m.get("content"), str):
            raise ValueError("each message needs string content")
        text += " " + m["content"]
    max_tokens = body.get("max_tokens", 16)
    if isinstance(max_tokens, bool) or not isinstance(max_tokens, int) or max_tokens < 1:
        raise ValueError("max_tokens must be a positive integer")
    return max(len(text.split()), 1), max_tokens, bool(body.get("stream", False)), str(body.get("model", "mock"))


class MockApp:
    """aiohttp application replaying simulated token timelines over SSE.

    Every request is simulated alone on an idle engine; its token events are
    then written at ``receipt + t * time_scale`` wall-clock seconds.
    """

    def __init__(self, cfg: PolicyConfig, time_scale: float = 1.0, seed: int = 0):
        if time_scale < 0:
            raise ValueError("time_scale must be >= 0")
        self.cfg = cfg
        self.time_scale = time_scale
        self.seed = seed
        self._counter = 0
        self._lock = threading.Lock()
        self.app = web.Application()
        self.app.router.add_post("/v1/chat/completions", self.chat_completions)
        self.app.router.add_get("/v1/models", self.models)

    async def models(self, request):
        return web.json_response({"object": "list", "data": [{"id": "infermeter-mock", "object": "model"}]})

    def _next_seed(self) -> int:
        with self._lock:
            self._counter += 1
            return self.seed * 1_000_003 + self._counter

    async def chat_completions(self, request: web.Request):
        received = time.perf_counter()
        try:
            body = await request.json()
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _bad_request("request body is not valid JSON")
        try:
            n_prompt, max_tokens, stream, model = _parse_body(body)
        except ValueError as exc:
            return _bad_request(str(exc))

        spec = RequestSpec(id="mock", prompt_tokens=n_prompt, decode_tokens=max_tokens, arrival_time=0.0)
        tl = simulate_isolated(spec, self.cfg, seed=self._next_seed())
        cid = f"chatcmpl-{self._counter}"
        created = int(time.time())
        usage = lambda done: {"prompt_tokens": n_prompt, "completion_tokens": done,
                              "total_tokens": n_prompt + done}

        if not stream:
            await self._sleep_until(received, tl.token_times[-1])
            return web.json_response({
                "id": cid, "object": "chat.completion", "created": created, "model": model,
                "choices": [{"index": 0, "finish_reason": "length",
                             "message": {"role": "assistant", "content": _words(max_tokens, 0)}}],
                "usage": usage(max_tokens)})

        resp = web.StreamResponse(headers={"Content-Type": "text/event-stream", "Cache-Control": "no-cache"})
        await resp.prepare(request)
        done = 0
        for i, (ts, k) in enumerate(zip(tl.token_times, tl.tokens_per_event)):
            await self._sleep_until(received, ts)
            delta = {"content": _words(k, done)}
            if i == 0:
                delta["role"] = "assistant"
            done += k
            chunk = {"id": cid, "object": "chat.completion.chunk", "created": created, "model": model,
                     "choices": [{"index": 0, "delta": delta, "finish_reason": None}],
                     "usage": usage(done)}
            await resp.write(b"data: " + json.dumps(chunk).encode() + b"\n\n")
        final = {"id": cid, "object": "chat.completion.chunk", "created": created, "model": model,
                 "choices": [{"index": 0, "delta": {}, "finish_reason": "length"}], "usage": usage(done)}
        await resp.write(b"data: " + json.dumps(final).encode() + b"\n\n")
        await resp.write(b"data: [DONE]\n\n")
        await resp.write_eof()
        return resp

    async def _sleep_until(self, start: float, offset: float) -> None:
        if self.time_scale == 0:
            return
        delay = start + offset * self.time_scale - time.perf_counter()
        if delay > 0:
            await asyncio.sleep(delay)


def _words(k: int, start: int) -> str:
    return "".join(f" t{start + j}" for j in range(k))


class MockServer:
    """Handle to a mock server running on a background event loop."""

    def __init__(self, mock: MockApp, host: str, port: int):
        self.mock = mock
        self.host = host
        self._requested_port = port
        self.port: Optional[int] = None
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True, name="infermeter-mock")
        self._runner: Optional[web.AppRunner] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "MockServer":
        self._thread.start()
        fut = asyncio.run_coroutine_threadsafe(self._start(), self._loop)
        try:
            fut.result(timeout=10)
        except OSError as exc:
            self.close()
            raise BindError(exc.errno, f"cannot bind {self.host}:{self._requested_port}: {exc.strerror}") from exc
        logger.info("mock server listening on %s", self.url)
        return self

    async def _start(self):
        self._runner = web.AppRunner(self.mock.app, access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self._requested_port)
        await site.start()
        self.port = site._server.sockets[0].getsockname()[1]

    def close(self) -> None:
        if self._runner is not None:
            asyncio.run_coroutine_threadsafe(self._runner.cleanup(), self._loop).result(timeout=10)
            self._runner = None
        if self._loop.is_running():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_mock(cfg: PolicyConfig, bind_addr=("127.0.0.1", 0), time_scale: float = 1.0,
               seed: int = 0) -> MockServer:
    """Start the mock on ``bind_addr`` (port 0 picks a free port) and return its handle."""
    host, port = bind_addr
    return MockServer(MockApp(cfg, time_scale=time_scale, seed=seed), host, port).start()
