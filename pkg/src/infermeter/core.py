"""Shared domain types: requests, token timelines, run records, seeding."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "RequestSpec",
    "TokenTimeline",
    "RunRecord",
    "TimelineError",
    "NonMonotonicTimestamps",
    "EmptyTimeline",
    "NegativeTime",
    "validate_timeline",
    "rng_stream",
    "workload_fingerprint",
    "FINISH_REASONS",
]

FINISH_REASONS = ("length", "stop", "error")


class TimelineError(ValueError):
    """Base class for timeline invariant violations."""


class NonMonotonicTimestamps(TimelineError):
    pass


class EmptyTimeline(TimelineError):
    pass


class NegativeTime(TimelineError):
    pass


def _check_time(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise NegativeTime(f"{name} must be finite, got {value!r}")
    if value < 0:
        raise NegativeTime(f"{name} must be non-negative, got {value!r}")


@dataclass(frozen=True)
class RequestSpec:
    """One inference request.

    ``arrival_time`` may be ``None`` for trace rows without timestamps; it is
    filled in by :func:`infermeter.workload.assign_arrivals`.
    """

    id: str
    prompt_tokens: int
    decode_tokens: int
    arrival_time: Optional[float] = None
    prompt_text: Optional[str] = None

    def __post_init__(self):
        if int(self.prompt_tokens) != self.prompt_tokens or self.prompt_tokens < 1:
            raise ValueError(f"prompt_tokens must be a positive integer, got {self.prompt_tokens!r}")
        if int(self.decode_tokens) != self.decode_tokens or self.decode_tokens < 1:
            raise ValueError(f"decode_tokens must be a positive integer, got {self.decode_tokens!r}")
        if self.arrival_time is not None:
            _check_time("arrival_time", self.arrival_time)

    def with_arrival(self, arrival_time: float) -> "RequestSpec":
        return RequestSpec(self.id, self.prompt_tokens, self.decode_tokens,
                           float(arrival_time), self.prompt_text)

    def to_dict(self) -> dict:
        d = {"id": self.id, "arrival_time": self.arrival_time,
             "prompt_tokens": self.prompt_tokens, "decode_tokens": self.decode_tokens}
        if self.prompt_text is not None:
            d["prompt_text"] = self.prompt_text
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RequestSpec":
        return cls(id=str(d["id"]), prompt_tokens=int(d["prompt_tokens"]),
                   decode_tokens=int(d["decode_tokens"]),
                   arrival_time=d.get("arrival_time"), prompt_text=d.get("prompt_text"))


@dataclass(frozen=True)
class TokenTimeline:
    """Observed timestamps of one request, in seconds relative to run start.

    ``token_times[i]`` is the receipt time of the i-th token event, which
    carries ``tokens_per_event[i]`` tokens. ``schedule_time`` is only known
    for simulated runs; live timelines leave it ``None``.
    """

    request_id: str
    submit_time: float
    token_times: tuple = ()
    tokens_per_event: tuple = ()
    finished: bool = True
    finish_reason: str = "length"
    schedule_time: Optional[float] = None
    usage_reported: bool = True
    dispatch_skew_s: Optional[float] = None
    reported_tokens: Optional[int] = None
    error: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "token_times", tuple(float(t) for t in self.token_times))
        tpe = self.tokens_per_event
        if not tpe and self.token_times:
            tpe = (1,) * len(self.token_times)
        object.__setattr__(self, "tokens_per_event", tuple(int(k) for k in tpe))
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"finish_reason must be one of {FINISH_REASONS}")

    @property
    def n_events(self) -> int:
        return len(self.token_times)

    @property
    def n_tokens(self) -> int:
        return sum(self.tokens_per_event)

    @property
    def finish_time(self) -> Optional[float]:
        return self.token_times[-1] if self.token_times else None

    @property
    def scheduling_delay(self) -> Optional[float]:
        if self.schedule_time is None:
            return None
        return self.schedule_time - self.submit_time

    def token_arrivals(self) -> np.ndarray:
        """Per-token arrival times; an event carrying k tokens repeats its timestamp k times."""
        return np.repeat(np.asarray(self.token_times, dtype=float),
                         np.asarray(self.tokens_per_event, dtype=int))

    def shifted(self, dt: float) -> "TokenTimeline":
        sched = None if self.schedule_time is None else self.schedule_time + dt
        return TokenTimeline(
            self.request_id, self.submit_time + dt, tuple(t + dt for t in self.token_times),
            self.tokens_per_event, self.finished, self.finish_reason, sched,
            self.usage_reported, self.dispatch_skew_s, self.reported_tokens, self.error)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_times"] = list(self.token_times)
        d["tokens_per_event"] = list(self.tokens_per_event)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TokenTimeline":
        return cls(**{**d, "token_times": tuple(d.get("token_times", ())),
                      "tokens_per_event": tuple(d.get("tokens_per_event", ()))})


def validate_timeline(t: TokenTimeline) -> TokenTimeline:
    """Return ``t`` unchanged if every timeline invariant holds, else raise."""
    _check_time("submit_time", t.submit_time)
    if len(t.tokens_per_event) != len(t.token_times):
        raise TimelineError("tokens_per_event must be parallel to token_times")
    if any(k < 1 for k in t.tokens_per_event):
        raise TimelineError("tokens_per_event entries must be positive")
    if t.finished and t.finish_reason != "error" and not t.token_times:
        raise EmptyTimeline(f"request {t.request_id}: finished with zero token events")
    for i, ts in enumerate(t.token_times):
        _check_time(f"token_times[{i}]", ts)
    times = t.token_times
    if times and times[0] < t.submit_time:
        raise NonMonotonicTimestamps(
            f"request {t.request_id}: first token {times[0]} precedes submit {t.submit_time}")
    for i in range(1, len(times)):
        if times[i] < times[i - 1]:
            raise NonMonotonicTimestamps(
                f"request {t.request_id}: token_times[{i}]={times[i]} < token_times[{i - 1}]={times[i - 1]}")
    if t.schedule_time is not None:
        _check_time("schedule_time", t.schedule_time)
        if t.schedule_time < t.submit_time or (times and t.schedule_time > times[0]):
            raise NonMonotonicTimestamps(
                f"request {t.request_id}: schedule_time outside [submit, first token]")
    return t


@dataclass
class RunRecord:
    """Everything observed during one run; the unit of persistence."""

    config_fingerprint: str
    seed: int
    requests: list
    timelines: list
    warmup_cutoff: float = 0.0
    cooldown_cutoff: float = math.inf
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.warmup_cutoff > self.cooldown_cutoff:
            raise ValueError("warmup_cutoff must not exceed cooldown_cutoff")
        ids = {}
        for r in self.requests:
            if r.id in ids:
                raise ValueError(f"duplicate request id {r.id!r}")
            ids[r.id] = r
        seen = set()
        for t in self.timelines:
            if t.request_id not in ids:
                raise ValueError(f"timeline for unknown request {t.request_id!r}")
            if t.request_id in seen:
                raise ValueError(f"two timelines for request {t.request_id!r}")
            seen.add(t.request_id)

    def request_map(self) -> dict:
        return {r.id: r for r in self.requests}

    @property
    def workload_fingerprint(self) -> str:
        return workload_fingerprint(self.requests)

    def to_dict(self) -> dict:
        return {
            "schema": "infermeter.runrecord/1",
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "warmup_cutoff": self.warmup_cutoff,
            "cooldown_cutoff": None if math.isinf(self.cooldown_cutoff) else self.cooldown_cutoff,
            "meta": self.meta,
            "requests": [r.to_dict() for r in self.requests],
            "timelines": [t.to_dict() for t in self.timelines],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        cool = d.get("cooldown_cutoff")
        return cls(
            config_fingerprint=d["config_fingerprint"], seed=int(d["seed"]),
            requests=[RequestSpec.from_dict(r) for r in d["requests"]],
            timelines=[TokenTimeline.from_dict(t) for t in d["timelines"]],
            warmup_cutoff=float(d.get("warmup_cutoff", 0.0)),
            cooldown_cutoff=math.inf if cool is None else float(cool),
            meta=d.get("meta", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def export_events_csv(self, path) -> Path:
        """One row per token event: request_id, event_index, time_s, tokens."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["request_id", "event_index", "time_s", "tokens"])
            for t in self.timelines:
                for i, (ts, k) in enumerate(zip(t.token_times, t.tokens_per_event)):
                    w.writerow([t.request_id, i, repr(ts), k])
        return path


def workload_fingerprint(requests: Iterable[RequestSpec]) -> str:
    h = hashlib.sha256()
    for r in requests:
        arrival = "-" if r.arrival_time is None else repr(float(r.arrival_time))
        h.update(f"{r.id}|{arrival}|{r.prompt_tokens}|{r.decode_tokens}\n".encode())
    return h.hexdigest()[:16]


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one subsystem, derived from the run seed and a stable label."""
    label_key = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), label_key]))


def sorted_by_arrival(requests: Sequence[RequestSpec]) -> list:
    return sorted(requests, key=lambda r: (r.arrival_time, r.id))
