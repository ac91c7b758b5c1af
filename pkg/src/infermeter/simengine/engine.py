"""Iteration-level discrete-event simulation of a continuous-batching engine."""
from __future__ import annotations

from collections import deque
from typing import Sequence

import numpy as np

from ..core import RequestSpec, RunRecord, TokenTimeline, rng_stream
from .config import PolicyConfig


class WorkloadEmpty(ValueError):
    pass


class _Seq:
    __slots__ = ("spec", "prefilled_tokens", "schedule_time", "times", "counts", "emitted")

    def __init__(self, spec: RequestSpec):
        self.spec = spec
        self.prefilled_tokens = 0
        self.schedule_time = None
        self.times = []
        self.counts = []
        self.emitted = 0

    @property
    def in_prefill(self) -> bool:
        return self.prefilled_tokens < self.spec.prompt_tokens

    def emit(self, t: float, k: int) -> None:
        k = min(k, self.spec.decode_tokens - self.emitted)
        self.times.append(t)
        self.counts.append(k)
        self.emitted += k

    @property
    def done(self) -> bool:
        return self.emitted >= self.spec.decode_tokens


def simulate(workload: Sequence[RequestSpec], cfg: PolicyConfig, seed: int = 0,
             warmup_frac: float = 0.05) -> RunRecord:
    """Replay ``workload`` through the engine and return the observed timelines.

    Each iteration the scheduler picks work per ``cfg.policy``:

    * ``prefill_priority``: any pending prefill runs alone (all pending
      prompts batched); in-flight decodes pause until it completes.
    * ``chunked_prefill``: every iteration carries the decode batch plus up to
      ``chunk_tokens`` prompt tokens, taken FCFS.
    * ``speculative``: prefill as above (with the draft surcharge); a decode
      iteration drafts ``draft_len`` tokens per sequence, keeps the accepted
      prefix plus one, and releases them together when verification ends.

    Requests are admitted FCFS up to ``max_batch_seqs`` concurrent sequences.
    Work arriving mid-iteration waits for the next iteration boundary.
    """
    if not workload:
        raise WorkloadEmpty("workload has no requests")
    if any(r.arrival_time is None for r in workload):
        raise ValueError("every request needs an arrival_time; see workload.assign_arrivals")
    lat = cfg.latency
    policy = cfg.policy
    rng = rng_stream(seed, "simulator")
    pending = deque(sorted(workload, key=lambda r: (r.arrival_time, r.id)))
    waiting: deque = deque()
    running: list = []
    finished: list = []
    t = pending[0].arrival_time

    while pending or waiting or running:
        while pending and pending[0].arrival_time <= t:
            waiting.append(pending.popleft())
        while waiting and len(running) < lat.max_batch_seqs:
            running.append(_Seq(waiting.popleft()))
        if not running:
            t = pending[0].arrival_time
            continue

        if policy == "chunked_prefill":
            decoding = [s for s in running if not s.in_prefill]
            cost = lat.decode_cost(len(decoding)) if decoding else 0.0
            budget = lat.chunk_tokens
            completing = []
            for s in running:
                if budget == 0:
                    break
                if not s.in_prefill:
                    continue
                c = min(budget, s.spec.prompt_tokens - s.prefilled_tokens)
                cost += lat.chunk_cost(s.prefilled_tokens, c)
                if s.schedule_time is None:
                    s.schedule_time = t
                s.prefilled_tokens += c
                budget -= c
                if not s.in_prefill:
                    completing.append(s)
            t_end = t + cost
            for s in decoding:
                s.emit(t_end, 1)
            for s in completing:
                s.emit(t_end, 1)
        else:
            prefilling = [s for s in running if s.in_prefill]
            if prefilling:
                factor = lat.draft_prefill_factor if policy == "speculative" else 1.0
                cost = factor * sum(lat.prefill_cost(s.spec.prompt_tokens) for s in prefilling)
                t_end = t + cost
                for s in prefilling:
                    s.schedule_time = t
                    s.prefilled_tokens = s.spec.prompt_tokens
                    s.emit(t_end, 1)
            elif policy == "speculative":
                t_end = t + lat.speculative_step_cost()
                draws = rng.random((len(running), lat.draft_len)) < lat.accept_prob
                # accepted = length of the leading run of successful drafts
                accepted = np.where(draws.all(axis=1), lat.draft_len, np.argmin(draws, axis=1))
                for s, a in zip(running, accepted.tolist()):
                    s.emit(t_end, a + 1)
            else:
                t_end = t + lat.decode_cost(len(running))
                for s in running:
                    s.emit(t_end, 1)

        t = t_end
        still = []
        for s in running:
            (finished if s.done else still).append(s)
        running = still

    timelines = {
        s.spec.id: TokenTimeline(
            request_id=s.spec.id, submit_time=s.spec.arrival_time, token_times=tuple(s.times),
            tokens_per_event=tuple(s.counts), finished=True, finish_reason="length",
            schedule_time=s.schedule_time, usage_reported=True)
        for s in finished
    }
    ordered = [timelines[r.id] for r in workload]
    start = min(r.arrival_time for r in workload)
    end = max(tl.token_times[-1] for tl in ordered)
    window = end - start
    return RunRecord(
        config_fingerprint=cfg.fingerprint(), seed=int(seed), requests=list(workload),
        timelines=ordered, warmup_cutoff=start + warmup_frac * window,
        cooldown_cutoff=end - warmup_frac * window,
        meta={"source": "simulator", "policy_config": cfg.to_dict()})


def simulate_isolated(spec: RequestSpec, cfg: PolicyConfig, seed: int = 0) -> TokenTimeline:
    """Simulate one request alone on an idle engine, arriving at t=0."""
    rec = simulate([spec.with_arrival(0.0)], cfg, seed=seed, warmup_frac=0.0)
    return rec.timelines[0]
