from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from ..core import config_fingerprint

POLICIES = ("prefill_priority", "chunked_prefill", "speculative")
POLICY_ALIASES = {"prefill": "prefill_priority", "chunked": "chunked_prefill",
                  "spec": "speculative", "autoregressive": "prefill_priority"}


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModelConfig:
    """Cost model of the simulated engine (all times in seconds).

    Prefill of n tokens costs ``linear * n + quad * n**2``. A decode step over
    b sequences costs ``decode_base_s + decode_per_seq_s * b``. A speculative
    step costs ``draft_len * draft_step_s + verify_step_s``.
    """

    prefill_linear_s_per_token: float = 1.5e-4
    prefill_quad_s_per_token_sq: float = 5e-9
    decode_base_s: float = 0.025
    decode_per_seq_s: float = 2e-4
    max_batch_seqs: int = 64
    chunk_tokens: Optional[int] = 512
    draft_len: Optional[int] = 4
    accept_prob: Optional[float] = 0.8
    draft_step_s: Optional[float] = 0.008
    verify_step_s: Optional[float] = 0.03
    draft_prefill_factor: float = 1.2

    def __post_init__(self):
        for name in ("prefill_linear_s_per_token", "prefill_quad_s_per_token_sq",
                     "decode_base_s", "decode_per_seq_s", "draft_step_s", "verify_step_s"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_batch_seqs < 1:
            raise ValueError("max_batch_seqs must be >= 1")
        if self.chunk_tokens is not None and self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")
        if self.draft_len is not None and self.draft_len < 1:
            raise ValueError("draft_len must be >= 1")
        if self.accept_prob is not None and not 0 <= self.accept_prob <= 1:
            raise ValueError("accept_prob must lie in [0, 1]")
        if self.draft_prefill_factor < 1:
            raise ValueError("draft_prefill_factor must be >= 1")

    def prefill_cost(self, n: int) -> float:
        return self.prefill_linear_s_per_token * n + self.prefill_quad_s_per_token_sq * n * n

    def chunk_cost(self, done: int, c: int) -> float:
        # incremental share of the quadratic term, so chunks of one prompt sum to prefill_cost(n)
        end = done + c
        return self.prefill_linear_s_per_token * c + self.prefill_quad_s_per_token_sq * (end * end - done * done)

    def decode_cost(self, b: int) -> float:
        return self.decode_base_s + self.decode_per_seq_s * b

    def speculative_step_cost(self) -> float:
        return self.draft_len * self.draft_step_s + self.verify_step_s


@dataclass(frozen=True)
class PolicyConfig:
    policy: str = "prefill_priority"
    latency: LatencyModelConfig = field(default_factory=LatencyModelConfig)

    def __post_init__(self):
        policy = POLICY_ALIASES.get(self.policy, self.policy)
        object.__setattr__(self, "policy", policy)
        if policy not in POLICIES:
            raise ConfigMismatch(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        lat = self.latency
        if policy == "chunked_prefill" and lat.chunk_tokens is None:
            raise ConfigMismatch("chunked_prefill requires latency.chunk_tokens")
        if policy == "speculative":
            missing = [f for f in ("draft_len", "accept_prob", "draft_step_s", "verify_step_s")
                       if getattr(lat, f) is None]
            if missing:
                raise ConfigMismatch(f"speculative policy requires latency fields {missing}")

    def with_policy(self, policy: str) -> "PolicyConfig":
        return replace(self, policy=policy)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "latency": asdict(self.latency)}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        lat = d.get("latency", {})
        unknown = set(lat) - set(LatencyModelConfig.__dataclass_fields__)
        if unknown:
            raise ConfigMismatch(f"unknown latency keys {sorted(unknown)}")
        return cls(policy=d.get("policy", "prefill_priority"), latency=LatencyModelConfig(**lat))

    @classmethod
    def load(cls, path) -> "PolicyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())
