"""Per-request prefill deadlines: isolated profiling, quadratic fit, scheduling slack."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .core import RequestSpec
from .metrics import DeadlineSpec

__all__ = [
    "PrefillFit",
    "PrefillCurve",
    "DeadlinePolicy",
    "InsufficientPoints",
    "NegativeCurvature",
    "NonMonotoneDeadline",
    "DEFAULT_PROFILE_LENGTHS",
    "profile_prefill",
    "make_deadlines",
]

logger = logging.getLogger(__name__)

DEFAULT_PROFILE_LENGTHS = (512, 1024, 2048, 4096, 8192, 16384)
INTERACTIVE_SLACK_S = 0.5


class InsufficientPoints(ValueError):
    pass


class NegativeCurvature(UserWarning):
    """Quadratic fit bent downwards beyond tolerance; a linear fit was used instead."""


class NonMonotoneDeadline(ValueError):
    pass


@dataclass(frozen=True)
class PrefillFit:
    """``T_p(n) ~ c0 + c1 * n + c2 * n**2`` with the points it was fitted on."""

    coefficients: tuple
    sample_points: tuple = ()
    residual_rms: float = 0.0
    linear_fallback: bool = False

    def __call__(self, n):
        c0, c1, c2 = self.coefficients
        n = np.asarray(n, dtype=float)
        out = c0 + c1 * n + c2 * n * n
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"coefficients": list(self.coefficients),
                "sample_points": [list(p) for p in self.sample_points],
                "residual_rms": self.residual_rms, "linear_fallback": self.linear_fallback}

    @classmethod
    def from_dict(cls, d: dict) -> "PrefillFit":
        return cls(tuple(float(c) for c in d["coefficients"]),
                   tuple((int(n), float(s)) for n, s in d.get("sample_points", ())),
                   float(d.get("residual_rms", 0.0)), bool(d.get("linear_fallback", False)))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PrefillFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


class PrefillCurve(RegressorMixin, BaseEstimator):
    """Least-squares quadratic of prefill time against prompt length.

    Parameters
    ----------
    curvature_tol : float, default=0.01
        A negative quadratic coefficient is tolerated (and clamped to zero) if
        its contribution at the largest observed length is below this fraction
        of the predicted time there. Beyond that a linear fit is used and a
        :class:`NegativeCurvature` warning is issued.

    Attributes
    ----------
    coef_ : ndarray of shape (3,)
        ``(c0, c1, c2)``.
    residual_rms_ : float
    linear_fallback_ : bool
    """

    def __init__(self, curvature_tol: float = 0.01):
        self.curvature_tol = curvature_tol

    def fit(self, X, y):
        X = check_array(X, ensure_2d=False, dtype=float).ravel()
        y = check_array(y, ensure_2d=False, dtype=float).ravel()
        check_consistent_length(X, y)
        if len(np.unique(X)) < 3:
            raise InsufficientPoints("a quadratic fit needs at least 3 distinct prompt lengths")
        # scale lengths to keep the normal equations well conditioned
        scale = float(np.max(X))
        u = X / scale
        A = np.column_stack([np.ones_like(u), u, u * u])
        beta, *_ = np.linalg.lstsq(A, y, rcond=None)
        coef = np.array([beta[0], beta[1] / scale, beta[2] / scale**2])
        self.linear_fallback_ = False
        if coef[2] < 0:
            bend = -coef[2] * scale**2
            level = abs(coef[0] + coef[1] * scale + coef[2] * scale**2)
            if bend > self.curvature_tol * max(level, 1e-12):
                warnings.warn(f"prefill fit has negative curvature ({coef[2]:.3g}); using a linear fit",
                              NegativeCurvature, stacklevel=2)
                self.linear_fallback_ = True
            b1, *_ = np.linalg.lstsq(A[:, :2], y, rcond=None)
            coef = np.array([b1[0], b1[1] / scale, 0.0])
        self.coef_ = coef
        self.residual_rms_ = float(np.sqrt(np.mean((self.predict(X) - y) ** 2)))
        self.sample_points_ = tuple(zip(X.astype(int).tolist(), y.tolist()))
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_2d=False, dtype=float).ravel()
        c0, c1, c2 = self.coef_
        return c0 + c1 * X + c2 * X * X

    def to_fit(self) -> PrefillFit:
        check_is_fitted(self, "coef_")
        return PrefillFit(tuple(float(c) for c in self.coef_), self.sample_points_,
                          self.residual_rms_, self.linear_fallback_)


def profile_prefill(target, lengths: Sequence[int] = DEFAULT_PROFILE_LENGTHS,
                    reps_per_length: int = 2, seed: int = 0) -> PrefillFit:
    """Measure isolated prefill time per prompt length and fit the quadratic.

    ``target`` is a :class:`~infermeter.simengine.PolicyConfig` (simulated, T_p
    taken as TTFT on an idle engine) or an
    :class:`~infermeter.client.EndpointConfig` (live, one single-token request
    at a time, TTFT measured on the wire). Each length is represented by the
    median of its repetitions.
    """
    lengths = [int(n) for n in lengths]
    if len(set(lengths)) < 3:
        raise InsufficientPoints("profiling needs at least 3 distinct prompt lengths")
    if reps_per_length < 1:
        raise ValueError("reps_per_length must be >= 1")
    from .client import EndpointConfig
    from .simengine import PolicyConfig, simulate_isolated

    xs, ys = [], []
    for n in sorted(set(lengths)):
        samples = []
        for rep in range(reps_per_length):
            spec = RequestSpec(id=f"profile-{n}-{rep}", prompt_tokens=n, decode_tokens=1, arrival_time=0.0)
            if isinstance(target, PolicyConfig):
                tl = simulate_isolated(spec, target, seed=seed + rep)
            elif isinstance(target, EndpointConfig):
                tl = _measure_live(spec, target, seed)
            else:
                raise TypeError(f"unsupported profiling target {type(target).__name__}")
            samples.append(tl.token_times[0] - tl.submit_time)
        xs.append(n)
        ys.append(float(np.median(samples)))
        logger.debug("prefill profile n=%d median=%.6fs", n, ys[-1])
    return PrefillCurve().fit(xs, ys).to_fit()


def _measure_live(spec: RequestSpec, ep, seed: int):
    from .client import run_load

    rec = run_load([spec], ep, seed=seed, check_skew=False)
    tl = rec.timelines[0]
    if not tl.token_times:
        raise RuntimeError(f"profiling request failed: {tl.error}")
    return tl


@dataclass(frozen=True)
class DeadlinePolicy:
    """Prefill deadline ``fit(N_p) + scheduling_slack_s``; fixed decode deadline."""

    fit: PrefillFit
    scheduling_slack_s: float = INTERACTIVE_SLACK_S
    decode_deadline_s: float = 0.05
    max_prompt_tokens: int = 131072

    def __post_init__(self):
        if not self.decode_deadline_s > 0:
            raise ValueError("decode_deadline_s must be > 0")
        c0, c1, c2 = self.fit.coefficients
        if self.fit(1) + self.scheduling_slack_s <= 0:
            raise NonMonotoneDeadline("prefill deadline is not positive at N_p=1")
        # with c2 >= 0 the slope is smallest at n=1; with c2 < 0 at the upper end
        lo_slope = c1 + 2 * c2 * (1 if c2 >= 0 else self.max_prompt_tokens)
        if lo_slope < 0:
            raise NonMonotoneDeadline(
                f"fitted prefill curve decreases on [1, {self.max_prompt_tokens}] (slope {lo_slope:.3g})")

    @classmethod
    def linear(cls, s_per_token: float, slack_s: float = INTERACTIVE_SLACK_S,
               decode_deadline_s: float = 0.05) -> "DeadlinePolicy":
        return cls(PrefillFit((0.0, s_per_token, 0.0)), slack_s, decode_deadline_s)

    def to_dict(self) -> dict:
        return {"fit": self.fit.to_dict(), "scheduling_slack_s": self.scheduling_slack_s,
                "decode_deadline_s": self.decode_deadline_s, "max_prompt_tokens": self.max_prompt_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "DeadlinePolicy":
        return cls(PrefillFit.from_dict(d["fit"]), float(d["scheduling_slack_s"]),
                   float(d["decode_deadline_s"]), int(d.get("max_prompt_tokens", 131072)))


def make_deadlines(policy: DeadlinePolicy, spec: RequestSpec) -> DeadlineSpec:
    return DeadlineSpec(prefill_deadline_s=policy.fit(spec.prompt_tokens) + policy.scheduling_slack_s,
                        decode_deadline_s=policy.decode_deadline_s)
