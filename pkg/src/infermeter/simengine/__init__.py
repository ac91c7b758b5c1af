from .config import POLICIES, ConfigMismatch, LatencyModelConfig, PolicyConfig
from .engine import WorkloadEmpty, simulate, simulate_isolated
from .server import BindError, MockApp, MockServer, serve_mock

__all__ = [
    "POLICIES",
    "ConfigMismatch",
    "LatencyModelConfig",
    "PolicyConfig",
    "WorkloadEmpty",
    "simulate",
    "simulate_isolated",
    "BindError",
    "MockApp",
    "MockServer",
    "serve_mock",
]
