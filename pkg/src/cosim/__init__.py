"""Discrete-event simulator for online/offline LLM co-serving."""

from cosim.types import (
    ClusterConfig,
    Request,
    RequestClass,
    RequestState,
    SloConfig,
    context_len,
)

__all__ = [
    "ClusterConfig",
    "Request",
    "RequestClass",
    "RequestState",
    "SloConfig",
    "context_len",
]

__version__ = "0.1.0"
