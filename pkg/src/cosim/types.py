"""Shared domain vocabulary: requests, SLOs, cluster configuration, time."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000
GIB = 1 << 30
KIB = 1 << 10

PAGE_TOKENS = 16


class ConfigError(ValueError):
    """Raised when a configuration fails validation."""


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


def ms_to_ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def to_s(ns: int) -> float:
    return ns / NS_PER_S


class RequestClass(str, Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class RequestState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    PAUSED = "paused"
    FINISHED = "finished"


@dataclass
class Request:
    """One inference request.

    Token timing is kept in integer nanoseconds; the ``*_time`` properties
    convert to seconds. The iteration that finishes the prompt produces the
    first output token, so ``decode_done`` becomes 1 at that point.
    """

    id: int
    cls: RequestClass
    arrival_ns: int
    input_tokens: int
    output_tokens: int
    prefill_done: int = 0
    decode_done: int = 0
    state: RequestState = RequestState.QUEUED
    first_token_ns: int | None = None
    token_ns: list[int] = field(default_factory=list)
    # tokens whose KV was discarded and must be recomputed before resuming
    recompute_pending: int = 0
    recomputed_tokens: int = 0
    paused_seq: int = -1
    online: bool = field(init=False, repr=False, compare=False, default=False)

    def __post_init__(self) -> None:
        self.online = self.cls is RequestClass.ONLINE
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError(
                f"request {self.id}: token counts must be positive "
                f"(in={self.input_tokens}, out={self.output_tokens})"
            )

    @classmethod
    def new(
        cls,
        id: int,
        klass: RequestClass | str,
        arrival_time: float,
        input_tokens: int,
        output_tokens: int,
    ) -> "Request":
        return cls(
            id=id,
            cls=RequestClass(klass),
            arrival_ns=to_ns(arrival_time),
            input_tokens=int(input_tokens),
            output_tokens=int(output_tokens),
        )

    @property
    def arrival_time(self) -> float:
        return to_s(self.arrival_ns)

    @property
    def first_token_time(self) -> float | None:
        return None if self.first_token_ns is None else to_s(self.first_token_ns)

    @property
    def token_completion_times(self) -> list[float]:
        return [to_s(t) for t in self.token_ns]

    @property
    def remaining_prefill(self) -> int:
        return self.input_tokens - self.prefill_done

    @property
    def in_decode(self) -> bool:
        return self.prefill_done == self.input_tokens and self.decode_done < self.output_tokens

    @property
    def finished(self) -> bool:
        return self.state is RequestState.FINISHED

    @property
    def started(self) -> bool:
        return self.prefill_done > 0


def context_len(req: Request) -> int:
    """Tokens whose KV state the request holds."""
    return req.prefill_done + req.decode_done


def work_tokens(req: Request) -> int:
    """Compute tokens the request can contribute to the next iteration."""
    if req.finished:
        return 0
    if req.recompute_pending:
        return req.recompute_pending
    if req.remaining_prefill:
        return req.remaining_prefill
    return 1 if req.decode_done < req.output_tokens else 0


def pages_for(tokens: int, page_tokens: int = PAGE_TOKENS) -> int:
    return -(-tokens // page_tokens)


@dataclass(frozen=True)
class SloConfig:
    ttft_slo: float  # seconds
    tbt_slo: float  # seconds
    scale: float = 1.0
    safety_margin: float = 0.05

    def __post_init__(self) -> None:
        for name in ("ttft_slo", "tbt_slo", "scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"slo.{name} must be positive")
        if not 0.0 <= self.safety_margin < 1.0:
            raise ConfigError("slo.safety_margin must be in [0, 1)")

    @property
    def ttft_target(self) -> float:
        return self.ttft_slo * self.scale

    @property
    def tbt_target(self) -> float:
        return self.tbt_slo * self.scale

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ClusterConfig:
    num_layers: int = 32
    safepoint_interval_layers: int = 4
    kv_bytes_per_token: int = 192 * KIB
    gpu_kv_capacity: int = 48 * GIB
    host_kv_capacity: int = 2048 * GIB
    d2h_bandwidth: float = 37 * GIB  # bytes/s
    h2d_bandwidth: float = 37 * GIB
    safepoint_check_cost: float = 21e-6  # seconds
    tp_degree: int = 1
    page_tokens: int = PAGE_TOKENS
    max_batched_tokens: int = 8192
    gather_cost: float = 0.0  # seconds, flat per transfer job (gather kernel)

    def __post_init__(self) -> None:
        if self.page_tokens != PAGE_TOKENS:
            raise ConfigError(f"page_tokens is fixed at {PAGE_TOKENS}")
        for name in (
            "num_layers",
            "safepoint_interval_layers",
            "kv_bytes_per_token",
            "gpu_kv_capacity",
            "host_kv_capacity",
            "d2h_bandwidth",
            "h2d_bandwidth",
            "tp_degree",
            "max_batched_tokens",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"cluster.{name} must be positive")
        if self.safepoint_check_cost < 0 or self.gather_cost < 0:
            raise ConfigError("cluster costs must be non-negative")

    @property
    def page_bytes(self) -> float:
        """Bytes of one full page on one TP shard."""
        return self.page_tokens * self.kv_bytes_per_token / self.tp_degree

    @property
    def shard_bytes_per_token(self) -> float:
        return self.kv_bytes_per_token / self.tp_degree

    @property
    def gpu_pages(self) -> int:
        return int(self.gpu_kv_capacity // self.page_bytes)

    @property
    def host_pages(self) -> int:
        return int(self.host_kv_capacity // self.page_bytes)

    @property
    def num_safepoints(self) -> int:
        """Instrumented layer boundaries per iteration (iteration end excluded)."""
        return (self.num_layers - 1) // self.safepoint_interval_layers

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

