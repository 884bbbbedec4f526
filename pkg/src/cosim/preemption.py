"""Layer-wise preemption: the arrival-time monitor and the safepoint timeline
of an in-flight iteration."""

from __future__ import annotations

from enum import Enum
from typing import Callable

from cosim.perf_model import BatchPlan, PerfCoefficients, estimate_exec_time
from cosim.types import NS_PER_MS, ClusterConfig

PINNED_READ_S = 7e-6
# barrier cost on one GPU (13 us NVLink broadcast plus launch) and the
# measured per-check cost at TP=4 minus the pinned read
BROADCAST_SINGLE_S = 14e-6
BROADCAST_TP_S = 160.2e-6


class Decision(str, Enum):
    NOOP = "noop"
    SIGNAL_PREEMPT = "signal_preempt"


class Action(str, Enum):
    CONTINUE = "continue"
    DROP_OFFLINE = "drop_offline"


def tp_safepoint_cost(tp_degree: int, include_broadcast: bool | None = None) -> float:
    """Seconds per safepoint check.

    A single GPU needs only the pinned-memory flag read unless the barrier is
    explicitly counted; tensor-parallel runs always pay the broadcast.
    """
    if tp_degree < 1:
        raise ValueError("tp_degree must be >= 1")
    if tp_degree == 1:
        return PINNED_READ_S + (BROADCAST_SINGLE_S if include_broadcast else 0.0)
    return PINNED_READ_S + BROADCAST_TP_S


class IterationExecution:
    """Timeline of one iteration on the simulated device.

    Layers take uniform time. With instrumentation on, a check of
    ``check_ns`` follows every ``interval``-th layer except the last; the
    flag is read when the check completes. Times are kept as floats
    relative to the segment start and rounded only when reported.
    """

    def __init__(
        self,
        plan: BatchPlan,
        start_ns: int,
        latency_ms: float,
        cluster: ClusterConfig,
        instrumented: bool = True,
        exec_id: int = 0,
    ) -> None:
        self.plan = plan
        self.start_ns = start_ns
        self.latency_ms = latency_ms
        self.num_layers = cluster.num_layers
        self.interval = cluster.safepoint_interval_layers
        self.check_ns = int(round(cluster.safepoint_check_cost * 1e9)) if instrumented else 0
        self.instrumented = instrumented
        self.exec_id = exec_id
        self.layers_done = 0
        self.preempt_flag = False
        self.preempted_at_layer: int | None = None
        self.signal_ns: int | None = None
        self.checks_done = 0
        # current segment: layers after seg_layer run at seg_pl ns each
        self._seg_start = float(start_ns)
        self._seg_layer = 0
        self._seg_pl = latency_ms * NS_PER_MS / self.num_layers

    @property
    def per_layer_ns(self) -> float:
        return self._seg_pl

    _offline_ids: set[int] | None = None

    def set_offline(self, ids: set[int]) -> None:
        self._offline_ids = set(ids)

    @property
    def offline_ids(self) -> set[int]:
        return self._offline_ids or set()

    def _checks_between(self, lo: int, hi: int) -> int:
        """Checks after layers in (lo, hi], excluding the final layer."""
        if not self.instrumented:
            return 0
        top = min(hi, self.num_layers - 1)
        if top <= lo:
            return 0
        return top // self.interval - lo // self.interval

    def time_at_layer(self, layer: int) -> float:
        """Float ns at which ``layer`` (and any check after it) completes."""
        n_checks = self._checks_between(self._seg_layer, layer)
        return self._seg_start + (layer - self._seg_layer) * self._seg_pl + n_checks * self.check_ns

    def next_safepoint(self) -> int | None:
        if not self.instrumented:
            return None
        k = (self.layers_done // self.interval + 1) * self.interval
        return k if k < self.num_layers else None

    def next_event(self) -> tuple[str, int]:
        """('safepoint', t) or ('end', t) for the next timeline event."""
        k = self.next_safepoint()
        if k is None:
            return "end", int(round(self.time_at_layer(self.num_layers)))
        return "safepoint", int(round(self.time_at_layer(k)))

    def end_ns(self) -> int:
        return int(round(self.time_at_layer(self.num_layers)))

    def elapsed_ms(self, now: int) -> float:
        return (now - self.start_ns) / NS_PER_MS

    def signal(self, now: int) -> None:
        if not self.preempt_flag:
            self.preempt_flag = True
            self.signal_ns = now

    def retime(self, layer: int, residual_latency_ms: float) -> None:
        """Re-base the remaining layers on a new full-iteration latency."""
        self._seg_start = self.time_at_layer(layer)
        self._seg_layer = layer
        self._seg_pl = residual_latency_ms * NS_PER_MS / self.num_layers


def on_recv_online_request(
    execution: IterationExecution | None,
    coeffs: PerfCoefficients,
    online_plan: BatchPlan,
    now: int,
    ttft_target_ms: float,
) -> Decision:
    """Arrival-time monitor: preempt when waiting out the batch would miss TTFT."""
    if execution is None or not execution.offline_ids:
        return Decision.NOOP
    t_on = estimate_exec_time(coeffs, online_plan)
    t_remaining = estimate_exec_time(coeffs, execution.plan) - execution.elapsed_ms(now)
    if t_remaining + t_on > ttft_target_ms:
        return Decision.SIGNAL_PREEMPT
    return Decision.NOOP


def safepoint_check(
    execution: IterationExecution,
    now: int,
    residual_latency: Callable[[BatchPlan], float] | None = None,
) -> Action:
    """Process the check that completes at ``now``.

    The check cost is already part of the timeline. On a pending signal the
    offline entries leave the plan and the remaining layers are re-timed
    from the online-only residual.
    """
    k = execution.next_safepoint()
    if k is None:
        raise RuntimeError("no safepoint pending")
    execution.layers_done = k
    execution.checks_done += 1
    if not execution.preempt_flag:
        return Action.CONTINUE
    execution.preempt_flag = False
    if not execution.offline_ids:
        return Action.CONTINUE
    offline = execution.offline_ids
    residual = BatchPlan.of(e for e in execution.plan.entries if e.req_id not in offline)
    execution.plan = residual
    execution.set_offline(set())
    execution.preempted_at_layer = k
    if residual and residual_latency is not None:
        execution.retime(k, residual_latency(residual))
    elif not residual:
        execution.retime(k, 0.0)
    return Action.DROP_OFFLINE
