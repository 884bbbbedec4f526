"""Discrete-event loop binding the scheduler, preemption timeline, KV manager
and latency oracle into end-to-end runs, plus parameter sweeps.

Time is integer nanoseconds. Events are ordered by (time, kind priority,
request id, sequence); the kind priority processes transfer completions,
then arrivals, then layer boundaries, then iteration ends.
"""

from __future__ import annotations

import copy
import hashlib
import heapq
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from cosim import metrics as M
from cosim.kv_cache import KvManager, TransferJob
from cosim.perf_model import (
    BatchPlan,
    OracleParams,
    PerfCoefficients,
    fit,
    noise_factor,
    oracle_base,
    profile,
)
from cosim.preemption import (
    Action,
    Decision,
    IterationExecution,
    on_recv_online_request,
    safepoint_check,
)
from cosim.scheduler import Scheduler, SchedulerPolicy
from cosim.types import (
    NS_PER_MS,
    ClusterConfig,
    ConfigError,
    Request,
    RequestClass,
    SloConfig,
    to_ns,
    to_s,
)
from cosim.workload import WorkloadSpec, generate, load_trace, offline_sampler

SWEEP_AXES = ("rate", "slo_scale", "cv", "in_len", "out_len")


class LivelockError(RuntimeError):
    pass


class Kind(IntEnum):
    TRANSFER_DONE = 0
    ARRIVAL = 1
    LAYER_BOUNDARY = 2
    ITERATION_END = 3


class SimEvent(NamedTuple):
    """Heap entry; ``sequence`` is unique so ``payload`` is never compared."""

    time: int
    kind: Kind
    key: int
    sequence: int
    payload: Any = None


# -- configuration ---------------------------------------------------------


def _default_oracle() -> OracleParams:
    from cosim.calibration import derive_8b

    return derive_8b()

_CLUSTER_KEYS = set(ClusterConfig.__dataclass_fields__)
_TOP_KEYS = {"cluster", "oracle", "policy", "slo", "workload", "trace", "seed",
             "max_sim_time", "record_events", "check_invariants", "name"}


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    oracle: OracleParams = field(default_factory=lambda: _default_oracle())
    policy: SchedulerPolicy = field(default_factory=SchedulerPolicy)
    slo: dict = field(default_factory=dict)  # ttft_slo/tbt_slo may be omitted
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    trace: str | None = None
    seed: int = 0
    max_sim_time: float = 7200.0
    record_events: bool = True
    check_invariants: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        # keys starting with "_" are annotations
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        extra = set(d) - _TOP_KEYS
        if extra:
            raise ConfigError(f"unknown run config keys: {sorted(extra)}")
        try:
            cl = d.get("cluster", {})
            bad = set(cl) - _CLUSTER_KEYS
            if bad:
                raise ConfigError(f"unknown cluster keys: {sorted(bad)}")
            cluster = ClusterConfig(**cl)
            oracle = OracleParams.from_dict(d["oracle"]) if "oracle" in d else cls().oracle
            policy = SchedulerPolicy.from_dict(d.get("policy", {}))
            slo = dict(d.get("slo", {}))
            bad = set(slo) - {"ttft_slo", "tbt_slo", "scale", "safety_margin"}
            if bad:
                raise ConfigError(f"unknown slo keys: {sorted(bad)}")
            seed = int(d.get("seed", 0))
            wl = dict(d.get("workload", {}))
            wl.setdefault("seed", seed)
            workload = WorkloadSpec.from_dict(wl)
            cfg = cls(cluster, oracle, policy, slo, workload, d.get("trace"), seed,
                      float(d.get("max_sim_time", 7200.0)), bool(d.get("record_events", True)),
                      bool(d.get("check_invariants", False)))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        if cfg.max_sim_time <= 0:
            raise ConfigError("max_sim_time must be positive")
        if slo:
            SloConfig(slo.get("ttft_slo", 1.0), slo.get("tbt_slo", 1.0),
                      slo.get("scale", 1.0), slo.get("safety_margin", 0.05))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = {
            "cluster": self.cluster.to_dict(),
            "oracle": self.oracle.to_dict(),
            "policy": self.policy.to_dict(),
            "slo": dict(self.slo),
            "workload": self.workload.to_dict(),
            "seed": self.seed,
            "max_sim_time": self.max_sim_time,
            "record_events": self.record_events,
            "check_invariants": self.check_invariants,
        }
        if self.trace:
            d["trace"] = self.trace
        return d

    def with_policy(self, **kw) -> "RunConfig":
        return replace(self, policy=replace(self.policy, **kw))


def _slo_scale(cfg: RunConfig) -> float:
    return float(cfg.slo.get("scale", 1.0))


# -- results ---------------------------------------------------------------


@dataclass
class RunResult:
    report: M.MetricsReport
    requests: list[Request]
    events: list[dict]
    iterations: list[tuple[int, int, int, int]]  # start, end, offline tokens, d2h bytes
    coeffs: PerfCoefficients
    slo: SloConfig
    stats: dict

    def write(self, out_dir: str | Path, figures: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M.write_metrics(self.report, out / "metrics.json")
        M.write_requests(self.requests, out)
        with open(out / "events.jsonl", "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev) + "\n")
        rows = self.timeseries()
        M.write_timeseries(rows, out / "timeseries.csv")
        if figures:
            from cosim.plotting import render_run

            render_run(self, out)

    def timeseries(self) -> list[dict]:
        return M.timeseries(self.requests, [(e, tok) for _, e, tok, _ in self.iterations], self.report.horizon)


# -- simulation --------------------------------------------------------------


class Simulation:
    def __init__(
        self,
        cfg: RunConfig,
        requests: Sequence[Request] | None = None,
        slo: SloConfig | None = None,
        coeffs: PerfCoefficients | None = None,
    ) -> None:
        self.cfg = cfg
        if requests is None:
            requests = load_trace(cfg.trace) if cfg.trace else generate(cfg.workload)
        self.requests = [copy.deepcopy(r) for r in requests]
        if coeffs is None:
            coeffs = fit(profile(cfg.oracle, seed=np.random.default_rng([cfg.seed, 3])))
        self.coeffs = coeffs
        self.slo = slo or resolve_slo(cfg, self.requests, coeffs)
        self.kv = KvManager(cfg.cluster, incremental=cfg.policy.page_eviction)
        self.sched = Scheduler(cfg.policy, cfg.cluster, coeffs, self.slo, self.kv)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.now = 0
        self.exec: IterationExecution | None = None
        self._exec_seq = 0
        self._factor = 1.0
        self.events: list[dict] = []
        self.iterations: list[tuple[int, int, int, int]] = []
        self.committed = 0
        # incremental state for check_invariants
        self._live: list[Request] = []
        self._future: list[tuple[int, int, Request]] = []  # online requests not yet arrived
        self._n_seen = 0
        self._done_tokens = 0
        self.delayed_compute = 0
        self.drop_latencies: list[int] = []
        self.d2h_bytes = 0.0
        self.h2d_bytes = 0.0
        self.event_count = 0
        self.drained = False
        self._gpu_free_at = 0
        self._replenish = None
        self._next_id = max((r.id for r in self.requests), default=-1) + 1
        online = [r for r in self.requests if r.online]
        self._arrivals_left = len(online)
        if cfg.trace:
            self.horizon_ns = max((r.arrival_ns for r in online), default=0)
        else:
            self.horizon_ns = to_ns(cfg.workload.online.duration)

    # -- event plumbing ----------------------------------------------------

    def _push(self, t: int, kind: Kind, key: int = -1, payload: Any = None) -> None:
        if t < self.now:
            raise RuntimeError(f"event scheduled in the past ({t} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, SimEvent(t, kind, key, self._seq, payload))

    def _log(self, event: str, **kw) -> None:
        if self.cfg.record_events:
            self.events.append({"t": round(to_s(self.now), 9), "event": event, **kw})

    def _push_transfer(self, job: TransferJob | None) -> None:
        if job is None:
            return
        if job.direction == "d2h":
            self.d2h_bytes += job.nbytes
        else:
            self.h2d_bytes += job.nbytes
        self._push(job.done_ns, Kind.TRANSFER_DONE, job.job_id, job)

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        for r in self.requests:
            if r.online:
                self._push(r.arrival_ns, Kind.ARRIVAL, r.id, r)
            else:
                self.sched.add_offline(r)
        limit = to_ns(self.cfg.max_sim_time)
        self._dispatch()
        while self._heap:
            ev = heapq.heappop(self._heap)
            if ev.time > limit:
                raise LivelockError(
                    f"simulated time {to_s(ev.time):.3f}s exceeds max_sim_time {self.cfg.max_sim_time}s; "
                    f"{len(self.sched.state.online)} online requests pending, "
                    f"{self._arrivals_left} arrivals left"
                )
            self.now = ev.time
            self.event_count += 1
            if ev.kind is Kind.ARRIVAL:
                self._on_arrival(ev.payload)
            elif ev.kind is Kind.TRANSFER_DONE:
                self._on_transfer(ev.payload)
            elif ev.kind is Kind.LAYER_BOUNDARY:
                if self.exec is not None and ev.key == self.exec.exec_id:
                    self._on_safepoint()
            else:
                if self.exec is not None and ev.key == self.exec.exec_id:
                    self._on_iteration_end()
            if self.exec is None:
                self._dispatch()
            if self.cfg.check_invariants:
                self.check_invariants()
            if self._done():
                break
        else:
            if self._arrivals_left or self.sched.state.online:
                raise LivelockError(
                    f"no pending events at {to_s(self.now):.3f}s with "
                    f"{len(self.sched.state.online)} online requests unfinished"
                )
        return self._result()

    def _done(self) -> bool:
        return self._arrivals_left == 0 and not self.sched.state.online and self.now >= self.horizon_ns

    # -- handlers ------------------------------------------------------------

    def _on_arrival(self, req: Request) -> None:
        self._arrivals_left -= 1
        self.sched.add_online(req)
        self._log("arrival", req=req.id)
        ex = self.exec
        if not self.cfg.policy.preemptive or ex is None or not ex.offline_ids or ex.preempt_flag:
            return
        decision = on_recv_online_request(
            ex, self.coeffs, self.sched.online_pending_plan(), self.now, self.slo.ttft_target * 1000.0
        )
        reason = "ttft"
        if decision is Decision.NOOP and self.sched.memory_pressure(req):
            decision, reason = Decision.SIGNAL_PREEMPT, "memory"
        if decision is Decision.SIGNAL_PREEMPT and ex.next_safepoint() is not None:
            ex.signal(self.now)
            self._log("signal", req=req.id, reason=reason)

    def _on_transfer(self, job: TransferJob) -> None:
        self.kv.on_transfer_done(job)

    def _residual_latency(self, plan: BatchPlan) -> float:
        return oracle_base(self.cfg.oracle, plan) * self._factor

    def _on_safepoint(self) -> None:
        ex = self.exec
        dropped = set(ex.offline_ids)
        signal_ns = ex.signal_ns if ex.preempt_flag else None
        action = safepoint_check(ex, self.now, self._residual_latency)
        if action is Action.DROP_OFFLINE:
            self.sched.on_preempt_drop(dropped)
            self.drop_latencies.append(self.now - signal_ns)
            self._log("preempt", layer=ex.preempted_at_layer, dropped=sorted(dropped))
            if not ex.plan:
                self._finish_iteration()
                return
        kind, t = ex.next_event()
        self._push(t, Kind.LAYER_BOUNDARY if kind == "safepoint" else Kind.ITERATION_END, ex.exec_id)

    def _on_iteration_end(self) -> None:
        self._finish_iteration()

    def _finish_iteration(self) -> None:
        ex = self.exec
        finished, touched, tokens = self.sched.on_iteration_end(ex.plan, self.now)
        self.committed += tokens["online"] + tokens["offline"]
        d2h = 0.0
        if self.cfg.policy.page_eviction and touched:
            job = self.kv.checkpoint_incremental(touched, self.now)
            if job is not None:
                d2h = job.nbytes
                self._push_transfer(job)
        self.iterations.append((ex.start_ns, self.now, tokens["offline"], int(round(d2h))))
        for r in finished:
            if r.online:
                self._log("finish", req=r.id)
        self._gpu_free_at = self.now
        self.exec = None
        self._maybe_replenish()

    def _maybe_replenish(self) -> None:
        st = self.sched.state
        if st.offline_queue or self.cfg.policy.name == "online_only":
            return
        spec = self.cfg.workload.offline
        if self.cfg.trace or not spec.replenish or spec.backlog == 0:
            if not st.active and not st.paused:
                self.drained = True
            return
        if self._replenish is None:
            self._replenish = offline_sampler(self.cfg.workload)
        for _ in range(spec.backlog):
            i, o = self._replenish()
            r = Request.new(self._next_id, RequestClass.OFFLINE, to_s(self.now), i, o)
            self._next_id += 1
            self.requests.append(r)
            self.sched.add_offline(r)

    def _dispatch(self) -> None:
        build = self.sched.build_batch(self.now)
        for job in build.transfers:
            self._push_transfer(job)
        if build.stall_ns:
            self.delayed_compute += 1
        if not build.plan:
            return
        start = self.now + build.stall_ns
        if start < self._gpu_free_at:
            raise AssertionError("iterations overlap on the device")
        self._factor = max(noise_factor(self.cfg.oracle, self.rng), 1e-3)
        latency = oracle_base(self.cfg.oracle, build.plan) * self._factor
        self._exec_seq += 1
        ex = IterationExecution(build.plan, start, latency, self.cfg.cluster,
                                instrumented=self.cfg.policy.preemptive, exec_id=self._exec_seq)
        ex.set_offline(build.offline_ids)
        self.exec = ex
        kind, t = ex.next_event()
        self._push(t, Kind.LAYER_BOUNDARY if kind == "safepoint" else Kind.ITERATION_END, ex.exec_id)

    # -- checks and results --------------------------------------------------

    def check_invariants(self) -> None:
        self.kv.check_invariants()
        st = self.sched.state
        queued = {r.id for r in st.offline_queue}
        active, paused = set(st.active), set(st.paused)
        assert not (queued & active) and not (queued & paused) and not (active & paused), "queue overlap"
        # finished requests never change: check them once, then keep only their token total
        for r in self.requests[self._n_seen:]:  # requests added since the last check
            if r.online:
                heapq.heappush(self._future, (r.arrival_ns, r.id, r))
            else:
                self._live.append(r)
        self._n_seen = len(self.requests)
        while self._future and self._future[0][0] <= self.now:
            self._live.append(heapq.heappop(self._future)[2])
        live = []
        total = self._done_tokens
        for r in self._live:
            assert r.prefill_done <= r.input_tokens and r.decode_done <= r.output_tokens
            if r.token_ns:
                assert r.token_ns[0] >= r.arrival_ns, f"req {r.id} produced a token before arrival"
            total += r.prefill_done + r.decode_done
            if r.finished:
                self._done_tokens += r.prefill_done + r.decode_done
            else:
                live.append(r)
        self._live = live
        assert total == self.committed, f"token conservation {total} != {self.committed}"
        if len(self.iterations) >= 2:
            assert self.iterations[-1][0] >= self.iterations[-2][1], "iterations overlap"

    def _result(self) -> RunResult:
        horizon = to_s(self.now)
        c = self.sched.counters
        rep = M.build_report(
            self.requests,
            horizon,
            self.slo,
            forced_admissions=c.forced_admissions,
            preemptions=c.preemptions,
            iterations=len(self.iterations),
            drained=self.drained,
            delayed_compute_events=self.delayed_compute,
            max_arrival_to_drop=(max(self.drop_latencies) / 1e9 if self.drop_latencies else None),
            counters=c.to_dict(),
        )
        rep.transferred_bytes = {"d2h": self.d2h_bytes, "h2d": self.h2d_bytes}
        stats = {"events": self.event_count, "arrival_to_drop_ns": self.drop_latencies}
        return RunResult(rep, self.requests, self.events, self.iterations, self.coeffs, self.slo, stats)


def resolve_slo(cfg: RunConfig, requests: Sequence[Request], coeffs: PerfCoefficients) -> SloConfig:
    """Use configured SLOs; derive missing ones from an online-only pre-run's P99."""
    s = cfg.slo
    scale = float(s.get("scale", 1.0))
    margin = float(s.get("safety_margin", 0.05))
    if "ttft_slo" in s and "tbt_slo" in s:
        return SloConfig(float(s["ttft_slo"]), float(s["tbt_slo"]), scale, margin)
    base = replace(cfg, policy=SchedulerPolicy(name="online_only"), slo={}, record_events=False,
                   check_invariants=False)
    # the pre-run's own SLO is irrelevant to online-only batching
    pre = Simulation(base, [r for r in requests if r.online], SloConfig(1.0, 1.0), coeffs).run()
    ttft = float(s.get("ttft_slo", pre.report.ttft_p99 or 1.0))
    tbt = float(s.get("tbt_slo", pre.report.tbt_p99 or 1.0))
    return SloConfig(ttft, tbt, scale, margin)


def run(cfg: RunConfig, requests: Sequence[Request] | None = None, **kw) -> RunResult:
    return Simulation(cfg, requests, **kw).run()


# -- sweeps ------------------------------------------------------------------


def derive_seed(seed: int, axis: str, value: float) -> int:
    h = hashlib.blake2b(f"{seed}|{axis}|{value!r}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") & 0x7FFF_FFFF


def sweep_config(base: RunConfig, axis: str, value: float) -> RunConfig:
    """Config for one sweep point.

    Workload axes get a seed derived from (seed, axis, value). The SLO-scale
    axis keeps the base seed so every point replays the same trace. Length
    axes rescale the online rate to hold offered tokens/s constant.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    wl = base.workload
    on = wl.online
    if axis == "slo_scale":
        return replace(base, slo={**base.slo, "scale": float(value)})
    seed = derive_seed(base.seed, axis, value)
    if axis == "rate":
        on = replace(on, rate=float(value))
    elif axis == "cv":
        on = replace(on, cv=float(value))
    else:
        old = on.lengths
        new = replace(old, input_tokens=int(value)) if axis == "in_len" else replace(old, output_tokens=int(value))
        on = replace(on, lengths=new, rate=on.rate * old.mean_tokens() / new.mean_tokens())
    return replace(base, seed=seed, workload=replace(wl, online=on, seed=seed))


def _run_point(args: tuple[RunConfig, str, float]) -> M.MetricsReport:
    base, axis, value = args
    return run(sweep_config(base, axis, value)).report


def sweep(base: RunConfig, axis: str, values: Sequence[float], workers: int = 1) -> list[M.MetricsReport]:
    if not values:
        raise ValueError("sweep needs at least one value")
    jobs = [(base, axis, v) for v in values]
    for j in jobs:
        sweep_config(*j)  # validate before spawning
    if workers <= 1:
        return [_run_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, jobs))
