"""Iteration-level batch construction for the SLO-aware co-serving policy and
the three baselines (chunked-prefill with preemption, non-preemptive, and
online-only).

The scheduler owns request queues and drives the KV manager; it never
advances time. The engine calls ``build_batch`` when the device is idle,
``on_preempt_drop`` when a safepoint discards offline work and
``on_iteration_end`` when an iteration completes.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Iterator
from dataclasses import dataclass, field

from cosim.kv_cache import KvManager, TransferJob
from cosim.perf_model import (
    BatchEntry,
    BatchPlan,
    PerfCoefficients,
    max_throughput_tokens,
    predict_with,
    schedulable_tokens,
)
from cosim.types import (
    ClusterConfig,
    ConfigError,
    Request,
    RequestState,
    SloConfig,
    context_len,
    pages_for,
    work_tokens,
)

POLICIES = ("slo_aware", "sarathi_preemptive", "non_preemptive", "online_only")
EVICT_MODES = ("recompute", "swap")


@dataclass(frozen=True)
class SchedulerPolicy:
    name: str = "slo_aware"
    chunk_size: int = 2048  # token budget of the chunked baselines
    layerwise_preemption: bool = True
    incremental_kv: bool = True
    evict_mode: str = "recompute"  # request-level eviction when incremental_kv is off
    forced_chunk: int = 128
    offline_optimized: bool = True

    def __post_init__(self) -> None:
        if self.name not in POLICIES:
            raise ConfigError(f"unknown policy {self.name!r}; expected one of {', '.join(POLICIES)}")
        if self.evict_mode not in EVICT_MODES:
            raise ConfigError(f"policy.evict_mode must be one of {EVICT_MODES}")
        if self.chunk_size < 1 or self.forced_chunk < 1:
            raise ConfigError("policy chunk sizes must be positive")

    @property
    def slo_aware(self) -> bool:
        return self.name == "slo_aware"

    @property
    def preemptive(self) -> bool:
        return self.slo_aware and self.layerwise_preemption

    @property
    def page_eviction(self) -> bool:
        return self.slo_aware and self.incremental_kv

    @classmethod
    def from_dict(cls, d: dict | str) -> "SchedulerPolicy":
        if isinstance(d, str):
            return cls(name=d)
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown policy keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SchedulerState:
    online: dict[int, Request] = field(default_factory=dict)  # arrived, unfinished, FIFO
    offline_queue: deque[Request] = field(default_factory=deque)  # not yet started
    active: list[int] = field(default_factory=list)  # offline ids in the last plan, plan order
    paused: dict[int, int] = field(default_factory=dict)  # offline id -> pause sequence
    running_plan: BatchPlan = field(default_factory=BatchPlan)


@dataclass
class Build:
    plan: BatchPlan
    offline_ids: set[int]
    stall_ns: int = 0
    transfers: list[TransferJob] = field(default_factory=list)


@dataclass
class Counters:
    iterations: int = 0
    forced_admissions: int = 0
    preemptions: int = 0
    dropped_entries: int = 0
    evicted_pages: int = 0
    discarded_tokens: int = 0
    prefetch_jobs: int = 0
    swap_stall_ns: int = 0
    memory_stalls: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Scheduler:
    def __init__(
        self,
        policy: SchedulerPolicy,
        cluster: ClusterConfig,
        coeffs: PerfCoefficients,
        slo: SloConfig,
        kv: KvManager | None = None,
    ) -> None:
        self.policy = policy
        self.cluster = cluster
        self.coeffs = coeffs
        self.slo = slo
        self.kv = kv or KvManager(cluster, incremental=policy.page_eviction)
        self.state = SchedulerState()
        self.requests: dict[int, Request] = {}
        self.counters = Counters()
        self._pause_seq = 0
        # non-preemptive admission: pages admitted requests may still claim
        self._np_admitted: set[int] = set()
        # online requests whose prefill has started
        self._online_started: set[int] = set()

    # -- budget ------------------------------------------------------------

    @property
    def budget_ms(self) -> float:
        """Per-iteration latency budget; safepoint checks are paid out of it."""
        b = self.slo.tbt_target * (1.0 - self.slo.safety_margin) * 1000.0
        if self.policy.preemptive:
            b -= self.cluster.num_safepoints * self.cluster.safepoint_check_cost * 1000.0
        return b

    # -- arrivals ------------------------------------------------------------

    def add_online(self, req: Request) -> None:
        need = pages_for(req.input_tokens + req.output_tokens)
        if need > self.kv.gpu_total:
            raise ConfigError(f"online request {req.id} needs {need} KV pages; the GPU pool has {self.kv.gpu_total}")
        self.requests[req.id] = req
        self.state.online[req.id] = req

    def add_offline(self, req: Request) -> None:
        if self.policy.name == "online_only":
            return
        self.requests[req.id] = req
        self.state.offline_queue.append(req)

    @property
    def offline_backlog(self) -> int:
        return len(self.state.offline_queue)

    def online_pending_plan(self) -> BatchPlan:
        """Outstanding online prefill work as one plan (for the arrival monitor)."""
        plan = BatchPlan()
        for r in self.state.online.values():
            if r.remaining_prefill > 0:
                plan.add(BatchEntry(r.id, r.remaining_prefill, context_len(r)))
        return plan

    def memory_pressure(self, req: Request) -> bool:
        """True if the first chunk of ``req`` cannot get pages without touching the running plan."""
        first = min(req.remaining_prefill, self.policy.chunk_size) or 1
        need = pages_for(context_len(req) + first + 1)
        need -= self.kv.gpu_pages_of(req.id)
        running = set(self.state.running_plan.ids())
        spare = self.kv.gpu_free
        for rid in self._victims(exclude=running):
            if spare >= need:
                break
            spare += self.kv.freeable_pages(rid)
        return spare < need

    # -- helpers -----------------------------------------------------------

    def _ensure_registered(self, req: Request) -> None:
        if req.id not in self.kv:
            self.kv.register(req)

    def _new_tokens(self, req: Request, p: int, kind: str) -> int:
        """Tokens the entry appends to the request's context."""
        if kind == "prefill" and p == req.remaining_prefill:
            return p + 1
        return p

    def _victims(self, exclude: set[int], below=None) -> list[int]:
        """Offline requests whose pages may be released, first victim first.

        ``below`` (a callable returning ids in priority order) restricts the
        victims to requests ranked after the one asking for memory.
        """
        if below is not None:
            return [rid for rid in reversed(below()) if rid not in exclude and rid in self.kv]
        paused = sorted(self.state.paused, key=lambda r: -self.state.paused[r])
        active = list(reversed(self.state.active))
        return [r for r in paused + active if r not in exclude and r in self.kv]

    def release_offline_kv_on_demand(
        self, need: int, now: int, exclude: set[int], below=None
    ) -> int:
        """Free GPU pages from offline requests until ``need`` pages are free.

        Returns the stall the release imposes on the device (swap mode only).
        """
        if need <= self.kv.gpu_free:
            return 0
        victims = self._victims(exclude, below)
        stall = 0
        if self.policy.page_eviction:
            # checkpointed pages first, newest paused request first
            for cheap_only in (True, False):
                for rid in victims:
                    short = need - self.kv.gpu_free
                    if short <= 0:
                        return 0
                    res = self.kv.evict_offline_pages(rid, now, "incremental", short, cheap_only)
                    self._note_evict(rid, res)
            return 0
        for rid in victims:
            if need <= self.kv.gpu_free:
                break
            if self.kv.freeable_pages(rid) == 0:
                continue
            res = self.kv.evict_offline_pages(rid, now, self.policy.evict_mode)
            self._note_evict(rid, res)
            stall += res.stall_ns
        self.counters.swap_stall_ns += stall
        return stall

    def _note_evict(self, rid: int, res) -> None:
        self.counters.evicted_pages += res.freed_now + res.freed_later
        self.counters.discarded_tokens += res.discarded_tokens
        if rid in self.state.active:
            self.state.active.remove(rid)
            self._pause(rid)

    def _pause(self, rid: int) -> None:
        self._pause_seq += 1
        self.state.paused[rid] = self._pause_seq
        self.requests[rid].state = RequestState.PAUSED
        self.requests[rid].paused_seq = self._pause_seq

    def _fit_memory(
        self, req: Request, p: int, kind: str, now: int, exclude: set[int],
        below, evict: bool,
    ) -> tuple[int, int]:
        """Shrink ``p`` until its pages can be reserved; returns (p, stall_ns)."""
        self._ensure_registered(req)
        stall = 0
        need = self.kv.pages_needed(req.id, self._new_tokens(req, p, kind))
        if need <= 0:
            return p, 0
        if need > self.kv.gpu_free and evict:
            stall = self.release_offline_kv_on_demand(need, now, exclude | {req.id}, below)
        if need <= self.kv.gpu_free:
            self.kv.reserve(req.id, need)
            return p, stall
        # largest p whose pages fit in the free pool
        pt = self.cluster.page_tokens
        held = context_len(req)
        room = (pages_for(held) + self.kv.gpu_free) * pt - held
        fit = min(p, room)
        if kind == "prefill" and fit == req.remaining_prefill:
            fit -= 1  # the completing step also stores the first output token
        if kind != "prefill" and fit < p:
            fit = 0
        if fit <= 0:
            self.counters.memory_stalls += 1
            return 0, stall
        self.kv.reserve(req.id, self.kv.pages_needed(req.id, self._new_tokens(req, fit, kind)))
        return fit, stall

    def _online_admit(self, req: Request) -> bool:
        """Start an online request only if every started online request can still finish.

        Offline pages are always evictable, so the pool only has to cover the
        full footprints of started online requests. Without this, partial
        prefills can fill the pool and block each other for good.
        """
        if req.id in self._online_started:
            return True
        held = sum(pages_for(r.input_tokens + r.output_tokens)
                   for r in self.state.online.values() if r.id in self._online_started)
        if held + pages_for(req.input_tokens + req.output_tokens) > self.kv.gpu_total:
            self.counters.memory_stalls += 1
            return False
        self._online_started.add(req.id)
        return True

    def _entry(self, req: Request, p: int, kind: str) -> BatchEntry:
        if kind == "recompute":
            c = context_len(req) - req.recompute_pending
        else:
            c = context_len(req)
        return BatchEntry(req.id, p, c, kind)

    def _kind(self, req: Request) -> str:
        if req.recompute_pending:
            return "recompute"
        return "prefill" if req.remaining_prefill else "decode"

    def _recompute_tokens(self, req: Request, p: int) -> int:
        """Round a recompute allowance down to whole discarded pages."""
        _, tokens = self.kv.first_discarded_run(req.id, p)
        return tokens

    def _reserve_recompute(self, req: Request, tokens: int, now: int, exclude: set[int],
                           below) -> tuple[int, int]:
        n_pages, tokens = self.kv.first_discarded_run(req.id, tokens)
        stall = 0
        if n_pages > self.kv.gpu_free:
            stall = self.release_offline_kv_on_demand(n_pages, now, exclude | {req.id}, below)
        if n_pages > self.kv.gpu_free:
            n_pages, tokens = self.kv.first_discarded_run(req.id, tokens, self.kv.gpu_free)
        if n_pages == 0:
            self.counters.memory_stalls += 1
            return 0, stall
        self.kv.reserve(req.id, n_pages)
        return tokens, stall

    def started_offline(self) -> list[int]:
        """Started offline ids by resume priority: active, paused resident, paused restoring."""
        st = self.state
        paused = sorted(st.paused, key=lambda r: -st.paused[r])
        resident = [r for r in paused if self.kv.resident(r)]
        restoring = [r for r in paused if not self.kv.resident(r)]
        return list(st.active) + resident + restoring

    def offline_candidates(self) -> Iterator[tuple[Request, Callable[[], list[int]]]]:
        """(request, lower-priority started ids) pairs; started first, then new FIFO."""
        order = self.started_offline()
        for i, rid in enumerate(order):
            yield self.requests[rid], (lambda i=i: order[i + 1:])
        for r in list(self.state.offline_queue):
            yield r, list

    # -- batch construction --------------------------------------------------

    def build_batch(self, now: int) -> Build:
        if self.policy.slo_aware:
            build = self._build_slo_aware(now)
        elif self.policy.name == "non_preemptive":
            build = self._build_non_preemptive(now)
        else:
            build = self._build_chunked(now, offline=self.policy.name == "sarathi_preemptive")
        self.state.running_plan = build.plan
        if build.plan:
            self.counters.iterations += 1
        for e in build.plan.entries:
            r = self.requests[e.req_id]
            r.state = RequestState.RUNNING
            if r.id in self.state.paused:
                del self.state.paused[r.id]
        return build

    def _start_offline(self, req: Request) -> None:
        q = self.state.offline_queue
        if q and q[0] is req:
            q.popleft()
            return
        for i, r in enumerate(q):
            if r is req:
                del q[i]
                return

    def _build_slo_aware(self, now: int) -> Build:
        st = self.state
        plan = BatchPlan()
        budget = self.budget_ms
        cap = self.cluster.max_batched_tokens
        stall = 0
        in_plan: set[int] = set()

        def add(req: Request, p: int, kind: str) -> None:
            plan.add(self._entry(req, p, kind))
            in_plan.add(req.id)

        online = list(st.online.values())
        for r in online:
            if r.in_decode:
                p, s = self._fit_memory(r, 1, "decode", now, in_plan, None, True)
                stall += s
                if p:
                    add(r, 1, "decode")
        forced_ok = True
        for r in online:
            if r.remaining_prefill <= 0:
                continue
            if not self._online_admit(r):
                break
            p = schedulable_tokens(self.coeffs, plan, r.remaining_prefill, context_len(r), budget, cap)
            if p == 0:
                if not forced_ok:
                    break
                p = min(r.remaining_prefill, self.policy.forced_chunk, max(cap - plan.total_p, 0))
                if p == 0:
                    break
                self.counters.forced_admissions += 1
            p, s = self._fit_memory(r, p, "prefill", now, in_plan, None, True)
            stall += s
            forced_ok = False
            if p == 0:
                break
            add(r, p, "prefill")

        transfers: list[TransferJob] = []
        offline_ids: set[int] = set()
        if self.policy.name != "online_only":
            optimized = self.policy.offline_optimized and not st.online
            total_cap = cap
            if optimized:
                started = [context_len(self.requests[r]) for r in self.started_offline()[:64]]
                mean_ctx = int(sum(started) / len(started)) if started else 0
                total_cap = max_throughput_tokens(self.coeffs, mean_ctx, cap)
            co = self.coeffs
            pt = self.cluster.page_tokens
            for r, below in self.offline_candidates():
                if not r.recompute_pending and r.prefill_done == r.input_tokens and r.prefill_done:
                    # decode fast path: one token, usually no new page
                    ctx = r.prefill_done + r.decode_done
                    if optimized:
                        if total_cap - plan.total_p < 1:
                            break
                    elif plan.total_p + 1 > cap or predict_with(co, plan, 1, ctx) > budget:
                        break
                    if ctx % pt and self.kv.resident(r.id):
                        plan.add(BatchEntry(r.id, 1, ctx, "decode"))
                        in_plan.add(r.id)
                        offline_ids.add(r.id)
                        continue
                if not self.kv.resident(r.id):
                    if self.policy.page_eviction and self.kv.gpu_free > 0:
                        job = self.kv.prefetch(r.id, now)
                        if job is not None:
                            transfers.append(job)
                            self.counters.prefetch_jobs += 1
                    continue
                kind = self._kind(r)
                work = work_tokens(r)
                if optimized:
                    p = min(work, total_cap - plan.total_p)
                else:
                    c = context_len(r) - (r.recompute_pending if kind == "recompute" else 0)
                    p = schedulable_tokens(self.coeffs, plan, work, c, budget, cap)
                if p <= 0:
                    break
                if kind == "recompute":
                    p = self._recompute_tokens(r, p)
                    if p == 0:
                        continue
                    p, s = self._reserve_recompute(r, p, now, in_plan, below)
                else:
                    p, s = self._fit_memory(r, p, kind, now, in_plan, below, True)
                stall += s
                if p == 0:
                    if r.state is RequestState.QUEUED:
                        break  # later new requests would not fit either
                    continue
                if r.state is RequestState.QUEUED:
                    self._start_offline(r)
                add(r, p, kind)
                offline_ids.add(r.id)
        return Build(plan, offline_ids, stall, transfers)

    def _build_chunked(self, now: int, offline: bool) -> Build:
        """Token-budget batching: online decodes, online prefill chunks, then offline fill."""
        st = self.state
        plan = BatchPlan()
        budget = self.policy.chunk_size
        stall = 0
        in_plan: set[int] = set()
        evict = offline  # online-only has no offline pages to take

        def add(req: Request, p: int, kind: str) -> None:
            plan.add(self._entry(req, p, kind))
            in_plan.add(req.id)

        online = list(st.online.values())
        for r in online:
            if r.in_decode:
                p, s = self._fit_memory(r, 1, "decode", now, in_plan, None, evict)
                stall += s
                if p:
                    add(r, 1, "decode")
        for r in online:
            left = budget - plan.total_p
            if left <= 0:
                break
            if r.remaining_prefill <= 0:
                continue
            if not self._online_admit(r):
                break
            p, s = self._fit_memory(r, min(r.remaining_prefill, left), "prefill", now, in_plan, None, evict)
            stall += s
            if p == 0:
                break
            add(r, p, "prefill")

        offline_ids: set[int] = set()
        if offline:
            for r, below in self.offline_candidates():
                left = budget - plan.total_p
                if left <= 0:
                    break
                if not self.kv.resident(r.id):
                    # swapped out: blocking copy back before it can run
                    need = self.kv.host_only_pages(r.id)
                    if need > self.kv.gpu_free:
                        stall += self.release_offline_kv_on_demand(need, now, in_plan | {r.id}, below)
                    s = self.kv.swap_in(r.id, now + stall)
                    if s < 0:
                        continue
                    stall += s
                    self.counters.swap_stall_ns += s
                kind = self._kind(r)
                p = min(work_tokens(r), left)
                if kind == "recompute":
                    p = self._recompute_tokens(r, p)
                    if p == 0:
                        continue
                    p, s = self._reserve_recompute(r, p, now, in_plan, below)
                else:
                    p, s = self._fit_memory(r, p, kind, now, in_plan, below, True)
                stall += s
                if p == 0:
                    if r.state is RequestState.QUEUED:
                        break
                    continue
                if r.state is RequestState.QUEUED:
                    self._start_offline(r)
                add(r, p, kind)
                offline_ids.add(r.id)
        return Build(plan, offline_ids, stall)

    def _np_outstanding(self, exclude: int | None = None) -> int:
        """Pages admitted requests may still allocate."""
        out = 0
        for rid in self._np_admitted:
            if rid == exclude:
                continue
            r = self.requests[rid]
            out += pages_for(r.input_tokens + r.output_tokens) - self.kv.gpu_pages_of(rid)
        return out

    def _np_admit(self, req: Request) -> bool:
        if req.id in self._np_admitted:
            return True
        self._ensure_registered(req)
        footprint = pages_for(req.input_tokens + req.output_tokens)
        if self.kv.gpu_free - self._np_outstanding() < footprint:
            return False
        self._np_admitted.add(req.id)
        return True

    def _build_non_preemptive(self, now: int) -> Build:
        """Admitted requests keep their memory until they finish; nothing is evicted."""
        st = self.state
        plan = BatchPlan()
        budget = self.policy.chunk_size
        in_plan: set[int] = set()

        def add(req: Request, p: int, kind: str) -> None:
            self._ensure_registered(req)
            need = self.kv.pages_needed(req.id, self._new_tokens(req, p, kind))
            if not self.kv.reserve(req.id, need):
                raise RuntimeError(f"request {req.id}: admitted footprint not available")
            plan.add(self._entry(req, p, kind))
            in_plan.add(req.id)

        online = list(st.online.values())
        running_off = [self.requests[r] for r in st.active]
        for r in online:
            if r.in_decode and r.id in self._np_admitted:
                add(r, 1, "decode")
        for r in running_off:
            if r.in_decode:
                add(r, 1, "decode")
        for r in online:
            left = budget - plan.total_p
            if left <= 0:
                break
            if r.remaining_prefill <= 0:
                continue
            if not self._np_admit(r):
                self.counters.memory_stalls += 1
                break
            add(r, min(r.remaining_prefill, left), "prefill")
        for r in running_off:
            left = budget - plan.total_p
            if left <= 0:
                break
            if r.remaining_prefill > 0:
                add(r, min(r.remaining_prefill, left), "prefill")
        waiting_online = any(r.id not in self._np_admitted for r in online)
        while st.offline_queue and budget - plan.total_p > 0 and not waiting_online:
            r = st.offline_queue[0]
            if not self._np_admit(r):
                break
            st.offline_queue.popleft()
            add(r, min(r.remaining_prefill, budget - plan.total_p), "prefill")
        offline_ids = {e.req_id for e in plan.entries if not self.requests[e.req_id].online}
        return Build(plan, offline_ids)

    # -- completion ----------------------------------------------------------

    def on_preempt_drop(self, dropped: set[int]) -> None:
        """Offline entries discarded mid-iteration: no progress, reservations returned."""
        self.counters.preemptions += 1
        self.counters.dropped_entries += len(dropped)
        plan = self.state.running_plan
        self.state.running_plan = BatchPlan.of(e for e in plan.entries if e.req_id not in dropped)
        for e in plan.entries:
            if e.req_id in dropped:
                self.kv.unreserve(e.req_id)
        # keep the order they had in the plan
        for rid in reversed([e.req_id for e in plan.entries if e.req_id in dropped]):
            if rid in self.state.active:
                self.state.active.remove(rid)
            self._pause(rid)

    def on_iteration_end(self, plan: BatchPlan, now: int) -> tuple[list[Request], dict[int, list[tuple[int, int]]], dict[str, int]]:
        """Commit progress of ``plan``; returns (finished, touched offline pages, token counts)."""
        finished: list[Request] = []
        touched: dict[int, list[tuple[int, int]]] = {}
        tokens = {"online": 0, "offline": 0, "recompute": 0}
        offline_order: list[int] = []
        for e in plan.entries:
            r = self.requests[e.req_id]
            if e.kind == "recompute":
                n_pages, _ = self.kv.first_discarded_run(r.id, e.p)
                t = self.kv.commit_recompute(r.id, n_pages)
                r.recomputed_tokens += e.p
                tokens["recompute"] += e.p
            else:
                n = e.p
                if e.kind == "prefill":
                    r.prefill_done += e.p
                    if r.prefill_done == r.input_tokens:
                        r.decode_done = 1
                        r.first_token_ns = now
                        r.token_ns.append(now)
                        n += 1
                else:
                    r.decode_done += 1
                    r.token_ns.append(now)
                t = self.kv.commit_tokens(r.id, n)
                tokens["online" if r.online else "offline"] += n
            if not r.online and t:
                touched[r.id] = t
            if r.decode_done >= r.output_tokens:
                r.state = RequestState.FINISHED
                finished.append(r)
                self.kv.free(r.id)
                self._np_admitted.discard(r.id)
                self._online_started.discard(r.id)
                touched.pop(r.id, None)
                if r.online:
                    del self.state.online[r.id]
            elif not r.online:
                offline_order.append(r.id)
        if self.policy.name == "non_preemptive":
            # admitted requests stay running until they finish
            admitted = [rid for rid in self.state.active if not self.requests[rid].finished]
            offline_order = admitted + [r for r in offline_order if r not in set(admitted)]
        else:
            # offline requests that ran before but not now become paused
            keep = set(offline_order)
            for rid in reversed(self.state.active):
                if rid not in keep and not self.requests[rid].finished and rid not in self.state.paused:
                    self._pause(rid)
        self.state.active = offline_order
        self.state.running_plan = BatchPlan()
        return finished, touched, tokens
