"""Page-granular KV state: allocation, incremental checkpointing, eviction,
prefetch and recompute fallback.

Each request owns a list of 16-token pages covering ``[0, context_len)``.
A page's location is derived from whether it holds a GPU slot and how many
of its tokens the host copy contains. Transfers run on two FIFO channels
(device-to-host, host-to-device) whose completions are engine events; the
compute timeline never waits on them except for the blocking request-level
swap used by the swap baseline.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from cosim.types import ClusterConfig, NS_PER_S, Request, context_len, pages_for


class Location(str, Enum):
    GPU_ONLY = "gpu"
    HOST_ONLY = "host"
    BOTH = "both"
    DISCARDED = "discarded"


class EvictionError(RuntimeError):
    pass


class _Page:
    __slots__ = ("tokens", "gpu", "host", "inflight", "prefetch", "tag", "evict_pending")

    def __init__(self, tokens: int) -> None:
        self.tokens = tokens
        self.gpu = True
        self.host = 0  # tokens present in the host copy
        self.inflight = 0  # host token count once the queued D2H lands
        self.prefetch = False
        self.tag = False  # host pool was full: recompute if evicted
        self.evict_pending = False

    @property
    def location(self) -> Location:
        if self.gpu:
            return Location.BOTH if self.host >= self.tokens else Location.GPU_ONLY
        if self.host >= self.tokens:
            return Location.HOST_ONLY
        return Location.DISCARDED

    @property
    def holds_host_slot(self) -> bool:
        return self.host > 0 or self.inflight > 0


@dataclass(frozen=True)
class KvPage:
    page_id: tuple[int, int]
    owner: int
    token_range: tuple[int, int]
    location: Location
    bytes: float


@dataclass
class TransferJob:
    job_id: int
    direction: str  # "d2h" | "h2d"
    pages: list[tuple[int, int, int]]  # (req id, page index, host tokens on landing)
    nbytes: float
    enqueue_ns: int
    done_ns: int


class TransferChannel:
    """FIFO bandwidth-limited copy engine."""

    def __init__(self, direction: str, bandwidth: float, fixed_cost_s: float = 0.0) -> None:
        self.direction = direction
        self.bandwidth = bandwidth
        self.fixed_ns = int(round(fixed_cost_s * NS_PER_S))
        self.busy_until = 0
        self.bytes_moved = 0.0

    def duration_ns(self, nbytes: float) -> int:
        return int(math.ceil(nbytes / self.bandwidth * NS_PER_S)) + self.fixed_ns

    def submit(self, job_id: int, pages, nbytes: float, now: int) -> TransferJob:
        start = max(now, self.busy_until)
        done = start + self.duration_ns(nbytes)
        self.busy_until = done
        self.bytes_moved += nbytes
        return TransferJob(job_id, self.direction, pages, nbytes, now, done)


@dataclass
class _ReqKv:
    req: Request
    pages: list[_Page] = field(default_factory=list)
    tokens: int = 0
    reserved: int = 0  # GPU slots held for uncommitted tokens
    off_gpu: int = 0  # pages without a GPU copy (prefetching included)
    discarded: int = 0
    prefetching: int = 0
    pending: int = 0  # GPU pages waiting on a D2H before release


@dataclass
class EvictResult:
    freed_now: int = 0
    freed_later: int = 0
    discarded_tokens: int = 0
    stall_ns: int = 0


class KvManager:
    def __init__(self, cluster: ClusterConfig, incremental: bool = True) -> None:
        self.cluster = cluster
        self.incremental = incremental
        self.gpu_total = cluster.gpu_pages
        self.host_total = cluster.host_pages
        self.gpu_used = 0
        self.host_used = 0
        self.tok_bytes = cluster.shard_bytes_per_token
        self.d2h = TransferChannel("d2h", cluster.d2h_bandwidth, cluster.gather_cost)
        self.h2d = TransferChannel("h2d", cluster.h2d_bandwidth, cluster.gather_cost)
        self._reqs: dict[int, _ReqKv] = {}
        self._host_lru: OrderedDict[tuple[int, int], None] = OrderedDict()
        self._job_seq = 0
        self.recompute_tagged_tokens = 0

    # -- bookkeeping -----------------------------------------------------

    def register(self, req: Request) -> None:
        self._reqs[req.id] = _ReqKv(req)

    def __contains__(self, rid: int) -> bool:
        return rid in self._reqs

    @property
    def gpu_free(self) -> int:
        return self.gpu_total - self.gpu_used

    @property
    def host_free(self) -> int:
        return self.host_total - self.host_used

    def gpu_pages_of(self, rid: int) -> int:
        rk = self._reqs.get(rid)
        if rk is None:
            return 0
        return len(rk.pages) - rk.off_gpu + rk.prefetching

    def pages_needed(self, rid: int, n_tokens: int) -> int:
        """New GPU slots required to append ``n_tokens`` to the request."""
        rk = self._reqs[rid]
        return pages_for(rk.tokens + n_tokens) - len(rk.pages)

    def resident(self, rid: int) -> bool:
        """True when no page waits in host memory or on a pending release.

        Discarded pages count as resident since they are recomputed in place.
        """
        rk = self._reqs.get(rid)
        return rk is None or (rk.off_gpu == rk.discarded and rk.pending == 0)

    def host_only_pages(self, rid: int) -> int:
        rk = self._reqs.get(rid)
        return 0 if rk is None else rk.off_gpu - rk.discarded - rk.prefetching

    def first_discarded_run(self, rid: int, max_tokens: int, max_pages: int | None = None) -> tuple[int, int]:
        """(pages, tokens) of leading discarded pages fitting in ``max_tokens``."""
        rk = self._reqs[rid]
        n_pages = n_tok = 0
        if rk.discarded == 0:
            return 0, 0
        for pg in rk.pages:
            if pg.gpu or pg.host >= pg.tokens or pg.prefetch:
                continue
            if n_tok + pg.tokens > max_tokens or n_pages == max_pages:
                break
            n_pages += 1
            n_tok += pg.tokens
        return n_pages, n_tok

    # -- allocation --------------------------------------------------------

    def reserve(self, rid: int, n_pages: int) -> bool:
        if n_pages <= 0:
            return True
        if n_pages > self.gpu_free:
            return False
        self.gpu_used += n_pages
        self._reqs[rid].reserved += n_pages
        return True

    def unreserve(self, rid: int) -> None:
        rk = self._reqs.get(rid)
        if rk is not None and rk.reserved:
            self.gpu_used -= rk.reserved
            rk.reserved = 0

    def allocate(self, req: Request, n_tokens: int) -> int:
        """Reserve pages for ``n_tokens`` new tokens; returns the page shortfall (0 on success)."""
        if n_tokens < 1:
            raise ValueError("allocate needs at least one token")
        if req.id not in self._reqs:
            self.register(req)
        need = self.pages_needed(req.id, n_tokens)
        if self.reserve(req.id, need):
            return 0
        return need - self.gpu_free

    def commit_tokens(self, rid: int, n_tokens: int) -> list[tuple[int, int]]:
        """Append computed tokens; returns (page index, new tokens) for checkpointing."""
        rk = self._reqs[rid]
        pt = self.cluster.page_tokens
        if rk.pages and not rk.pages[-1].gpu:
            raise RuntimeError(f"request {rid}: commit with the last page off the GPU")
        if n_tokens == 1 and rk.pages and rk.pages[-1].tokens < pt and not rk.reserved:
            rk.pages[-1].tokens += 1
            rk.tokens += 1
            return [(len(rk.pages) - 1, 1)]
        touched = []
        left = n_tokens
        if rk.pages and rk.pages[-1].tokens < pt:
            last = rk.pages[-1]
            add = min(left, self.cluster.page_tokens - last.tokens)
            last.tokens += add
            touched.append((len(rk.pages) - 1, add))
            left -= add
        while left > 0:
            add = min(left, self.cluster.page_tokens)
            if rk.reserved <= 0:
                raise RuntimeError(f"request {rid}: commit without reserved pages")
            rk.reserved -= 1
            rk.pages.append(_Page(add))
            touched.append((len(rk.pages) - 1, add))
            left -= add
        rk.tokens += n_tokens
        if rk.reserved:
            self.gpu_used -= rk.reserved
            rk.reserved = 0
        return touched

    def commit_recompute(self, rid: int, n_pages: int) -> list[tuple[int, int]]:
        """Mark the first ``n_pages`` discarded pages as recomputed on the GPU."""
        rk = self._reqs[rid]
        touched = []
        for idx, pg in enumerate(rk.pages):
            if len(touched) == n_pages:
                break
            if pg.gpu or pg.host >= pg.tokens or pg.prefetch:
                continue
            if rk.reserved <= 0:
                raise RuntimeError(f"request {rid}: recompute without reserved pages")
            rk.reserved -= 1
            pg.gpu = True
            pg.tag = False
            rk.off_gpu -= 1
            rk.discarded -= 1
            rk.req.recompute_pending -= pg.tokens
            touched.append((idx, pg.tokens))
        if rk.reserved:
            self.gpu_used -= rk.reserved
            rk.reserved = 0
        return touched

    def free(self, rid: int) -> None:
        rk = self._reqs.pop(rid, None)
        if rk is None:
            return
        for pg in rk.pages:
            if pg.gpu or pg.prefetch:
                self.gpu_used -= 1
            if pg.holds_host_slot:
                self.host_used -= 1
        self.gpu_used -= rk.reserved

    # -- checkpointing -----------------------------------------------------

    def _take_host_slot(self) -> bool:
        if self.host_used < self.host_total:
            self.host_used += 1
            return True
        # drop the oldest offline host copy whose GPU copy is still present
        while self._host_lru:
            (rid, idx), _ = self._host_lru.popitem(last=False)
            rk = self._reqs.get(rid)
            if rk is None or idx >= len(rk.pages):
                continue
            pg = rk.pages[idx]
            if pg.gpu and pg.host > 0 and pg.inflight == 0 and not pg.evict_pending:
                pg.host = 0
                pg.tag = True
                return True  # slot transfers to the caller
        return False

    def checkpoint_incremental(
        self, touched: dict[int, list[tuple[int, int]]], now: int
    ) -> TransferJob | None:
        """Queue one D2H job covering exactly the newly computed tokens."""
        job_pages = []
        ntok = 0
        for rid, items in touched.items():
            rk = self._reqs.get(rid)
            if rk is None:
                continue
            for idx, _ in items:
                pg = rk.pages[idx]
                if not pg.gpu:
                    continue
                covered = max(pg.host, pg.inflight)
                delta = pg.tokens - covered
                if delta <= 0:
                    continue
                if not pg.holds_host_slot and not self._take_host_slot():
                    pg.tag = True
                    self.recompute_tagged_tokens += delta
                    continue
                pg.tag = False
                pg.inflight = pg.tokens
                job_pages.append((rid, idx, pg.tokens))
                ntok += delta
        if not job_pages:
            return None
        self._job_seq += 1
        return self.d2h.submit(self._job_seq, job_pages, ntok * self.tok_bytes, now)

    def on_transfer_done(self, job: TransferJob) -> int:
        """Apply a landed transfer; returns GPU pages freed by deferred evictions."""
        freed = 0
        for rid, idx, target in job.pages:
            rk = self._reqs.get(rid)
            if rk is None or idx >= len(rk.pages):
                continue
            pg = rk.pages[idx]
            if job.direction == "h2d":
                if pg.prefetch:
                    pg.prefetch = False
                    pg.gpu = True
                    rk.off_gpu -= 1
                    rk.prefetching -= 1
                continue
            if pg.inflight == 0 and pg.host == 0:
                continue  # host copy dropped while in flight
            pg.host = max(pg.host, target)
            if pg.inflight <= target:
                pg.inflight = 0
            if not rk.req.online:
                self._host_lru[(rid, idx)] = None
                self._host_lru.move_to_end((rid, idx))
            if pg.evict_pending and pg.inflight == 0:
                pg.evict_pending = False
                rk.pending -= 1
                if pg.gpu:
                    if pg.host >= pg.tokens:
                        pg.gpu = False
                        rk.off_gpu += 1
                    else:
                        self._discard(rk, pg)
                    self.gpu_used -= 1
                    freed += 1
        return freed

    def _discard(self, rk: _ReqKv, pg: _Page) -> None:
        """Drop every copy of a page; its tokens join the recompute backlog."""
        if pg.gpu:
            pg.gpu = False
            rk.off_gpu += 1
        if pg.holds_host_slot:
            self.host_used -= 1
        pg.host = 0
        pg.inflight = 0
        rk.discarded += 1
        rk.req.recompute_pending += pg.tokens

    # -- eviction ----------------------------------------------------------

    def freeable_pages(self, rid: int) -> int:
        rk = self._reqs.get(rid)
        if rk is None or rk.prefetching:
            return 0
        return len(rk.pages) - rk.off_gpu - rk.pending

    def cheap_pages(self, rid: int) -> int:
        """GPU pages whose host copy is complete (free to drop)."""
        rk = self._reqs.get(rid)
        if rk is None:
            return 0
        return sum(1 for pg in rk.pages if pg.gpu and pg.host >= pg.tokens)

    def evict_offline_pages(
        self,
        rid: int,
        now: int,
        mode: str = "incremental",
        max_pages: int | None = None,
        cheap_only: bool = False,
    ) -> EvictResult:
        """Release GPU pages of a paused offline request.

        ``incremental``: checkpointed pages drop for free, pages with a D2H in
        flight are released when it lands, others are discarded.
        ``cheap_only`` restricts it to pages already checkpointed.
        ``recompute``: the whole request is discarded.
        ``swap``: the whole request is copied out with a blocking transfer.
        """
        rk = self._reqs.get(rid)
        res = EvictResult()
        if rk is None:
            return res
        if rk.req.online:
            raise EvictionError("online pages are not evictable")
        if rk.prefetching:
            return res
        if mode == "incremental":
            budget = math.inf if max_pages is None else max_pages
            # newest tokens first so the resident prefix stays contiguous
            for pg in reversed(rk.pages):
                if res.freed_now + res.freed_later >= budget:
                    break
                if not pg.gpu or pg.evict_pending:
                    continue
                if cheap_only and pg.host < pg.tokens:
                    continue
                if pg.host >= pg.tokens:
                    pg.gpu = False
                    rk.off_gpu += 1
                    self.gpu_used -= 1
                    res.freed_now += 1
                elif pg.inflight >= pg.tokens:
                    pg.evict_pending = True
                    rk.pending += 1
                    res.freed_later += 1
                else:
                    res.discarded_tokens += pg.tokens
                    self._discard(rk, pg)
                    self.gpu_used -= 1
                    res.freed_now += 1
            return res
        if mode == "swap":
            nbytes = 0.0
            for pg in rk.pages:
                if not pg.gpu:
                    continue
                if pg.host < pg.tokens:
                    if not pg.holds_host_slot and not self._take_host_slot():
                        res.discarded_tokens += pg.tokens
                        self._discard(rk, pg)
                        self.gpu_used -= 1
                        res.freed_now += 1
                        continue
                    nbytes += (pg.tokens - pg.host) * self.tok_bytes
                    pg.host = pg.tokens
                    pg.inflight = 0
                pg.gpu = False
                rk.off_gpu += 1
                self.gpu_used -= 1
                res.freed_now += 1
            if nbytes:
                job = self.d2h.submit(0, [], nbytes, now)
                res.stall_ns = job.done_ns - now
            return res
        if mode != "recompute":
            raise ValueError(f"unknown eviction mode {mode!r}")
        rk.pending = 0
        for pg in rk.pages:
            pg.evict_pending = False
            if not pg.gpu and pg.host < pg.tokens:
                continue  # already discarded
            if pg.gpu:
                pg.gpu = False
                rk.off_gpu += 1
                self.gpu_used -= 1
                res.freed_now += 1
            if pg.holds_host_slot:
                self.host_used -= 1
            pg.host = pg.inflight = 0
            rk.discarded += 1
            rk.req.recompute_pending += pg.tokens
            res.discarded_tokens += pg.tokens
        return res

    # -- restore -----------------------------------------------------------

    def prefetch(self, rid: int, now: int) -> TransferJob | None:
        """Queue H2D copies for host-only pages, as far as free GPU slots allow."""
        rk = self._reqs.get(rid)
        if rk is None:
            return None
        pages = []
        nbytes = 0.0
        for idx, pg in enumerate(rk.pages):
            if pg.gpu or pg.prefetch or pg.host < pg.tokens:
                continue
            if self.gpu_free <= 0:
                break
            self.gpu_used += 1
            pg.prefetch = True
            rk.prefetching += 1
            pages.append((rid, idx, pg.host))
            nbytes += pg.tokens * self.tok_bytes
        if not pages:
            return None
        self._job_seq += 1
        return self.h2d.submit(self._job_seq, pages, nbytes, now)

    def swap_in(self, rid: int, now: int) -> int:
        """Blocking restore of every host-only page; returns the stall in ns (-1 if no room)."""
        rk = self._reqs[rid]
        need = [pg for pg in rk.pages if not pg.gpu and pg.host >= pg.tokens and not pg.prefetch]
        if len(need) > self.gpu_free:
            return -1
        nbytes = 0.0
        for pg in need:
            pg.gpu = True
            rk.off_gpu -= 1
            self.gpu_used += 1
            nbytes += pg.tokens * self.tok_bytes
            # swap frees the host copy once restored
            self.host_used -= 1
            pg.host = 0
        if not need:
            return 0
        job = self.h2d.submit(0, [], nbytes, now)
        return job.done_ns - now

    # -- inspection --------------------------------------------------------

    def page_table(self, rid: int) -> list[KvPage]:
        rk = self._reqs.get(rid)
        if rk is None:
            return []
        out = []
        start = 0
        for idx, pg in enumerate(rk.pages):
            out.append(KvPage((rid, idx), rid, (start, start + pg.tokens), pg.location, pg.tokens * self.tok_bytes))
            start += pg.tokens
        return out

    def snapshot(self) -> dict:
        return {
            str(rid): [[p.token_range[0], p.token_range[1], p.location.value] for p in self.page_table(rid)]
            for rid in sorted(self._reqs)
        }

    def location_counts(self, rid: int) -> dict[Location, int]:
        counts = {loc: 0 for loc in Location}
        for p in self.page_table(rid):
            counts[p.location] += 1
        return counts

    def check_invariants(self) -> None:
        """Raise AssertionError if accounting or coverage is inconsistent."""
        gpu = host = 0
        pt = self.cluster.page_tokens
        for rid, rk in self._reqs.items():
            req = rk.req
            assert rk.tokens == context_len(req), f"req {rid}: pages cover {rk.tokens} != context {context_len(req)}"
            assert len(rk.pages) == pages_for(rk.tokens, pt), f"req {rid}: page count"
            off = disc = pre = pending = disc_tok = on_gpu = slots = 0
            last = len(rk.pages) - 1
            for i, pg in enumerate(rk.pages):
                assert (pg.tokens == pt) if i < last else (1 <= pg.tokens <= pt), f"req {rid}: page {i} size"
                assert pg.host <= pg.tokens and pg.inflight <= pg.tokens
                assert not (pg.gpu and pg.prefetch)
                if pg.gpu or pg.prefetch:
                    on_gpu += 1
                if not pg.gpu:
                    off += 1
                    if pg.prefetch:
                        pre += 1
                    elif pg.host < pg.tokens:
                        disc += 1
                        disc_tok += pg.tokens
                pending += pg.evict_pending
                slots += pg.host > 0 or pg.inflight > 0  # holds_host_slot, inlined
            assert off == rk.off_gpu and disc == rk.discarded and pre == rk.prefetching, (
                f"req {rid}: counters off {off}/{rk.off_gpu} disc {disc}/{rk.discarded} pre {pre}/{rk.prefetching}")
            assert rk.pending == pending, f"req {rid}: pending"
            assert req.recompute_pending == disc_tok, f"req {rid}: recompute backlog"
            if req.online:
                assert disc == 0 and off == 0, f"online req {rid} lost GPU pages"
            gpu += on_gpu + rk.reserved
            host += slots
        assert gpu == self.gpu_used, f"gpu accounting {gpu} != {self.gpu_used}"
        assert host == self.host_used, f"host accounting {host} != {self.host_used}"
        assert 0 <= self.gpu_used <= self.gpu_total
        assert 0 <= self.host_used <= self.host_total
        assert self.gpu_used * self.cluster.page_bytes <= self.cluster.gpu_kv_capacity
        assert self.host_used * self.cluster.page_bytes <= self.cluster.host_kv_capacity
