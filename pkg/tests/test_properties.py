from __future__ import annotations

from hypothesis import given, settings
from hypothesis import strategies as st

from cosim.kv_cache import KvManager, Location
from cosim.metrics import percentile
from cosim.perf_model import BatchEntry, BatchPlan, PerfCoefficients, predict, predict_with, schedulable_tokens
from cosim.types import ClusterConfig, Request

coeffs = st.builds(
    PerfCoefficients,
    st.floats(0, 0.1), st.floats(0, 1e-5), st.floats(0, 1e-3), st.floats(0, 20),
)
entries = st.lists(st.tuples(st.integers(1, 2048), st.integers(0, 40_000)), max_size=6)


def plan(es):
    return BatchPlan.of([BatchEntry(i, p, c) for i, (p, c) in enumerate(es)])


@given(coeffs, entries, st.integers(1, 4096), st.integers(0, 40_000), st.floats(0, 400))
@settings(max_examples=300, deadline=None)
def test_schedulable_is_feasible_and_maximal(co, es, remaining, ctx, budget):
    pl = plan(es)
    p = schedulable_tokens(co, pl, remaining, ctx, budget)
    assert 0 <= p <= remaining
    if p:
        assert predict_with(co, pl, p, ctx) <= budget
    if p < remaining:
        assert predict_with(co, pl, p + 1, ctx) > budget


@given(coeffs, entries, st.integers(1, 512), st.integers(0, 4096))
def test_predict_monotone_in_tokens(co, es, p, ctx):
    pl = plan(es)
    assert predict_with(co, pl, p + 1, ctx) >= predict_with(co, pl, p, ctx)
    assert predict_with(co, pl, p, ctx) >= predict(co, pl)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=200), st.floats(0.01, 1.0))
def test_percentile_is_a_sample_and_ordered(xs, q):
    v = percentile(xs, q)
    assert v in xs
    assert sum(x <= v for x in xs) >= q * len(xs) - 1e-9


@given(st.lists(st.tuples(st.integers(1, 200), st.sampled_from(["ckpt", "land", "evict", "prefetch"])),
                max_size=40))
@settings(max_examples=100, deadline=None)
def test_page_accounting_under_random_ops(ops):
    cl = ClusterConfig(kv_bytes_per_token=1024, gpu_kv_capacity=64 * 16 * 1024,
                       host_kv_capacity=32 * 16 * 1024, d2h_bandwidth=1e9, h2d_bandwidth=1e9)
    kv = KvManager(cl)
    reqs = {}
    jobs = []
    for i, (n, op) in enumerate(ops):
        rid = i % 3
        if rid not in reqs:
            reqs[rid] = Request.new(rid, "offline", 0.0, 10_000, 10)
        r = reqs[rid]
        if kv.resident(rid) and not r.recompute_pending and kv.allocate(r, n) == 0:
            touched = kv.commit_tokens(rid, n)
            r.prefill_done += n
            if op == "ckpt":
                job = kv.checkpoint_incremental({rid: touched}, i)
                if job:
                    jobs.append(job)
        if op == "land" and jobs:
            kv.on_transfer_done(jobs.pop(0))
        elif op == "evict":
            kv.evict_offline_pages(rid, i)
        elif op == "prefetch":
            job = kv.prefetch(rid, i)
            if job:
                kv.on_transfer_done(job)
        kv.check_invariants()
        assert 0 <= kv.gpu_used <= kv.gpu_total and 0 <= kv.host_used <= kv.host_total
        total = sum(kv.location_counts(x)[loc] for x in reqs for loc in Location)
        assert total == sum(len(kv.page_table(x)) for x in reqs)
