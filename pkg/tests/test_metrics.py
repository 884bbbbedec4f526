from __future__ import annotations

import pytest

from cosim import metrics as M
from cosim.types import Request, SloConfig, to_ns


def online(rid=0, arrival=0.0, tokens=(), inp=10, out=None) -> Request:
    r = Request.new(rid, "online", arrival, inp, out or max(len(tokens), 1))
    r.token_ns = [to_ns(t) for t in tokens]
    if tokens:
        r.first_token_ns = r.token_ns[0]
        r.prefill_done = inp
        r.decode_done = len(tokens)
    return r


def test_nearest_rank_percentile():
    xs = list(range(1, 101))
    assert M.percentile(xs, 0.5) == 50
    assert M.percentile(xs, 0.99) == 99
    assert M.percentile(xs, 1.0) == 100
    assert M.percentile([3.0], 0.99) == 3.0
    assert M.percentile([], 0.5) is None
    with pytest.raises(ValueError):
        M.percentile(xs, 0.0)


def test_ttft_single_and_chunked():
    assert M.ttft(online(tokens=[0.051])) == pytest.approx(0.051)
    assert M.ttft(online(arrival=0.0, tokens=[0.11, 0.2])) == pytest.approx(0.11)
    assert M.ttft(online()) is None


def test_tbt_samples():
    assert M.tbt_samples(online(tokens=[1.0, 1.1, 1.2])) == pytest.approx([0.1, 0.1])
    assert M.tbt_samples(online(tokens=[1.0])) == []


def test_offline_throughput_arithmetic():
    r = Request.new(0, "offline", 0.0, 4096, 256)
    r.prefill_done, r.decode_done = 4096, 256
    assert M.offline_throughput([r], 10.0) == pytest.approx(435.2)
    assert M.offline_throughput([online(tokens=[1.0])], 10.0) == 0.0


def test_recomputed_tokens_excluded_from_throughput():
    r = Request.new(0, "offline", 0.0, 4096, 1)
    r.prefill_done, r.decode_done, r.recomputed_tokens = 4096, 1, 4096
    rep = M.build_report([r], 1.0, SloConfig(1, 1))
    assert rep.offline_throughput == 4097.0
    assert rep.recomputed_tokens == 4096


def test_report_excludes_unfinished_prefill():
    reqs = [online(0, tokens=[0.1, 0.2, 0.3]), online(1, arrival=0.5)]
    rep = M.build_report(reqs, 1.0, SloConfig(0.2, 0.1))
    assert rep.unfinished_prefill == 1
    assert rep.ttft_p99 == pytest.approx(0.1)
    assert rep.tbt_sample_count == 2 and rep.tbt_attainment == 1.0
    assert rep.ttft_attainment == 1.0


def test_request_csv_round_trip(tmp_path):
    reqs = [online(0, tokens=[0.1, 0.25, 0.3]), online(1, arrival=0.2, tokens=[0.4, 0.5]),
            Request.new(2, "offline", 0.0, 5, 5)]
    M.write_requests(reqs, tmp_path)
    back = M.read_tbt_from_csv(tmp_path)
    assert back == {0: M.tbt_samples(reqs[0]), 1: M.tbt_samples(reqs[1])}


def test_metrics_json_is_sorted(tmp_path):
    rep = M.build_report([online(tokens=[0.1, 0.2])], 1.0, SloConfig(1, 1))
    M.write_metrics(rep, tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    keys = list(M.read_metrics(tmp_path / "m.json"))
    assert keys == sorted(keys) and text.endswith("\n")


def test_timeseries_windows():
    reqs = [online(0, tokens=[1.0, 1.2]), online(1, arrival=6.0, tokens=[7.0])]
    rows = M.timeseries(reqs, [(to_ns(2.0), 50), (to_ns(8.0), 100)], horizon=10.0)
    assert [r["t"] for r in rows] == [0.0, 5.0]
    assert rows[0]["p99_ttft_5s"] == pytest.approx(1.0)
    assert rows[0]["p99_tbt_5s"] == pytest.approx(0.2)
    assert rows[1]["p99_tbt_5s"] is None
    assert [r["offline_tput_5s"] for r in rows] == [10.0, 20.0]
