from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cosim.calibration import DATA_DIR
from cosim.workload import (
    LengthSpec,
    OnlineSpec,
    TraceError,
    WorkloadSpec,
    gamma_params,
    gen_gamma_arrivals,
    generate,
    load_trace,
    offered_tokens_per_s,
    save_trace,
)
from cosim.types import RequestClass

LENGTHS = DATA_DIR / "lengths_chat.csv"


def test_gamma_params():
    shape, scale = gamma_params(2.0, 0.5)
    assert shape == pytest.approx(4.0)
    assert scale == pytest.approx(1 / (2.0 * 4))
    assert gamma_params(3.0, 1.0) == pytest.approx((1.0, 1 / 3.0))


def test_rate_and_cv_statistics():
    rates, cvs = [], []
    for seed in range(20):
        t = np.array(gen_gamma_arrivals(2.0, 0.5, 600.0, seed))
        gaps = np.diff(np.concatenate([[0.0], t]))
        rates.append(len(t) / 600.0)
        cvs.append(gaps.std() / gaps.mean())
    assert abs(np.mean(rates) - 2.0) / 2.0 < 0.05
    assert abs(np.mean(cvs) - 0.5) / 0.5 < 0.10
    assert all(abs(r - 2.0) / 2.0 < 0.05 for r in rates)


def test_backlog_at_time_zero():
    reqs = generate(WorkloadSpec(seed=3))
    off = [r for r in reqs if not r.online]
    assert len(off) == 512
    assert all(r.arrival_ns == 0 and r.cls is RequestClass.OFFLINE for r in off)


def test_trace_round_trip_is_byte_identical(tmp_path: Path):
    spec = WorkloadSpec(online=OnlineSpec(2.0, 0.5, 30.0), seed=11)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_trace(generate(spec), a)
    save_trace(generate(spec), b)
    assert a.read_bytes() == b.read_bytes()
    # loading sorts by arrival; after that, load/save is a fixed point
    c = tmp_path / "c.jsonl"
    save_trace(load_trace(a), b)
    save_trace(load_trace(b), c)
    assert b.read_bytes() == c.read_bytes()
    assert sorted(a.read_text().splitlines()) == sorted(b.read_text().splitlines())


def test_trace_line_parsing(tmp_path: Path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"t":0.0,"class":"online","in":4096,"out":256}\n')
    (r,) = load_trace(p)
    assert (r.arrival_ns, r.cls, r.input_tokens, r.output_tokens) == (0, RequestClass.ONLINE, 4096, 256)


@pytest.mark.parametrize("line", ['{"t": 1.0, "class": "online", "in": 4}', "not json",
                                  '{"t": 1.0, "class": "batch", "in": 4, "out": 1}'])
def test_malformed_line_reports_line_number(tmp_path: Path, line: str):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"t":0.0,"class":"online","in":1,"out":1}\n' + line + "\n")
    with pytest.raises(TraceError, match=":2:"):
        load_trace(p)


def test_negative_tokens_rejected(tmp_path: Path):
    p = tmp_path / "neg.jsonl"
    p.write_text('{"t":0.0,"class":"online","in":-5,"out":1}\n')
    with pytest.raises(TraceError):
        load_trace(p)


def test_empirical_lengths_means():
    spec = WorkloadSpec(online=OnlineSpec(20.0, 1.0, 600.0, LengthSpec(lengths_file=str(LENGTHS))),
                        seed=5)
    on = [r for r in generate(spec) if r.online]
    assert abs(np.mean([r.input_tokens for r in on]) - 2747) / 2747 < 0.05
    assert abs(np.mean([r.output_tokens for r in on]) - 267) / 267 < 0.05


def test_length_sampling_keeps_pairs():
    pairs = set()
    with open(LENGTHS) as fh:
        next(fh)
        pairs = {tuple(int(x) for x in line.split(",")) for line in fh}
    spec = WorkloadSpec(online=OnlineSpec(5.0, 1.0, 60.0, LengthSpec(lengths_file=str(LENGTHS))), seed=1)
    assert all((r.input_tokens, r.output_tokens) in pairs for r in generate(spec) if r.online)


def test_offered_load_helper():
    assert offered_tokens_per_s(OnlineSpec(2.0, 0.5, 10.0)) == pytest.approx(2.0 * (4096 + 256))
