"""Latency and throughput metrics plus report serialization.

Percentiles use the nearest-rank definition: the q-quantile of n sorted
samples is element ``ceil(q * n)`` (1-based). It never interpolates, so the
reported numbers are exact sample values and reproducible bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from cosim.types import NS_PER_S, Request, SloConfig, to_s

WINDOW_S = 5.0


def percentile(samples: Sequence[float], q: float) -> float | None:
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    if not samples:
        return None
    s = sorted(samples)
    return s[max(math.ceil(q * len(s)) - 1, 0)]


def ttft(req: Request) -> float | None:
    """Seconds from arrival to the end of the iteration finishing the prompt."""
    if req.first_token_ns is None:
        return None
    return (req.first_token_ns - req.arrival_ns) / NS_PER_S


def tbt_samples(req: Request) -> list[float]:
    """Gaps between consecutive output tokens; token 1 comes from prefill."""
    t = req.token_ns
    return [(b - a) / NS_PER_S for a, b in zip(t, t[1:])]


def committed_tokens(req: Request) -> int:
    return req.prefill_done + req.decode_done


def offline_throughput(requests: Iterable[Request], horizon: float) -> float:
    """Useful offline tokens per second; recomputed tokens are not counted."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return sum(committed_tokens(r) for r in requests if not r.online) / horizon


@dataclass
class MetricsReport:
    ttft_p50: float | None = None
    ttft_p90: float | None = None
    ttft_p99: float | None = None
    ttft_max: float | None = None
    tbt_p50: float | None = None
    tbt_p90: float | None = None
    tbt_p99: float | None = None
    tbt_max: float | None = None
    ttft_attainment: float | None = None
    tbt_attainment: float | None = None
    offline_throughput: float = 0.0
    online_throughput: float = 0.0
    forced_admissions: int = 0
    preemptions: int = 0
    recomputed_tokens: int = 0
    transferred_bytes: dict = field(default_factory=lambda: {"d2h": 0.0, "h2d": 0.0})
    online_requests: int = 0
    online_finished: int = 0
    unfinished_prefill: int = 0
    tbt_sample_count: int = 0
    offline_tokens: int = 0
    horizon: float = 0.0
    iterations: int = 0
    drained: bool = False
    delayed_compute_events: int = 0
    max_arrival_to_drop: float | None = None
    slo: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _quartet(xs: list[float]) -> tuple:
    return tuple(percentile(xs, q) for q in (0.5, 0.9, 0.99, 1.0))


def build_report(
    requests: Sequence[Request],
    horizon: float,
    slo: SloConfig,
    **extra,
) -> MetricsReport:
    online = [r for r in requests if r.online]
    ttfts = [v for v in (ttft(r) for r in online) if v is not None]
    tbts = [x for r in online for x in tbt_samples(r)]
    rep = MetricsReport(**extra)
    rep.ttft_p50, rep.ttft_p90, rep.ttft_p99, rep.ttft_max = _quartet(ttfts)
    rep.tbt_p50, rep.tbt_p90, rep.tbt_p99, rep.tbt_max = _quartet(tbts)
    if ttfts:
        rep.ttft_attainment = sum(v <= slo.ttft_target for v in ttfts) / len(ttfts)
    if tbts:
        rep.tbt_attainment = sum(v <= slo.tbt_target for v in tbts) / len(tbts)
    rep.online_requests = len(online)
    rep.online_finished = sum(r.finished for r in online)
    rep.unfinished_prefill = len(online) - len(ttfts)
    rep.tbt_sample_count = len(tbts)
    rep.offline_tokens = sum(committed_tokens(r) for r in requests if not r.online)
    rep.horizon = horizon
    if horizon > 0:
        rep.offline_throughput = offline_throughput(requests, horizon)
        rep.online_throughput = sum(committed_tokens(r) for r in online) / horizon
    rep.recomputed_tokens = sum(r.recomputed_tokens for r in requests)
    rep.slo = slo.to_dict()
    return rep


def timeseries(
    requests: Sequence[Request],
    iterations: Sequence[tuple[int, int]],
    horizon: float,
    window: float = WINDOW_S,
) -> list[dict]:
    """Per-window P99 TTFT/TBT (by completion time) and offline tokens/s.

    ``iterations`` holds (end_ns, offline tokens committed) pairs.
    """
    n = max(1, math.ceil(horizon / window))
    ttft_w: list[list[float]] = [[] for _ in range(n)]
    tbt_w: list[list[float]] = [[] for _ in range(n)]
    tok_w = [0] * n

    def slot(ns: int) -> int:
        return min(int(to_s(ns) // window), n - 1)

    for r in requests:
        if not r.online:
            continue
        v = ttft(r)
        if v is not None:
            ttft_w[slot(r.first_token_ns)].append(v)
        for t_ns, gap in zip(r.token_ns[1:], tbt_samples(r)):
            tbt_w[slot(t_ns)].append(gap)
    for end_ns, tok in iterations:
        tok_w[slot(end_ns)] += tok
    return [
        {
            "t": round(i * window, 6),
            "p99_ttft_5s": percentile(ttft_w[i], 0.99),
            "p99_tbt_5s": percentile(tbt_w[i], 0.99),
            "offline_tput_5s": tok_w[i] / window,
        }
        for i in range(n)
    ]


# -- writers -----------------------------------------------------------------


def write_metrics(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_requests(requests: Sequence[Request], out_dir: str | Path) -> None:
    """``requests.csv`` plus ``tbt_samples.jsonl`` holding each request's TBT list."""
    out = Path(out_dir)
    with open(out / "tbt_samples.jsonl", "w") as tf, open(out / "requests.csv", "w", newline="") as cf:
        w = csv.writer(cf)
        w.writerow(["id", "class", "arrival", "ttft", "finish", "input", "output",
                    "prefill_done", "decode_done", "recomputed_tokens", "tbt_path"])
        line = 0
        for r in requests:
            path = ""
            if r.online:
                line += 1
                tf.write(json.dumps({"id": r.id, "tbt": tbt_samples(r)}) + "\n")
                path = f"tbt_samples.jsonl:{line}"
            v = ttft(r)
            finish = to_s(r.token_ns[-1]) if r.finished else ""
            w.writerow([r.id, r.cls.value, repr(r.arrival_time), "" if v is None else repr(v),
                        repr(finish) if finish != "" else "", r.input_tokens, r.output_tokens,
                        r.prefill_done, r.decode_done, r.recomputed_tokens, path])


def write_timeseries(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "p99_ttft_5s", "p99_tbt_5s", "offline_tput_5s"])
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


def read_tbt_from_csv(out_dir: str | Path) -> dict[int, list[float]]:
    """Reload per-request TBT lists through the paths recorded in requests.csv."""
    out = Path(out_dir)
    lines = (out / "tbt_samples.jsonl").read_text().splitlines()
    result = {}
    with open(out / "requests.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["tbt_path"]:
                fname, ln = row["tbt_path"].split(":")
                result[int(row["id"])] = json.loads(lines[int(ln) - 1])["tbt"]
    return result
