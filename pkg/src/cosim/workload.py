"""Synthetic Gamma-process load generation and JSONL trace replay."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cosim.types import ConfigError, Request, RequestClass, to_s


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class LengthSpec:
    """Either fixed (in, out) lengths or joint samples from a lengths file."""

    input_tokens: int = 4096
    output_tokens: int = 256
    lengths_file: str | None = None

    def sampler(self, rng: np.random.Generator):
        if self.lengths_file is None:
            return lambda: (self.input_tokens, self.output_tokens)
        pairs = load_lengths(self.lengths_file)
        return lambda: pairs[int(rng.integers(len(pairs)))]

    def mean_tokens(self) -> float:
        if self.lengths_file is None:
            return float(self.input_tokens + self.output_tokens)
        pairs = load_lengths(self.lengths_file)
        return float(sum(i + o for i, o in pairs) / len(pairs))


@dataclass(frozen=True)
class OnlineSpec:
    rate: float = 2.0  # req/s
    cv: float = 0.5
    duration: float = 600.0  # s
    lengths: LengthSpec = field(default_factory=LengthSpec)


@dataclass(frozen=True)
class OfflineSpec:
    backlog: int = 512
    lengths: LengthSpec = field(default_factory=LengthSpec)
    replenish: bool = True


@dataclass(frozen=True)
class WorkloadSpec:
    online: OnlineSpec = field(default_factory=OnlineSpec)
    offline: OfflineSpec = field(default_factory=OfflineSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        o = self.online
        if not (o.rate > 0 and o.cv > 0 and o.duration > 0):
            raise ConfigError("workload.online rate, cv and duration must be positive")
        if self.offline.backlog < 0:
            raise ConfigError("workload.offline.backlog must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        def lengths(x: dict) -> LengthSpec:
            return LengthSpec(
                int(x.get("in", x.get("input_tokens", 4096))),
                int(x.get("out", x.get("output_tokens", 256))),
                x.get("lengths_file"),
            )

        on = d.get("online", {})
        off = d.get("offline", {})
        return cls(
            online=OnlineSpec(
                float(on.get("rate", 2.0)),
                float(on.get("cv", 0.5)),
                float(on.get("duration", 600.0)),
                lengths(on),
            ),
            offline=OfflineSpec(
                int(off.get("backlog", 512)), lengths(off), bool(off.get("replenish", True))
            ),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        def lengths(x: LengthSpec) -> dict:
            out = {"in": x.input_tokens, "out": x.output_tokens}
            if x.lengths_file:
                out["lengths_file"] = x.lengths_file
            return out

        return {
            "online": {
                "rate": self.online.rate,
                "cv": self.online.cv,
                "duration": self.online.duration,
                **lengths(self.online.lengths),
            },
            "offline": {
                "backlog": self.offline.backlog,
                "replenish": self.offline.replenish,
                **lengths(self.offline.lengths),
            },
            "seed": self.seed,
        }

    def with_online(self, **kw) -> "WorkloadSpec":
        return replace(self, online=replace(self.online, **kw))


def gamma_params(rate: float, cv: float) -> tuple[float, float]:
    """(shape, scale) of Gamma inter-arrival gaps with the given mean rate and CV."""
    shape = 1.0 / (cv * cv)
    return shape, 1.0 / (rate * shape)


def gen_gamma_arrivals(rate: float, cv: float, duration: float, seed: int | np.random.Generator) -> list[float]:
    if not (rate > 0 and cv > 0 and duration > 0):
        raise ValueError("rate, cv and duration must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape, scale = gamma_params(rate, cv)
    times: list[float] = []
    t = 0.0
    # draw in blocks; the expected count is rate * duration
    block = max(16, int(rate * duration * 1.2))
    while True:
        for gap in rng.gamma(shape, scale, size=block):
            t += float(gap)
            if t >= duration:
                return times
            # microsecond resolution keeps JSONL round-trips exact
            times.append(round(t, 6))


def generate(spec: WorkloadSpec) -> list[Request]:
    """Online arrivals from the Gamma process plus the offline backlog at t=0."""
    rng = np.random.default_rng(spec.seed)
    arrivals = gen_gamma_arrivals(spec.online.rate, spec.online.cv, spec.online.duration, rng)
    on_len = spec.online.lengths.sampler(rng)
    reqs = []
    for t in arrivals:
        i, o = on_len()
        reqs.append(Request.new(len(reqs), RequestClass.ONLINE, t, i, o))
    off_len = spec.offline.lengths.sampler(rng)
    for _ in range(spec.offline.backlog):
        i, o = off_len()
        reqs.append(Request.new(len(reqs), RequestClass.OFFLINE, 0.0, i, o))
    return reqs


def offline_sampler(spec: WorkloadSpec):
    """Length sampler for replenished offline requests, independent of the trace RNG."""
    rng = np.random.default_rng([spec.seed, 1])
    return spec.offline.lengths.sampler(rng)


def _line(req: Request) -> str:
    return json.dumps(
        {"t": round(to_s(req.arrival_ns), 6), "class": req.cls.value, "in": req.input_tokens, "out": req.output_tokens}
    )


def save_trace(requests: Iterable[Request], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in requests:
            fh.write(_line(r) + "\n")


def load_trace(path: str | Path) -> list[Request]:
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
                t, klass, i, o = float(d["t"]), d["class"], int(d["in"]), int(d["out"])
                RequestClass(klass)
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceError(f"{path}:{lineno}: malformed trace line ({exc})") from None
            if i < 1 or o < 1 or t < 0:
                raise TraceError(f"{path}:{lineno}: negative or zero token count / time")
            rows.append((t, lineno, klass, i, o))
    # stable by line order for equal arrival times
    rows.sort(key=lambda r: (r[0], r[1]))
    return [Request.new(n, klass, t, i, o) for n, (t, _, klass, i, o) in enumerate(rows)]


def load_lengths(path: str | Path) -> list[tuple[int, int]]:
    """Read (input, output) length pairs from a CSV with ``in,out`` columns."""
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i, o = int(row["in"]), int(row["out"])
            if i < 1 or o < 1:
                raise TraceError(f"{path}: non-positive length pair ({i}, {o})")
            pairs.append((i, o))
    if not pairs:
        raise TraceError(f"{path}: no length pairs")
    return pairs


def offered_tokens_per_s(spec: OnlineSpec) -> float:
    return spec.rate * spec.lengths.mean_tokens()


def trace_stats(requests: Sequence[Request]) -> dict:
    on = [r for r in requests if r.online]
    return {
        "online": len(on),
        "offline": len(requests) - len(on),
        "mean_in": float(np.mean([r.input_tokens for r in on])) if on else 0.0,
        "mean_out": float(np.mean([r.output_tokens for r in on])) if on else 0.0,
    }
