"""Iteration latency model: ground-truth oracle, profiler, regression fit and
the budget queries the scheduler makes against the fitted coefficients.

All latencies in this module are milliseconds. A batch is evaluated per
entry: the attention term ``P_i * (P_i + C_i)`` and the memory term
``P_i + C_i`` are summed over entries, the linear term uses the aggregate
compute-token count and the constant is paid once per iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from cosim.types import Request, context_len, work_tokens

DEFAULT_P_GRID = (1, 16, 64, 256, 512, 1024, 2048, 4096)
DEFAULT_C_GRID = (0, 1024, 4096, 16384, 40960, 65536)


class DegenerateGridError(ValueError):
    pass


@dataclass(frozen=True)
class OracleParams:
    k1: float  # ms/token, linear compute
    k2: float  # ms/token^2, attention
    k3: float  # ms/token, communication
    k4: float  # ms/token, KV memory access
    k5: float  # ms, per-iteration constant
    noise_cv: float = 0.0

    def __post_init__(self) -> None:
        ks = (self.k1, self.k2, self.k3, self.k4, self.k5)
        if any(k < 0 for k in ks) or self.noise_cv < 0:
            raise ValueError("oracle coefficients must be non-negative")
        if not (self.k1 > 0 or self.k2 > 0 or self.k4 > 0 or self.k5 > 0):
            raise ValueError("at least one of k1, k2, k4, k5 must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "OracleParams":
        return cls(**{k: float(d[k]) for k in ("k1", "k2", "k3", "k4", "k5")},
                   noise_cv=float(d.get("noise_cv", 0.0)))

    def to_dict(self) -> dict:
        return asdict(self)

    def expected_coeffs(self) -> "PerfCoefficients":
        """Coefficients a noise-free fit recovers (k1 and k3 are collinear)."""
        return PerfCoefficients(self.k1 + self.k3, self.k2, self.k4, self.k5)


@dataclass(frozen=True)
class PerfCoefficients:
    a_lin: float
    a_quad: float
    a_mem: float
    a_const: float

    @classmethod
    def from_dict(cls, d: dict) -> "PerfCoefficients":
        return cls(float(d["a_lin"]), float(d["a_quad"]), float(d["a_mem"]), float(d["a_const"]))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatchEntry:
    req_id: int
    p: int  # compute tokens
    c: int  # context tokens already held
    kind: str = "prefill"  # prefill | decode | recompute


@dataclass
class BatchPlan:
    """Per-iteration token assignment with running aggregates.

    ``weighted_context`` is ``sum(P_i * (P_i + C_i))`` and ``total_context``
    is ``sum(P_i + C_i)``.
    """

    entries: list[BatchEntry] = field(default_factory=list)
    total_p: int = 0
    weighted_context: int = 0
    total_context: int = 0
    predicted_latency: float = 0.0

    @classmethod
    def of(cls, entries: Iterable[BatchEntry | tuple]) -> "BatchPlan":
        plan = cls()
        for e in entries:
            plan.add(e if isinstance(e, BatchEntry) else BatchEntry(*e))
        return plan

    def add(self, entry: BatchEntry) -> None:
        if entry.p < 1:
            raise ValueError("batch entries need at least one compute token")
        self.entries.append(entry)
        self.total_p += entry.p
        self.weighted_context += entry.p * (entry.p + entry.c)
        self.total_context += entry.p + entry.c

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def ids(self) -> list[int]:
        return [e.req_id for e in self.entries]

    def subset(self, keep: set[int]) -> "BatchPlan":
        return BatchPlan.of(e for e in self.entries if e.req_id in keep)


def _terms(plan: BatchPlan) -> tuple[int, int, int]:
    return plan.total_p, plan.weighted_context, plan.total_context


def oracle_base(params: OracleParams, plan: BatchPlan) -> float:
    """Noise-free ground-truth latency of a non-empty plan."""
    if not plan:
        raise ValueError("empty batch")
    tp, wc, tc = _terms(plan)
    return (params.k1 * tp + params.k2 * wc + params.k3 * tp + params.k4 * tc + params.k5)


def noise_factor(params: OracleParams, rng: np.random.Generator | None) -> float:
    if params.noise_cv <= 0 or rng is None:
        return 1.0
    return 1.0 + float(rng.normal(0.0, params.noise_cv))


def _as_rng(rng_seed: int | np.random.Generator | None) -> np.random.Generator | None:
    if rng_seed is None or isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def oracle_latency(
    params: OracleParams,
    plan: BatchPlan,
    rng_seed: int | np.random.Generator | None = None,
) -> float:
    """Ground-truth iteration latency with multiplicative Gaussian noise."""
    base = oracle_base(params, plan)
    factor = noise_factor(params, _as_rng(rng_seed))
    # keep the sample strictly positive under extreme noise draws
    return base * max(factor, 1e-3)


def default_grid() -> list[tuple[int, int]]:
    return [(p, c) for p in DEFAULT_P_GRID for c in DEFAULT_C_GRID]


def profile(
    params: OracleParams,
    grid: Sequence[tuple[int, int]] | None = None,
    seed: int | np.random.Generator | None = 0,
) -> list[tuple[int, int, float]]:
    """Measure single-request iterations over a (P, C) grid."""
    grid = default_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("profiling grid is empty")
    rng = _as_rng(seed)
    samples = []
    for p, c in grid:
        if p < 1 or c < 0:
            raise ValueError(f"invalid grid point ({p}, {c})")
        plan = BatchPlan.of([BatchEntry(-1, int(p), int(c))])
        samples.append((int(p), int(c), oracle_latency(params, plan, rng)))
    return samples


def _design(samples: Sequence[tuple[int, int, float]]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(samples, dtype=float)
    p, c, y = arr[:, 0], arr[:, 1], arr[:, 2]
    x = np.column_stack([p, p * (p + c), p + c, np.ones_like(p)])
    return x, y


def fit(samples: Sequence[tuple[int, int, float]]) -> PerfCoefficients:
    """Least-squares fit over the basis {P, P(P+C), P+C, 1}, non-negative."""
    if len(samples) < 4:
        raise DegenerateGridError("degenerate profiling grid: need at least 4 samples")
    x, y = _design(samples)
    scale = np.linalg.norm(x, axis=0)
    if np.any(scale == 0):
        raise DegenerateGridError("degenerate profiling grid")
    xs = x / scale
    if np.linalg.matrix_rank(xs) < 4:
        raise DegenerateGridError("degenerate profiling grid")
    sol, *_ = np.linalg.lstsq(xs, y, rcond=None)
    if np.any(sol < 0):
        sol, _ = nnls(xs, y)
    a = sol / scale
    return PerfCoefficients(*(float(max(v, 0.0)) for v in a))


def predict(coeffs: PerfCoefficients, plan: BatchPlan) -> float:
    if not plan:
        return 0.0
    tp, wc, tc = _terms(plan)
    return coeffs.a_lin * tp + coeffs.a_quad * wc + coeffs.a_mem * tc + coeffs.a_const


estimate_exec_time = predict


def predict_with(coeffs: PerfCoefficients, plan: BatchPlan, p: int, c: int) -> float:
    """Predicted latency of ``plan`` after adding an entry (p, c)."""
    if p <= 0:
        return predict(coeffs, plan)
    tp = plan.total_p + p
    wc = plan.weighted_context + p * (p + c)
    tc = plan.total_context + p + c
    return coeffs.a_lin * tp + coeffs.a_quad * wc + coeffs.a_mem * tc + coeffs.a_const


def can_schedule(
    coeffs: PerfCoefficients,
    plan: BatchPlan,
    req: Request,
    tbt_budget: float,
    token_cap: int | None = None,
) -> int:
    """Compute tokens of ``req`` that fit in ``plan`` under ``tbt_budget`` (ms)."""
    return schedulable_tokens(
        coeffs, plan, work_tokens(req), context_len(req), tbt_budget, token_cap
    )


def schedulable_tokens(
    coeffs: PerfCoefficients,
    plan: BatchPlan,
    remaining: int,
    context: int,
    tbt_budget: float,
    token_cap: int | None = None,
) -> int:
    """Largest token count addable for one request without exceeding the budget.

    ``remaining`` is the request's outstanding work and ``context`` its
    context length. The quadratic inequality in p is solved in closed form;
    the floor of the root is then confirmed against the forward model, which
    absorbs floating-point error at the boundary.
    """
    cap = remaining
    if token_cap is not None:
        cap = min(cap, token_cap - plan.total_p)
    if cap <= 0:
        return 0
    if cap == 1:
        return 1 if predict_with(coeffs, plan, 1, context) <= tbt_budget else 0

    # a*p^2 + b*p + c0 <= 0
    base = predict(coeffs, plan) if plan else coeffs.a_const
    a = coeffs.a_quad
    b = coeffs.a_lin + coeffs.a_quad * context + coeffs.a_mem
    c0 = base + coeffs.a_mem * context - tbt_budget
    if c0 > 0:
        root = 0.0
    elif a > 0:
        disc = b * b - 4.0 * a * c0
        root = (2.0 * -c0) / (b + math.sqrt(disc)) if b + math.sqrt(disc) > 0 else 0.0
    elif b > 0:
        root = -c0 / b
    else:
        root = math.inf
    p = cap if root >= cap else int(math.floor(root))

    def fits(n: int) -> bool:
        return predict_with(coeffs, plan, n, context) <= tbt_budget

    # rounding can leave the root short; one step in practice
    while p < cap and fits(p + 1):
        p += 1
    while p > 0 and not fits(p):
        p -= 1
    return p


def max_throughput_tokens(coeffs: PerfCoefficients, context_per_request: int, cap: int) -> int:
    """Token count in [1, cap] maximising tokens per millisecond for one entry."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    q = coeffs.a_quad
    d = coeffs.a_mem * context_per_request + coeffs.a_const

    def throughput(p: int) -> float:
        lat = predict_with(coeffs, BatchPlan(), p, context_per_request)
        return math.inf if lat <= 0 else p / lat

    candidates = {1, cap}
    if q > 0 and d > 0:
        star = math.sqrt(d / q)
        for v in (math.floor(star), math.ceil(star)):
            candidates.add(min(max(int(v), 1), cap))
    # ties go to the larger batch
    return max(sorted(candidates), key=lambda p: (throughput(p), p))


def relative_errors(coeffs: PerfCoefficients, samples: Sequence[tuple[int, int, float]]) -> np.ndarray:
    x, y = _design(samples)
    pred = x @ np.array([coeffs.a_lin, coeffs.a_quad, coeffs.a_mem, coeffs.a_const])
    return np.abs(pred - y) / y


def fit_error_p99(coeffs: PerfCoefficients, samples: Sequence[tuple[int, int, float]]) -> float:
    errs = np.sort(relative_errors(coeffs, samples))
    return float(errs[max(math.ceil(0.99 * len(errs)) - 1, 0)])


def write_profile(path: str | Path, samples, coeffs: PerfCoefficients | None = None) -> None:
    doc: dict = {"grid": [[p, c, ms] for p, c, ms in samples]}
    if coeffs is not None:
        doc["coeffs"] = coeffs.to_dict()
        doc["fit_error_p99"] = fit_error_p99(coeffs, samples)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_samples(path: str | Path) -> list[tuple[int, int, float]]:
    doc = json.loads(Path(path).read_text())
    return [(int(p), int(c), float(ms)) for p, c, ms in doc["grid"]]


def read_coeffs(path: str | Path) -> PerfCoefficients:
    return PerfCoefficients.from_dict(json.loads(Path(path).read_text())["coeffs"])
