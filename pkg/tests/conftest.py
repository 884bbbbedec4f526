from __future__ import annotations

import numpy as np
import pytest

from cosim.engine import RunConfig
from cosim.perf_model import BatchEntry, BatchPlan, OracleParams, PerfCoefficients

# coefficients of the worked fit example: a_lin 0.015, a_quad 1e-6, a_mem 5e-4, a_const 5
FIT_ORACLE = OracleParams(k1=0.01, k2=1e-6, k3=0.005, k4=0.0005, k5=5.0)
FIT_COEFFS = PerfCoefficients(0.015, 1e-6, 0.0005, 5.0)


def plan_of(*entries: tuple[int, int]) -> BatchPlan:
    return BatchPlan.of([BatchEntry(i, p, c) for i, (p, c) in enumerate(entries)])


def tiny_config(seed: int = 0, policy: str | dict = "slo_aware", **over) -> RunConfig:
    """A small, memory-tight scenario that runs in well under a second."""
    d = {
        "cluster": {
            "num_layers": 8,
            "safepoint_interval_layers": 2,
            "kv_bytes_per_token": 1024,
            "gpu_kv_capacity": 1024 * 16 * 96,  # 96 pages
            "host_kv_capacity": 1024 * 16 * 64,
            "d2h_bandwidth": 2e8,
            "h2d_bandwidth": 2e8,
            "safepoint_check_cost": 2e-5,
            "max_batched_tokens": 512,
        },
        "oracle": {"k1": 0.02, "k2": 2e-6, "k3": 0.0, "k4": 2e-3, "k5": 4.0, "noise_cv": 0.05},
        "policy": policy if isinstance(policy, dict) else {"name": policy},
        "slo": {"ttft_slo": 0.08, "tbt_slo": 0.03},
        "workload": {
            "online": {"rate": 6.0, "cv": 1.5, "duration": 6.0, "in": 200, "out": 24},
            "offline": {"backlog": 12, "in": 300, "out": 40},
        },
        "seed": seed,
        "record_events": False,
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return RunConfig.from_dict(d)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# acceptance results, printed as one line per criterion after the run
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
