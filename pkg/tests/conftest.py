import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moe_sparsekit import MoEConfig, generate_synthetic

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Lines collected by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_config(rng, max_e=16, max_k=4, max_d=64, max_n=128, shared=None) -> MoEConfig:
    e = int(rng.integers(1, max_e + 1))
    k = int(rng.integers(1, min(e, max_k) + 1))
    if shared is None:
        shared = bool(rng.integers(0, 2))
    return MoEConfig(
        n_experts=e, top_k=k,
        d_model=int(rng.integers(1, max_d + 1)),
        d_ffn=int(rng.integers(1, max_n + 1)),
        d_shared=int(rng.integers(1, max_n + 1)) if shared else 0,
        renormalize=bool(rng.integers(0, 2)),
    )


def tokens(n, d, seed):
    return np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)


def rel_diff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b), initial=0.0) / max(1.0, float(np.max(np.abs(b), initial=0.0))))


@pytest.fixture(scope="session")
def small_layer():
    cfg = MoEConfig(n_experts=8, top_k=2, d_model=32, d_ffn=64, d_shared=48)
    return generate_synthetic(cfg, seed=11, scale=0.2)
