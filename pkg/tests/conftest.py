from pathlib import Path

import numpy as np
import pytest

from rdkv.cache_model import CacheShape, gen_synthetic_cache
from rdkv.quantizer import calibrate_epsilon, load_tables

FIXTURES = Path(__file__).parent / "fixtures"
EPS_TOY = {0: 1.0, 2: 0.3, 4: 0.014, 8: 5e-5, 16: 0.0}


@pytest.fixture(scope="session")
def real_tables():
    return load_tables(FIXTURES / "llama31_8b_tables.json")


@pytest.fixture(scope="session")
def small_shape():
    return CacheShape(layers=2, q_heads=4, kv_heads=2, head_dim=16, seq_len=64)


@pytest.fixture(scope="session")
def small_cache(small_shape):
    return gen_synthetic_cache(7, small_shape, window=16)


@pytest.fixture(scope="session")
def synthetic_tables():
    shape = CacheShape(1, 2, 1, 32, 128)
    caches = [gen_synthetic_cache(s, shape) for s in range(4)]
    return {"v": calibrate_epsilon(caches, "token"), "k": calibrate_epsilon(caches, "channel")}


def random_eps(rng: np.random.Generator, widths=(0, 2, 4, 8, 16)) -> dict[int, float]:
    """A table with eps(0)=1, eps(16)=0 and strictly decreasing interior values."""
    inner = [b for b in widths if b not in (0, 16)]
    vals = np.sort(np.exp(rng.uniform(np.log(1e-5), np.log(0.6), len(inner))))[::-1]
    eps = {0: 1.0, 16: 0.0}
    eps.update({b: float(v) for b, v in zip(inner, vals)})
    return {b: eps[b] for b in widths}


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
