import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nvclab.codec import default_model, init_model  # noqa: E402

PRETRAIN_SEED = 0
PRETRAIN_STEPS = 4000


@pytest.fixture(scope="session")
def model_cache(request):
    return request.config.cache.mkdir("nvclab-model")


@pytest.fixture(scope="session")
def pretrained(model_cache):
    """Seeded pretrained codec; built once (about a minute) and cached by pytest."""
    return default_model(PRETRAIN_SEED, PRETRAIN_STEPS, cache_dir=str(model_cache))


@pytest.fixture(scope="session")
def raw_model():
    """Untrained but frozen codec: fast, for format and plumbing tests."""
    return init_model(3).freeze()


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records criterion ``n`` and then asserts it."""

    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
