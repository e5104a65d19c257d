import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    """Fresh seeded generator per test."""
    return np.random.default_rng(20240601)


@pytest.fixture
def image(rng):
    return rng.uniform(0.0, 1.0, size=(3, 8, 8))


# ---------------------------------------------------------------------------
# acceptance summary
# ---------------------------------------------------------------------------
_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)``; the run ends with one line per criterion."""

    def record(number: int, ok: bool, detail: str):
        _CRITERIA.setdefault(number, []).append((bool(ok), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        parts = _CRITERIA[number]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
