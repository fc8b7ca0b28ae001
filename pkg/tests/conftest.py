import math

import pytest
from hypothesis import HealthCheck, settings

from readdisturb.mechanisms import ThresholdParams
from readdisturb.model import default_mechanism, load_profile, synthetic_profile

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("repo")


def small_profile(seed=1, **kw):
    """A 64-row randomized bank with 512 columns and low thresholds."""
    return synthetic_profile(seed, **kw)


def low_threshold_mechanism(mode=None):
    """Populations that flip within a few thousand activations."""
    kw = {} if mode is None else {"mode": mode}
    return default_mechanism(
        fall=ThresholdParams(mu=math.log(3000.0), sigma=0.5, p=0.6),
        rise=ThresholdParams(mu=math.log(2000.0), sigma=0.6, p=0.4),
        **kw,
    )


@pytest.fixture
def synth():
    return small_profile(7)


@pytest.fixture(scope="session")
def shipped_b():
    return load_profile("S-8Gb-B")


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    prev = ACCEPTANCE.get(n)
    if prev is not None:
        ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
    ACCEPTANCE[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
