import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile("default")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def random_pd(gen, k, floor=0.2):
    A = gen.standard_normal((k, k))
    G = A @ A.T / k + floor * np.eye(k)
    s = np.sqrt(np.diag(G))
    scale = np.exp(gen.uniform(-1, 1, k))
    return (G / np.outer(s, s)) * np.outer(scale, scale)


# acceptance outcomes, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
