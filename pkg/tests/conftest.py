import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ztree", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("ztree")

LINE8_X = np.array([1.6, 3.1, 3.3, 4.6, 5.6, 6.8, 9.4, 9.7])


@pytest.fixture
def line8_points():
    return LINE8_X.reshape(-1, 1).copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_points(kind: str, n: int, d: int, seed: int = 0) -> np.ndarray:
    """Test datasets: 'uniform', 'gaussian' or 'grid' (n rounded down to a lattice)."""
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        return rng.random((n, d))
    if kind == "gaussian":
        return rng.standard_normal((n, d)) * 0.2 + 0.5
    if kind == "grid":
        m = max(2, int(round(n ** (1.0 / d))))
        axes = np.meshgrid(*([np.arange(m) / m] * d), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)[:n]
    raise ValueError(kind)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """report(n, ok, detail): one pass/fail line per criterion, echoed in the summary."""
    lines = request.config.acceptance_lines

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
