import numpy as np
import pytest

from fanbeam.geometry import FanbeamGeometry, equispaced_angles
from fanbeam.projector import OperatorParams


def small_params(n=32, n_det=64, n_angle=16, d_source=80.0, s_fwd=1.0, step=0.5):
    g = FanbeamGeometry(d_source, n_det, equispaced_angles(n_angle), n, n)
    return OperatorParams.from_geometry(g, s_fwd=s_fwd, step=step)


def smooth_blob(n, seed=0, count=4):
    """Sum of wide Gaussians inside the inscribed disk; smooth enough for finite differences."""
    rng = np.random.default_rng(seed)
    c = np.arange(n) - (n - 1) / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((n, n))
    for _ in range(count):
        cx, cy = rng.uniform(-0.3, 0.3, 2) * n
        s = rng.uniform(0.08, 0.15) * n
        img += rng.uniform(0.3, 1.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return img


@pytest.fixture
def params32():
    return small_params()


# one pass/fail line per acceptance criterion, repeated in the terminal summary
_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
