import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


def smooth_field(rng, extents, channels=None, amp=1.0, kmax=3, dtype=np.float64):
    """Random trigonometric polynomial on the periodic unit grid (low modes only)."""
    axes = [np.arange(n) / n for n in extents]
    X = np.meshgrid(*axes, indexing="ij")
    nch = 1 if channels is None else channels
    out = np.zeros(tuple(extents) + (nch,))
    for c in range(nch):
        for _ in range(6):
            k = rng.integers(-kmax, kmax + 1, size=len(extents))
            phase = rng.uniform(0, 2 * np.pi)
            out[..., c] += rng.normal() * np.cos(2 * np.pi * sum(ki * xi for ki, xi in zip(k, X)) + phase)
    out *= amp / max(np.abs(out).max(), 1e-12)
    out = out.astype(dtype)
    return out[..., 0] if channels is None else out


def bump_field(extents, amp, width=0.1, center=None, channels=None, direction=None):
    """Gaussian bump, negligible near the boundary."""
    axes = [np.arange(n) / n for n in extents]
    X = np.meshgrid(*axes, indexing="ij")
    center = center or [0.5] * len(extents)
    g = np.exp(-sum((xi - c) ** 2 for xi, c in zip(X, center)) / (2 * width**2))
    if channels is None:
        return amp * g
    direction = np.ones(channels) if direction is None else np.asarray(direction)
    return amp * g[..., None] * direction


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion number, summary line), filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
