import numpy as np
import pytest

from maskforget.concepts import default_registry
from maskforget.diffusion import make_schedule
from maskforget.nn import Architecture, DenoiserParams, init_params


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Per-coordinate relative error; coordinates below ``floor`` in magnitude are compared absolutely."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def with_flat(params: DenoiserParams, flat: np.ndarray) -> DenoiserParams:
    return DenoiserParams(params.arch, flat)


@pytest.fixture
def tiny_arch():
    return Architecture(data_dim=2, hidden_dims=(4,), cond_vocab=5, cond_embed_dim=3, time_embed_dim=4)


@pytest.fixture
def tiny_params(tiny_arch):
    # perturb away from init so biases and the output layer carry signal
    p = init_params(tiny_arch, 3)
    p.flat[...] += 0.3 * np.random.default_rng(11).standard_normal(p.flat.size)
    return p


@pytest.fixture
def small_sched():
    return make_schedule(20, 1e-3, 0.2)


@pytest.fixture(scope="session")
def registry():
    return default_registry()


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
