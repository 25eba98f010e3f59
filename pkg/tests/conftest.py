import sys

import numpy as np
import pytest

from nextpoint.policy import ModelConfig
from nextpoint.scene import SceneConfig


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def numeric_grad(f, x, h=1e-5, idx=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x)
    it = idx if idx is not None else np.ndindex(x.shape)
    for i in it:
        old = x[i]
        x[i] = old + h
        a = f()
        x[i] = old - h
        b = f()
        x[i] = old
        g[i] = (a - b) / (2 * h)
    return g


@pytest.fixture
def tiny_model():
    return ModelConfig(K=16, L=2, d=8, n_layers=2, n_heads=2, patch=8, width=16, height=16, max_len=24)


@pytest.fixture
def tiny_scenes():
    return SceneConfig(width=16, height=16, count_min=1, count_max=2, radius_min=2, radius_max=3, min_sep=6, margin=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n][1])
