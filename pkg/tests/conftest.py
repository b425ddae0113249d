import sys

import numpy as np
import pytest
import torch

from glosskit.surfel import Surfel


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_frame(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q[:, 0], q[:, 1]


def make_surfel(position=(0.0, 0.0, 0.0), tu=(1.0, 0.0, 0.0), tv=(0.0, 1.0, 0.0), su=1.0, sv=1.0, **kw):
    return Surfel(position=position, tangent_u=tu, tangent_v=tv, scale_u=su, scale_v=sv, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
