import numpy as np
import pytest

from fmridgm.data import SynthConfig, synth_generate
from fmridgm.dgm import DgmHyper, DgmModel
from fmridgm.numerics import RngStream


def central_difference(f, x, direction, h=1e-5):
    return (f(x + h * direction) - f(x - h * direction)) / (2 * h)


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_model(seed, n_x=6, n_h=8, n_z=3, scale=0.5, **kw):
    """Model with O(1) random weights so every path carries signal."""
    hyper = DgmHyper(n_x=n_x, n_h=n_h, n_z=n_z, **kw)
    m = DgmModel.initialize(hyper, RngStream(seed))
    r = RngStream(seed, (99,))
    flat = {k: v + scale * r.normal(v.shape) for k, v in m.flat().items()}
    return DgmModel.from_flat(hyper, flat)


@pytest.fixture
def small_model():
    return random_model(0)


@pytest.fixture(scope="session")
def tiny_cohort():
    return synth_generate(SynthConfig(n_x=6, n_subjects=6, frames=20, latent_dim=2,
                                      discriminative_set=(1,), seed=3))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
