import numpy as np
import pytest

from rmfn.data import MultimodalExample
from rmfn.model import ModelConfig, build_variant


def micro_config(**kw):
    base = dict(d_l=2, d_v=2, d_a=2, h_l=3, h_v=3, h_a=3, d_f=4, d_z=3, K=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_example(rng, T=3, dims=(2, 2, 2), label=0.5, ex_id="ex"):
    return MultimodalExample(*(rng.standard_normal((T, d)) for d in dims), label=label, id=ex_id)


def randomize(params, rng, scale=0.5):
    """Push every parameter (biases included) away from its structured init."""
    params.theta[:] = rng.uniform(-scale, scale, params.theta.size)
    return params


def fd_check(f, x, step=1e-5):
    """Central-difference gradient of a scalar function of a flat array."""
    g = np.zeros_like(x)
    for j in range(x.size):
        orig = x.flat[j]
        x.flat[j] = orig + step
        fp = f()
        x.flat[j] = orig - step
        fm = f()
        x.flat[j] = orig
        g.flat[j] = (fp - fm) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture
def micro_params(micro):
    return randomize(build_variant(micro), np.random.default_rng(7))


# Acceptance criteria append "PASS/FAIL" lines here; they are echoed once in
# the terminal summary so they survive pytest's output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
