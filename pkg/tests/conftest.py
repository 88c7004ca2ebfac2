import numpy as np
import pytest

from proxnn.linops import ConvStackOperator, spectral_norm
from proxnn.prox import BoxConstraint


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box01():
    return BoxConstraint(0.0, 1.0)


def random_instance(seed, J=4, C=1, H=8, W=8):
    """Seeded (kernels, operator, observation, norm) tuple for solver tests."""
    r = np.random.default_rng(seed)
    kernels = r.normal(0.0, 1.0 / 3.0, size=(J, C, 3, 3))
    z = r.uniform(0.0, 1.0, size=(C, H, W))
    op = ConvStackOperator(kernels)
    norm = spectral_norm(op, z.shape, tol=1e-10, max_iter=5000, seed=0).norm
    return kernels, op, z, norm


def delta_stack(J=1, C=1, scale=1.0):
    """Stack of centered delta kernels (channel-summing identity)."""
    k = np.zeros((J, C, 3, 3))
    k[:, :, 1, 1] = scale
    return k
