import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fpvc.data import LongitudinalDataset

settings.register_profile("fpvc", deadline=None, max_examples=40, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fpvc")

TWO_PI = 2.0 * math.pi


def make_dataset(rng, n, fn, *, lam=6.0, noise=0.0, domain=(0.0, TWO_PI), label="y"):
    """Subjects with Poisson(lam)+2 uniform times and values fn(t, i, rng) + noise."""
    ids, T, Y = [], [], []
    for i in range(n):
        r = rng.poisson(lam) + 2
        t = np.sort(rng.uniform(domain[0], domain[1], r))
        y = fn(t, i, rng) + (rng.normal(0.0, noise, r) if noise > 0 else 0.0)
        ids.append(f"s{i:04d}")
        T.append(t)
        Y.append(np.asarray(y, dtype=float))
    return LongitudinalDataset(tuple(ids), tuple(T), tuple(Y), label=label, domain=domain)


def rank_two(rng, n=300, lam=(4.0, 1.0), noise=0.5):
    """sin/cos eigenfunctions on (0, 2 pi) with the given eigenvalues."""
    xi = rng.normal(0.0, np.sqrt(lam), (n, 2))
    root = math.sqrt(math.pi)
    return make_dataset(
        rng,
        n,
        lambda t, i, _: xi[i, 0] * np.sin(t) / root + xi[i, 1] * np.cos(t) / root,
        noise=noise,
    ), xi


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)
