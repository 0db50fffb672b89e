import numpy as np
import pytest

from annulus_billiards.geometry import AnnulusDomain, PhaseState


@pytest.fixture
def dom():
    return AnnulusDomain(R=2.0, r=1.0)


def state(x, v):
    return PhaseState(np.array(x, dtype=float), np.array(v, dtype=float))


def random_states(rng, domain, n, speed=(0.5, 2.0)):
    rho = np.sqrt(rng.uniform(domain.r ** 2, domain.R ** 2, n))
    th = rng.uniform(-np.pi, np.pi, n)
    x = np.stack([rho * np.cos(th), rho * np.sin(th), rng.normal(size=n)], axis=1)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    v = d * rng.uniform(*speed, n)[:, None]
    keep = domain.contains(x, closed=False)
    return x[keep], v[keep]
