import numpy as np
import pytest

from carmm.graph import make_grid
from carmm.membership import simulate_membership_matrix
from carmm.model import ModelSpec, ParamVector, draw_prior_params, simulate_counts


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


@pytest.fixture(scope="session")
def grid_3x4():
    return make_grid(3, 4)


@pytest.fixture(scope="session")
def grid_4x5():
    return make_grid(4, 5)


@pytest.fixture(scope="session")
def membership_3x4():
    """A reproducible 10x12 membership matrix on the 3x4 grid (m < n)."""
    g = make_grid(3, 4)
    return simulate_membership_matrix(g, 10, np.random.default_rng(42))


def make_spec(graph, membership, likelihood="poisson", parameterisation="post",
              spatial="car", p=2, seed=0, offsets_mean=8.0, with_data=True):
    """Small fully-populated model spec with simulated counts attached."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(graph.n, p))
    X = (X - X.min(axis=0)) / (X.max(axis=0) - X.min(axis=0))
    offsets = np.maximum(rng.poisson(offsets_mean, size=membership.m), 1).astype(float)
    spec = ModelSpec(
        likelihood=likelihood,
        parameterisation=parameterisation,
        spatial=spatial,
        graph=graph,
        membership=membership,
        covariates=X,
        offsets=offsets,
    )
    if not with_data:
        return spec, None
    if spatial == "icar":
        # the intrinsic prior is improper, so build a centred truth by hand
        phi = 0.3 * rng.normal(size=graph.n)
        phi -= phi.mean()
        truth = ParamVector(gamma=0.3 * rng.normal(), beta=0.3 * rng.normal(size=p),
                            phi=phi, tau=rng.gamma(2.0, 5.0),
                            psi=rng.gamma(2.0, 5.0) if likelihood == "negbin" else None)
    else:
        truth = draw_prior_params(spec, rng)
    y = simulate_counts(spec, truth, rng)
    return spec.with_y(y), truth


@pytest.fixture
def poisson_post_spec(grid_3x4, membership_3x4):
    spec, truth = make_spec(grid_3x4, membership_3x4, seed=11)
    return spec, truth
