# Shared fixtures: small analytic grids, tiny networks and a small synthetic dataset

import numpy as np
import pytest

from grid_core import MolecularGrid, PointFeatures
from rbnet import init_params
from synth_oracle import GaussianSpecies, TruthSpec, make_gaussian_grid, make_synthetic_dataset


def uniform_grid(n_points=8, rho_up=0.5, rho_down=0.5, weight=1.0, species_id="uniform"):
    features = np.zeros((n_points, 11))
    features[:, 0] = rho_up
    features[:, 1] = rho_down
    positions = np.column_stack([np.arange(n_points, dtype=float), np.zeros(n_points), np.zeros(n_points)])
    total = weight * n_points * (rho_up + rho_down)
    return MolecularGrid(
        species_id=species_id,
        positions=positions,
        weights=np.full(n_points, weight),
        features=PointFeatures.from_array(features),
        n_electrons_up=total / 2,
        n_electrons_down=total / 2,
    )


def random_features(rng, n=None):
    """Physically signed random features (non-negative densities, non-positive HF)."""
    shape = (11,) if n is None else (n, 11)
    x = rng.uniform(0.01, 1.0, size=shape)
    x[..., 7:] *= -1.0
    if n is None:
        x[4] = (np.sqrt(x[2]) + np.sqrt(x[3])) ** 2
    else:
        x[:, 4] = (np.sqrt(x[:, 2]) + np.sqrt(x[:, 3])) ** 2
    return PointFeatures.from_array(x)


def helium_like(alpha=1.0):
    return GaussianSpecies(
        centers=np.zeros((1, 3)),
        exponents=np.array([alpha]),
        occupations=np.array([[1.0, 1.0]]),
        species_id="two_electron",
    )


@pytest.fixture
def two_electron_grid():
    return make_gaussian_grid(helium_like(), extent=6.0, points_per_axis=16)


@pytest.fixture
def tiny_params():
    return init_params(3, input_width=16, hidden_widths=(8, 4), head_width=3)


@pytest.fixture(scope="session")
def small_dataset():
    return make_synthetic_dataset(n_species=12, n_reactions=10, seed=5, truth_spec=TruthSpec(), points_per_axis=8)
