import numpy as np
import pytest

from dhglm.model import LikelihoodFamily, LinearPredictor, RandomEffect, build_spec
from dhglm.simulate import SimulationRecipe, simulate


def poisson_spec(data):
    return build_spec(
        LikelihoodFamily("poisson"),
        LinearPredictor((("beta0", "1"), ("beta1", "x")), random=RandomEffect("obs", precision="dispersion")),
        LinearPredictor((("gamma0", "1"), ("gamma1", "z"))),
        data=data)


def negbin_spec(data):
    return build_spec(
        LikelihoodFamily("negbin", "modeled"),
        LinearPredictor((("beta0", "1"), ("beta1", "x"))),
        LinearPredictor((("gamma0", "1"), ("gamma1", "z"))),
        data=data)


def gaussian_groups_spec(data):
    return build_spec(
        LikelihoodFamily("gaussian", "modeled"),
        LinearPredictor((("beta0", "1"), ("beta1", "x")), link="identity"),
        LinearPredictor((("gamma0", "1"), ("gamma1", "z")), level="group",
                        random=RandomEffect("group", precision_name="tau_u")),
        data=data)


@pytest.fixture(scope="session")
def poisson_data():
    return simulate(SimulationRecipe("poisson-re", 200, seed=3))


@pytest.fixture(scope="session")
def negbin_data():
    return simulate(SimulationRecipe("negbin", 200, seed=3))


@pytest.fixture(scope="session")
def gaussian_data():
    return simulate(SimulationRecipe("gaussian-groups", 5, seed=3, n_per_group=100))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
