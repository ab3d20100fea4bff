import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import stats

from dhglm.data import DataError
from dhglm.simulate import DEFAULT_PARAMS, SimulationRecipe, simulate, stream


def test_poisson_without_overdispersion_is_equidispersed():
    d = simulate(SimulationRecipe("poisson-re", 10_000, {"beta1": 0.0, "gamma0": 20.0, "gamma1": 0.0}, seed=1))
    ratio = d.y.var(ddof=1) / d.y.mean()
    assert 0.9 <= ratio <= 1.1
    se = np.sqrt(np.e / d.n)
    assert abs(d.y.mean() - np.e) < 3 * se


def test_negbin_large_size_limit_is_poisson():
    d = simulate(SimulationRecipe("negbin", 10_000, {"beta1": 0.0, "gamma0": 20.0, "gamma1": 0.0}, seed=2))
    assert 0.9 <= d.y.var(ddof=1) / d.y.mean() <= 1.1


def test_gaussian_groups_with_degenerate_random_effect():
    rec = SimulationRecipe("gaussian-groups", 5, {"gamma1": 0.0, "tau_u": 1e6}, seed=3, n_per_group=10_000)
    d = simulate(rec)
    resid = d.y - 1.0 - 0.25 * d.columns["x"]
    for g in range(5):
        prec = 1.0 / resid[d.groups == g].var(ddof=1)
        assert abs(prec - 1.0) < 0.1


@pytest.mark.parametrize("family", ["poisson-re", "negbin", "spatial-poisson", "spatial-negbin"])
def test_zero_observations_rejected(family):
    if family.startswith("spatial"):
        with pytest.raises((DataError, ValueError)):
            simulate(SimulationRecipe(family, 0, lattice=(0, 4)))
    else:
        with pytest.raises(DataError, match="at least one"):
            simulate(SimulationRecipe(family, 0))


def test_zero_groups_rejected():
    with pytest.raises(DataError, match="group"):
        simulate(SimulationRecipe("gaussian-groups", 0, n_per_group=10))


def test_overflow_reported():
    with pytest.raises(DataError, match="non-finite"):
        simulate(SimulationRecipe("negbin", 10, {"gamma0": 800.0}))


def test_negbin_covariate_is_standardized():
    z = simulate(SimulationRecipe("negbin", 500, seed=4)).columns["z"]
    assert abs(z.mean()) < 1e-12
    assert abs(z.std(ddof=1) - 1) < 1e-12


def test_single_group_dataset():
    d = simulate(SimulationRecipe("gaussian-groups", 1, seed=0, n_per_group=20))
    assert d.n_groups == 1 and d.n == 20
    assert d.group_columns["z"].shape == (1,)


def test_default_recipe_sizes():
    assert simulate(SimulationRecipe("poisson-re", 1000)).n == 1000
    assert simulate(SimulationRecipe("negbin", 500)).n == 500
    assert simulate(SimulationRecipe("gaussian-groups", 5, n_per_group=500)).n == 2500
    assert DEFAULT_PARAMS["negbin"]["gamma1"] == 5.0
    assert DEFAULT_PARAMS["gaussian-groups"]["tau_u"] == 1.0


def test_recipe_recorded_in_provenance():
    rec = SimulationRecipe("poisson-re", 20, seed=8)
    d = simulate(rec)
    assert d.provenance["recipe"] == rec.to_dict()


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="unknown recipe family"):
        SimulationRecipe("binomial", 10)


@pytest.mark.parametrize("family", ["poisson-re", "negbin", "gaussian-groups", "spatial-poisson",
                                    "spatial-negbin"])
def test_generators_are_pure(family):
    kw = {"n_per_group": 30} if family == "gaussian-groups" else {}
    n = 4 if family == "gaussian-groups" else 50
    a = simulate(SimulationRecipe(family, n, seed=11, **kw))
    b = simulate(SimulationRecipe(family, n, seed=11, **kw))
    assert np.array_equal(a.y, b.y)
    assert a.columns.keys() == b.columns.keys()
    for k in a.columns:
        assert np.array_equal(a.columns[k], b.columns[k])


def test_column_streams_are_independent_of_each_other():
    a = stream(5, "x").uniform(size=10)
    stream(5, "z").uniform(size=1000)
    assert np.array_equal(a, stream(5, "x").uniform(size=10))
    assert not np.array_equal(a, stream(5, "z").uniform(size=10))


N_BIG = 100_000


def test_poisson_covariates_follow_declared_laws():
    d = simulate(SimulationRecipe("poisson-re", N_BIG, seed=0))
    assert stats.kstest(d.columns["x"], "uniform").statistic < 0.01
    assert stats.kstest(d.columns["z"], "norm").statistic < 0.01


def test_negbin_covariates_follow_declared_laws():
    d = simulate(SimulationRecipe("negbin", N_BIG, seed=0))
    assert stats.kstest(d.columns["x"], "uniform", args=(10, 10)).statistic < 0.01
    # standardised U(0, 20) is uniform on (-sqrt(3), sqrt(3))
    r = np.sqrt(3.0)
    assert stats.kstest(d.columns["z"], "uniform", args=(-r, 2 * r)).statistic < 0.01


def test_gaussian_group_covariates_follow_declared_laws():
    d = simulate(SimulationRecipe("gaussian-groups", N_BIG, seed=0, n_per_group=1))
    assert stats.kstest(d.columns["x"], "uniform").statistic < 0.01
    assert stats.kstest(d.group_columns["z"], "uniform", args=(-1, 2)).statistic < 0.01


def test_spatial_dataset_shape():
    d = simulate(SimulationRecipe("spatial-poisson", 32, seed=0))
    assert d.n == 32
    assert d.adjacency.shape == (32, 32)
    w = d.adjacency / d.adjacency.sum(axis=1, keepdims=True)
    assert np.allclose(d.columns["lag"], w @ d.columns["baseline_rates"])


# --- interval coverage of the generating model under the MCMC oracle --------

def _coverage_run(args):
    family, seed = args
    from conftest import gaussian_groups_spec, negbin_spec, poisson_spec
    from dhglm.mcmc import McmcConfig, chain_summary, run_mcmc
    if family == "poisson-re":
        rec, make = SimulationRecipe(family, 250, seed=seed), poisson_spec
    elif family == "negbin":
        rec, make = SimulationRecipe(family, 125, seed=seed), negbin_spec
    else:
        rec, make = SimulationRecipe(family, 5, seed=seed, n_per_group=125), gaussian_groups_spec
    chain = run_mcmc(make(simulate(rec)), McmcConfig(2000, 20000, 20, seed=seed))
    s = chain_summary(chain)
    truth = {k: v for k, v in rec.params.items()}
    return {k: s[k]["lower"] <= v <= s[k]["upper"] for k, v in truth.items() if k in s}


@pytest.mark.parametrize("family", ["poisson-re", "negbin", "gaussian-groups"])
def test_generating_model_intervals_cover_truth(family):
    workers = min(os.cpu_count() or 1, 8)
    with ProcessPoolExecutor(workers) as pool:
        runs = list(pool.map(_coverage_run, [(family, s) for s in range(20)]))
    names = runs[0].keys()
    assert len(names) >= 4
    for name in names:
        hits = sum(r[name] for r in runs)
        assert hits >= 17, (name, hits)
