"""Seeded data generators.

Every column draws from its own counter-based stream (Philox keyed by the
seed and a CRC32 of the column name), so a column does not change when
others are added or drawn in a different order.
"""

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DataError, Dataset, lattice_adjacency, row_standardize, spatial_lag

RECIPE_FAMILIES = ("poisson-re", "negbin", "gaussian-groups", "spatial-poisson", "spatial-negbin")

DEFAULT_PARAMS = {
    "poisson-re": {"beta0": 1.0, "beta1": 0.25, "gamma0": 0.0, "gamma1": 0.5},
    "negbin": {"beta0": 1.0, "beta1": 0.25, "gamma0": 0.0, "gamma1": 5.0},
    "gaussian-groups": {"beta0": 1.0, "beta1": 0.25, "gamma0": 0.0, "gamma1": 5.0, "tau_u": 1.0},
    "spatial-poisson": {"beta": -4.9, "rho": 0.042, "gamma0": 4.2, "gamma1": -0.042},
    "spatial-negbin": {"beta": -4.9, "rho": 0.042, "gamma0": 4.25, "gamma1": -0.045},
}


@dataclass(frozen=True)
class SimulationRecipe:
    """Generator settings.

    ``n`` is the number of observations, or the number of groups for
    ``gaussian-groups`` (with ``n_per_group`` observations each).  Spatial
    recipes use an ``lattice[0] x lattice[1]`` queen lattice of regions.
    """

    family: str
    n: int
    params: dict = field(default_factory=dict)
    seed: int = 0
    n_per_group: int = 1
    lattice: tuple = (4, 8)

    def __post_init__(self):
        if self.family not in RECIPE_FAMILIES:
            raise ValueError(f"unknown recipe family {self.family!r}; expected one of {RECIPE_FAMILIES}")
        merged = dict(DEFAULT_PARAMS[self.family])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    def to_dict(self):
        d = asdict(self)
        d["lattice"] = list(self.lattice)
        return d


def stream(seed, name):
    """Independent generator for one named column."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


def _check_n(n, what="observations"):
    if n <= 0:
        raise DataError(f"recipe must generate at least one {what}")


def _finite(name, values):
    if not np.all(np.isfinite(values)):
        raise DataError(f"non-finite {name} generated; parameters overflow")
    return values


def simulate_poisson_re(recipe):
    """``y ~ Poi(exp(b0 + b1 x + u))`` with ``u ~ N(0, precision exp(g0 + g1 z))``."""
    n, p, s = recipe.n, recipe.params, recipe.seed
    _check_n(n)
    x = stream(s, "x").uniform(0.0, 1.0, n)
    z = stream(s, "z").standard_normal(n)
    with np.errstate(over="ignore"):
        tau = _finite("precision", np.exp(p["gamma0"] + p["gamma1"] * z))
        u = stream(s, "u").standard_normal(n) / np.sqrt(tau)
        rate = _finite("rate", np.exp(p["beta0"] + p["beta1"] * x + u))
    y = stream(s, "y").poisson(rate).astype(float)
    return Dataset(y, {"x": x, "z": z}, provenance={"recipe": recipe.to_dict()})


def _negbin_draw(rng, mu, k):
    return rng.negative_binomial(k, k / (k + mu)).astype(float)


def simulate_negbin(recipe):
    """``y ~ NB(mu, k)``, ``log mu = b0 + b1 x``, ``log k = g0 + g1 z`` with standardised ``z``."""
    n, p, s = recipe.n, recipe.params, recipe.seed
    _check_n(n)
    x = stream(s, "x").uniform(10.0, 20.0, n)
    z = stream(s, "z").uniform(0.0, 20.0, n)
    if n > 1:
        z = (z - z.mean()) / z.std(ddof=1)
    else:
        z = np.zeros(1)
    with np.errstate(over="ignore"):
        k = _finite("size", np.exp(p["gamma0"] + p["gamma1"] * z))
        mu = _finite("mean", np.exp(p["beta0"] + p["beta1"] * x))
    y = _negbin_draw(stream(s, "y"), mu, k)
    return Dataset(y, {"x": x, "z": z}, provenance={"recipe": recipe.to_dict()})


def simulate_gaussian_groups(recipe):
    """``y_ij ~ N(b0 + b1 x_ij, precision tau_i)``, ``log tau_i = g0 + g1 z_i + u_i``, ``u_i ~ N(0, tau_u)``."""
    k, m, p, s = recipe.n, recipe.n_per_group, recipe.params, recipe.seed
    _check_n(k, "group")
    _check_n(m)
    groups = np.repeat(np.arange(k), m)
    x = stream(s, "x").uniform(0.0, 1.0, k * m)
    z = stream(s, "z").uniform(-1.0, 1.0, k)
    u = stream(s, "u").standard_normal(k) / np.sqrt(p["tau_u"])
    with np.errstate(over="ignore"):
        tau = _finite("precision", np.exp(p["gamma0"] + p["gamma1"] * z + u))
    y = p["beta0"] + p["beta1"] * x + stream(s, "y").standard_normal(k * m) / np.sqrt(tau[groups])
    prov = {"recipe": recipe.to_dict(), "log_tau": np.log(tau).tolist()}
    return Dataset(y, {"x": x}, groups, {"z": z}, provenance=prov)


def _spatial_covariates(recipe):
    nr, nc = recipe.lattice
    n = nr * nc
    s = recipe.seed
    adj = lattice_adjacency(nr, nc, queen=True)
    w = row_standardize(adj)
    births = np.round(stream(s, "births").uniform(2000.0, 60000.0, n))
    ibn = stream(s, "ibn").uniform(10.0, 70.0, n)
    baseline = stream(s, "baseline_rates").uniform(10.0, 30.0, n)
    lag = spatial_lag(w, baseline)
    return n, adj, births, ibn, baseline, lag


def simulate_spatial(recipe):
    """Counts over a lattice of regions with a births offset and a spatially lagged rate covariate.

    ``spatial-poisson``: ``y ~ Poi(births exp(beta + rho lag + u))`` with
    ``u ~ N(0, precision exp(g0 + g1 ibn))``.  ``spatial-negbin``: negative
    binomial with mean ``births exp(beta + rho lag)`` and size
    ``exp(g0 + g1 ibn)``.  The lag averages a baseline rate field over
    queen neighbours; observed rates per 1000 births are stored too.
    """
    n, adj, births, ibn, baseline, lag = _spatial_covariates(recipe)
    p, s = recipe.params, recipe.seed
    with np.errstate(over="ignore"):
        disp = _finite("dispersion", np.exp(p["gamma0"] + p["gamma1"] * ibn))
        if recipe.family == "spatial-poisson":
            u = stream(s, "u").standard_normal(n) / np.sqrt(disp)
            mu = _finite("mean", births * np.exp(p["beta"] + p["rho"] * lag + u))
            y = stream(s, "y").poisson(mu).astype(float)
        elif recipe.family == "spatial-negbin":
            mu = _finite("mean", births * np.exp(p["beta"] + p["rho"] * lag))
            y = _negbin_draw(stream(s, "y"), mu, disp)
        else:
            raise ValueError(f"not a spatial recipe: {recipe.family!r}")
    columns = {"log_births": np.log(births), "births": births, "ibn": ibn, "lag": lag,
               "baseline_rates": baseline, "rates": 1000.0 * y / births}
    return Dataset(y, columns, adjacency=adj, provenance={"recipe": recipe.to_dict()})


def simulate(recipe):
    """Dispatch on ``recipe.family``."""
    if recipe.family == "poisson-re":
        return simulate_poisson_re(recipe)
    if recipe.family == "negbin":
        return simulate_negbin(recipe)
    if recipe.family == "gaussian-groups":
        return simulate_gaussian_groups(recipe)
    return simulate_spatial(recipe)


__all__ = ["DEFAULT_PARAMS", "SimulationRecipe", "simulate", "simulate_gaussian_groups", "simulate_negbin",
           "simulate_poisson_re", "simulate_spatial", "stream"]
