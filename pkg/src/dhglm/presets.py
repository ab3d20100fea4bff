"""Named experiments: data, model, sampler settings and reporting at two scales.

``paper`` scale uses the original sample sizes and run lengths; ``desk``
scale divides sample sizes by four and shortens both samplers so every
preset finishes in minutes.
"""

from dataclasses import dataclass, field, replace
from importlib.resources import files

import numpy as np

from .amis import (AmisConfig, group_sample_variances, init_proposal_from_data,
                   init_proposal_from_group_variances, mix_marginals, mixed_moments,
                   permutation_search_init, sample_posterior_theta_c, theta_marginal, vague_proposal)
from .conditional import ConditionalTarget
from .data import ingest_csv
from .mcmc import McmcConfig, chain_summary
from .model import LikelihoodFamily, LinearPredictor, RandomEffect, build_spec, derive_conditioning_plan
from .report import ParameterSummary
from .simulate import SimulationRecipe, simulate

SCALES = ("paper", "desk")
DESK_DIVISOR = 4
MCMC_SCALES = {"paper": (10000, 100000, 100), "desk": (2000, 20000, 20)}
AMIS_SCALES = {"paper": (5000, 10, 1000), "desk": (1000, 5, 500)}
SLEEP_AMIS = {"paper": (1000, 20, 1000), "desk": (1000, 5, 500)}
N_PERM = 500
VAGUE_VARIANCE = 5.0

# (n_initial, n_per_stage, proposal kind, variance inflation) per scenario, at paper scale
GAUSSIAN_SCENARIOS = {
    1: (5000, 1000, "vague", None),
    2: (5000, 1000, "data", 1.0),
    3: (1000, 1000, "vague", None),
    4: (1000, 1000, "data", 1.0),
    5: (5000, 1000, "data", 10.0),
    6: (5000, 5000, "data", 1.0),
}
GAUSSIAN_GROUPS = 5
GAUSSIAN_PER_GROUP = 500
LOW_ESS = 100.0


class PresetError(KeyError):
    pass


@dataclass
class Experiment:
    """A fully specified run: data, model and sampler settings."""

    preset: str
    scale: str
    seed: int
    data: object
    spec: object
    amis: AmisConfig
    mcmc: McmcConfig
    truth: dict = field(default_factory=dict)
    init_info: dict = field(default_factory=dict)
    low_ess_threshold: float = LOW_ESS
    _target: object = field(default=None, repr=False)

    @property
    def plan(self):
        return self.target.plan

    @property
    def target(self):
        if self._target is None:
            self._target = ConditionalTarget(derive_conditioning_plan(self.spec))
        return self._target

    @property
    def parameters(self):
        return self.spec.parameter_names


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    builder: object

    def build(self, scale="desk", seed=0, overrides=None):
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}; expected one of {SCALES}")
        exp = self.builder(self.name, scale, int(seed), overrides or {})
        return apply_overrides(exp, overrides or {})


def _mcmc(scale, seed):
    burn, iters, thin = MCMC_SCALES[scale]
    return McmcConfig(burn_in=burn, iterations=iters, thin=thin, seed=seed)


def _sizes(scale, paper_n):
    return paper_n if scale == "paper" else max(1, paper_n // DESK_DIVISOR)


def _recipe(family, scale, seed, overrides, paper_n, **kw):
    rec = overrides.get("recipe", {})
    params = dict(rec.get("params", {}))
    n = int(rec.get("n", _sizes(scale, paper_n)))
    extra = {k: rec[k] for k in ("n_per_group",) if k in rec}
    kw.update(extra)
    return SimulationRecipe(family, n, params, seed, **kw)


def _stage_config(scale, proposal, seed, table=AMIS_SCALES):
    n0, t, nt = table[scale]
    return AmisConfig(n0, t, nt, proposal, seed)


def _poisson(name, scale, seed, overrides):
    recipe = _recipe("poisson-re", scale, seed, overrides, 1000)
    data = simulate(recipe)
    spec = build_spec(
        LikelihoodFamily("poisson"),
        LinearPredictor((("beta0", "1"), ("beta1", "x")), random=RandomEffect("obs", precision="dispersion")),
        LinearPredictor((("gamma0", "1"), ("gamma1", "z"))),
        data=data)
    return Experiment(name, scale, seed, data, spec, _stage_config(scale, vague_proposal(2, VAGUE_VARIANCE), seed),
                      _mcmc(scale, seed), dict(recipe.params))


def _negbin(name, scale, seed, overrides):
    recipe = _recipe("negbin", scale, seed, overrides, 500)
    data = simulate(recipe)
    spec = build_spec(
        LikelihoodFamily("negbin", "modeled"),
        LinearPredictor((("beta0", "1"), ("beta1", "x"))),
        LinearPredictor((("gamma0", "1"), ("gamma1", "z"))),
        data=data)
    return Experiment(name, scale, seed, data, spec, _stage_config(scale, vague_proposal(2, VAGUE_VARIANCE), seed),
                      _mcmc(scale, seed), dict(recipe.params))


def _spatial(name, scale, seed, overrides):
    family = "spatial-poisson" if name == "spatial-poisson" else "spatial-negbin"
    # the region count is fixed by the lattice, so both scales use the same data
    recipe = SimulationRecipe(family, 32, dict(overrides.get("recipe", {}).get("params", {})), seed)
    data = simulate(recipe)
    if family == "spatial-poisson":
        fam = LikelihoodFamily("poisson")
        mean = LinearPredictor((("beta", "1"), ("rho", "lag")), offset="log_births",
                               random=RandomEffect("obs", precision="dispersion"))
    else:
        fam = LikelihoodFamily("negbin", "modeled")
        mean = LinearPredictor((("beta", "1"), ("rho", "lag")), offset="log_births")
    spec = build_spec(fam, mean, LinearPredictor((("gamma0", "1"), ("gamma1", "ibn"))), data=data)
    return Experiment(name, scale, seed, data, spec, _stage_config(scale, vague_proposal(2, VAGUE_VARIANCE), seed),
                      _mcmc(scale, seed), dict(recipe.params))


def gaussian_scenario_sizes(scenario, scale):
    """``(n_initial, n_stages, n_per_stage)``; desk scale keeps each scenario's ratios."""
    n0, nt, _, _ = GAUSSIAN_SCENARIOS[scenario]
    if scale == "paper":
        return n0, 10, nt
    return n0 // 5, 5, nt // 2


def _gaussian(name, scale, seed, overrides):
    scenario = int(name.rsplit("-", 1)[1])
    rec = overrides.get("recipe", {})
    per_group = int(rec.get("n_per_group", _sizes(scale, GAUSSIAN_PER_GROUP)))
    recipe = SimulationRecipe("gaussian-groups", int(rec.get("n", GAUSSIAN_GROUPS)), dict(rec.get("params", {})),
                              seed, n_per_group=per_group)
    data = simulate(recipe)
    spec = build_spec(
        LikelihoodFamily("gaussian", "modeled"),
        LinearPredictor((("beta0", "1"), ("beta1", "x")), link="identity"),
        LinearPredictor((("gamma0", "1"), ("gamma1", "z")), level="group",
                        random=RandomEffect("group", precision_name="tau_u")),
        data=data)
    _, _, kind, inflate = GAUSSIAN_SCENARIOS[scenario]
    k = data.n_groups
    info = {"scenario": scenario, "initial_proposal": kind}
    if kind == "vague":
        proposal = vague_proposal(k, VAGUE_VARIANCE)
    else:
        a = spec.arrays()
        s2, n_g = group_sample_variances(a.y, data.groups, a.X, about="group")
        proposal = init_proposal_from_group_variances(s2, n_g, inflate)
        info["variance_inflation"] = inflate
    n0, t, nt = gaussian_scenario_sizes(scenario, scale)
    truth = dict(recipe.params)
    for i, v in enumerate(data.provenance["log_tau"]):
        truth[f"log_tau[{i + 1}]"] = v
    return Experiment(name, scale, seed, data, spec, AmisConfig(n0, t, nt, proposal, seed), _mcmc(scale, seed),
                      truth, info)


def sleep_data(rescale=1e-3):
    """The bundled 18-subject, 10-day reaction-time table (response scaled by ``rescale``)."""
    schema = {"response": "Reaction", "group": "Subject", "columns": {"days": "Days"}, "rescale": rescale}
    return ingest_csv(files("dhglm") / "data" / "sleepstudy.csv", schema)


def _residual_design(a):
    """Mean design with random-effect columns treated as fixed, for rough residual variances."""
    if a.re_index is None:
        return a.X
    z = np.zeros((a.y.size, a.re_levels))
    z[np.arange(a.y.size), a.re_index] = a.re_values
    return np.hstack([a.X, z])


def _sleep(name, scale, seed, overrides):
    data = sleep_data(float(overrides.get("rescale", 1e-3)))
    if name == "sleep-rcoef":
        mean = LinearPredictor((("beta0", "1"),), link="identity",
                               random=RandomEffect("group", covariate="days", precision_name="tau_beta"))
    else:
        mean = LinearPredictor((("beta0", "1"), ("beta1", "days")), link="identity")
    spec = build_spec(
        LikelihoodFamily("gaussian", "modeled"), mean,
        LinearPredictor((("gamma", "1"),), level="group", random=RandomEffect("group", precision_name="tau_u")),
        data=data)
    exp = Experiment(name, scale, seed, data, spec, _stage_config(scale, None, seed, SLEEP_AMIS), _mcmc(scale, seed))
    a = spec.arrays()
    s2, _ = group_sample_variances(a.y, data.groups, _residual_design(a), about="model")
    start = init_proposal_from_data(s2)
    n_perm = int(overrides.get("n_perm", N_PERM))
    proposal, best, identity = permutation_search_init(start.mean, exp.target, n_perm, seed=seed)
    exp.amis = replace(exp.amis, proposal=proposal)
    exp.init_info = {"n_perm": n_perm, "log_ml_identity": identity, "log_ml_best": best,
                     "dimension": proposal.dim}
    return exp


PRESETS = {}


def _register(name, description, builder):
    PRESETS[name] = Preset(name, description, builder)


_register("poisson-sim", "Poisson log-linear model with observation-level random effects whose "
          "log-precision is linear in a covariate (n=1000)", _poisson)
_register("negbin-sim", "Negative binomial regression with a log-linear model for the size (n=500)", _negbin)
for _s, (_n0, _nt, _kind, _inf) in GAUSSIAN_SCENARIOS.items():
    _label = "vague" if _kind == "vague" else ("data-informed x10 variance" if _inf == 10 else "data-informed")
    _register(f"gaussian-sim-scenario-{_s}",
              f"Grouped Gaussian data with modelled group log-precisions; AMIS {_n0} + 10 x {_nt}, "
              f"{_label} initial proposal", _gaussian)
_register("spatial-poisson", "Region counts with a births offset, spatial-lag covariate and random effects "
          "whose log-precision depends on a regional index (32-region lattice)", _spatial)
_register("spatial-negbin", "Region counts, negative binomial with log-size linear in a regional index "
          "(32-region lattice)", _spatial)
_register("sleep-rcoef", "Reaction times with per-subject random slopes and per-subject precisions", _sleep)
_register("sleep-fixed", "Reaction times with a common slope and per-subject precisions", _sleep)


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise PresetError(f"unknown preset {name!r}; run 'dhglm list-presets' to see the choices") from None


def build_experiment(name, scale="desk", seed=0, overrides=None):
    return get_preset(name).build(scale, seed, overrides)


def apply_overrides(exp, overrides):
    """Apply ``amis`` and ``mcmc`` sections of an override mapping (unknown keys are rejected)."""
    allowed = {"amis", "mcmc", "recipe", "rescale", "n_perm"}
    extra = set(overrides) - allowed
    if extra:
        raise ValueError(f"unknown override sections {sorted(extra)}; allowed: {sorted(allowed)}")
    am = overrides.get("amis") or {}
    bad = set(am) - {"n_initial", "n_stages", "n_per_stage"}
    if bad:
        raise ValueError(f"unknown amis overrides {sorted(bad)}")
    if am:
        exp.amis = replace(exp.amis, **{k: int(v) for k, v in am.items()})
    mc = overrides.get("mcmc") or {}
    bad = set(mc) - {"burn_in", "iterations", "thin"}
    if bad:
        raise ValueError(f"unknown mcmc overrides {sorted(bad)}")
    if mc:
        exp.mcmc = replace(exp.mcmc, **{k: int(v) for k, v in mc.items()})
    return exp


def _free_precisions(spec):
    names = set()
    if spec.mean.random is not None and spec.mean.random.precision == "free":
        names.add(spec.mean.random.precision_name)
    if spec.dispersion is not None and spec.dispersion.random is not None:
        names.add(spec.dispersion.random.precision_name)
    return names


def summarize_amis(exp, ensemble, level=0.95, min_ess=10.0):
    """Reported parameters from an AMIS ensemble.

    Sampled scalars are summarised from the weighted draws, coefficients
    from the mixed conditional marginals, and precisions by mixing their
    log-scale marginals before exponentiating.  Summaries of sampled
    scalars are refused when the ESS does not exceed ``min_ess``.
    """
    theta = None
    precisions = _free_precisions(exp.spec)
    out = []
    for name in exp.parameters:
        if name in ensemble.names:
            if theta is None:
                theta = sample_posterior_theta_c(ensemble, level, min_ess)
            s = theta[name]
            out.append(ParameterSummary(name, s["mean"], s["sd"], s["lower"], s["upper"], exp.truth.get(name)))
            continue
        if name in precisions:
            grid = mix_marginals(ensemble, f"log_{name}", transform="exp")
            mean, sd = grid.mean(), grid.sd()
        else:
            grid = mix_marginals(ensemble, name)
            mean, sd = mixed_moments(ensemble, name)
        lo, hi = grid.interval(level)
        out.append(ParameterSummary(name, float(mean), float(sd), float(lo), float(hi), exp.truth.get(name)))
    return out


def summarize_mcmc(exp, chain, level=0.95):
    stats = chain_summary(chain, level)
    return [ParameterSummary(n, stats[n]["mean"], stats[n]["sd"], stats[n]["lower"], stats[n]["upper"],
                             exp.truth.get(n)) for n in exp.parameters]


def marginal_grids_amis(exp, ensemble):
    """Posterior marginal grid per reported parameter (as returned by :func:`mix_marginals`)."""
    precisions = _free_precisions(exp.spec)
    grids = {}
    for name in exp.parameters:
        if name in ensemble.names:
            grids[name] = theta_marginal(ensemble, ensemble.names.index(name))
        elif name in precisions:
            grids[name] = mix_marginals(ensemble, f"log_{name}", transform="exp")
        else:
            grids[name] = mix_marginals(ensemble, name)
    return grids


__all__ = ["Experiment", "GAUSSIAN_SCENARIOS", "PRESETS", "Preset", "PresetError", "SCALES", "apply_overrides",
           "build_experiment", "gaussian_scenario_sizes", "get_preset", "marginal_grids_amis", "sleep_data",
           "summarize_amis", "summarize_mcmc"]
