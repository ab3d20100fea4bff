"""Declarative DHGLM description and its split into conditionally latent-Gaussian submodels.

A model has a mean predictor (fixed effects plus an optional random-effect
block) and a dispersion predictor acting on a log-precision or log-size.
:func:`derive_conditioning_plan` decides which scalars are sampled by
importance sampling so that what remains is latent Gaussian.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, row_standardize, spatial_lag  # noqa: F401  (re-export)
from .families import check_family

DEFAULT_COEF_PRIOR = (0.0, 0.001)  # (mean, precision)
DEFAULT_PRECISION_PRIOR = (1.0, 0.00005)  # Gamma(shape, rate)

INTERCEPT = "1"


class SpecError(ValueError):
    """Invalid or unsupported model description."""


class PlanError(ValueError):
    """No supported conditioning split for the model."""


@dataclass(frozen=True)
class LikelihoodFamily:
    """Response distribution and the source of its per-observation nuisance.

    ``nuisance`` is ``"modeled"`` (dispersion predictor), ``"known"`` (taken
    from the data column ``known_column``) or ``None`` for Poisson.
    """

    tag: str
    nuisance: str | None = None
    known_column: str | None = None

    def __post_init__(self):
        if self.tag == "binomial":
            raise SpecError("binomial likelihood is not supported")
        check_family(self.tag)
        if self.tag == "poisson":
            if self.nuisance is not None:
                raise SpecError("Poisson likelihood has no nuisance parameter")
        elif self.nuisance not in ("known", "modeled"):
            raise SpecError(f"{self.tag} likelihood needs nuisance 'known' or 'modeled'")
        if self.nuisance == "known" and not self.known_column:
            raise SpecError("known nuisance values need a data column")


@dataclass(frozen=True)
class RandomEffect:
    """Gaussian random-effect block ``u ~ N(0, precision)``.

    ``group`` is ``"obs"`` (one level per observation) or ``"group"``
    (dataset grouping).  ``covariate`` turns the block into random slopes.
    ``precision`` is ``"free"`` (scalar with Gamma prior, named
    ``precision_name``) or ``"dispersion"`` (log-precision per level given by
    the dispersion predictor).  ``precision_terms`` declares covariates in a
    precision regression; these are accepted here but no fitter supports them.
    """

    group: str = "obs"
    covariate: str | None = None
    precision: str = "free"
    precision_name: str = "tau_u"
    precision_terms: tuple = ()

    def __post_init__(self):
        if self.group not in ("obs", "group"):
            raise SpecError(f"random-effect grouping must be 'obs' or 'group', got {self.group!r}")
        if self.precision not in ("free", "dispersion"):
            raise SpecError(f"random-effect precision must be 'free' or 'dispersion', got {self.precision!r}")


@dataclass(frozen=True)
class LinearPredictor:
    """Named fixed-effect terms ``(coefficient, column)`` plus extras.

    The column ``"1"`` is the intercept.  ``level`` says whether rows are
    observations or groups (dispersion predictors of grouped models).
    """

    terms: tuple
    link: str = "log"
    offset: str | None = None
    random: RandomEffect | None = None
    level: str = "observation"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(tuple(t) for t in self.terms))
        if self.link not in ("log", "identity"):
            raise SpecError(f"unsupported link {self.link!r}")
        if self.level not in ("observation", "group"):
            raise SpecError(f"predictor level must be 'observation' or 'group', got {self.level!r}")
        names = [t[0] for t in self.terms]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate coefficient names in {names}")

    @property
    def names(self):
        return tuple(t[0] for t in self.terms)

    def design(self, data):
        """Design matrix with one column per declared coefficient."""
        source = data.group_columns if self.level == "group" else data.columns
        rows = data.n_groups if self.level == "group" else data.n
        cols = []
        for name, col in self.terms:
            if col == INTERCEPT:
                cols.append(np.ones(rows))
            elif col in source:
                cols.append(source[col])
            else:
                raise SpecError(f"term {name!r} references unknown {self.level}-level column {col!r}")
        return np.column_stack(cols) if cols else np.zeros((rows, 0))


@dataclass(frozen=True)
class Priors:
    """Coefficient priors N(mean, precision) and precision priors Gamma(shape, rate)."""

    coefficient: tuple = DEFAULT_COEF_PRIOR
    precision: tuple = DEFAULT_PRECISION_PRIOR
    overrides: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "coefficient", tuple(float(v) for v in self.coefficient))
        object.__setattr__(self, "precision", tuple(float(v) for v in self.precision))
        object.__setattr__(self, "overrides", tuple(sorted((n, tuple(float(v) for v in p)) for n, p in self.overrides)))
        if self.coefficient[1] < 0:
            raise SpecError("coefficient prior precision must be nonnegative")
        if min(self.precision) <= 0:
            raise SpecError("Gamma prior shape and rate must be positive")

    def for_coefficient(self, name):
        return dict(self.overrides).get(name, self.coefficient)

    def for_precision(self, name):
        return dict(self.overrides).get(name, self.precision)


@dataclass(frozen=True)
class DhglmSpec:
    family: LikelihoodFamily
    mean: LinearPredictor
    dispersion: LinearPredictor | None
    priors: Priors = Priors()
    data: Dataset = field(default=None, compare=False, repr=False)

    def arrays(self):
        return ModelArrays.from_spec(self)

    @property
    def parameter_names(self):
        """Names of the reported parameters (coefficients and free precisions)."""
        names = list(self.mean.names)
        if self.mean.random is not None and self.mean.random.precision == "free":
            names.append(self.mean.random.precision_name)
        if self.dispersion is not None:
            names.extend(self.dispersion.names)
            if self.dispersion.random is not None:
                names.append(self.dispersion.random.precision_name)
        return tuple(names)


@dataclass(eq=False)
class ModelArrays:
    """Numeric view of a spec bound to its data."""

    family: str
    y: np.ndarray
    X: np.ndarray
    beta_names: tuple
    offset: np.ndarray
    beta_prior: np.ndarray  # (p, 2) mean, precision
    re_index: np.ndarray | None = None
    re_values: np.ndarray | None = None
    re_levels: int = 0
    re_precision: str | None = None
    re_precision_name: str | None = None
    re_prior: tuple | None = None
    Xd: np.ndarray | None = None
    gamma_names: tuple = ()
    gamma_prior: np.ndarray | None = None
    disp_map: np.ndarray | None = None
    disp_random: bool = False
    disp_precision_name: str | None = None
    disp_prior: tuple | None = None
    known_nuisance: np.ndarray | None = None

    @classmethod
    def from_spec(cls, spec):
        data, pri = spec.data, spec.priors
        mean = spec.mean
        X = mean.design(data)
        offset = data.columns[mean.offset] if mean.offset else np.zeros(data.n)
        out = cls(
            family=spec.family.tag,
            y=data.y,
            X=X,
            beta_names=mean.names,
            offset=np.asarray(offset, dtype=float),
            beta_prior=np.array([pri.for_coefficient(n) for n in mean.names], dtype=float).reshape(-1, 2),
        )
        if mean.random is not None:
            re = mean.random
            if re.group == "obs":
                out.re_index = np.arange(data.n)
                out.re_levels = data.n
            else:
                out.re_index = data.groups
                out.re_levels = data.n_groups
            out.re_values = data.columns[re.covariate] if re.covariate else np.ones(data.n)
            out.re_precision = re.precision
            out.re_precision_name = re.precision_name
            out.re_prior = pri.for_precision(re.precision_name)
        if spec.family.nuisance == "known":
            out.known_nuisance = np.asarray(data.columns[spec.family.known_column], dtype=float)
        disp = spec.dispersion
        if disp is not None:
            out.Xd = disp.design(data)
            out.gamma_names = disp.names
            out.gamma_prior = np.array([pri.for_coefficient(n) for n in disp.names], dtype=float).reshape(-1, 2)
            if spec.family.tag != "poisson":
                out.disp_map = data.groups if disp.level == "group" else np.arange(data.n)
            if disp.random is not None:
                out.disp_random = True
                out.disp_precision_name = disp.random.precision_name
                out.disp_prior = pri.for_precision(disp.random.precision_name)
        return out


def build_spec(family, mean, dispersion=None, priors=None, data=None):
    """Validate and assemble a :class:`DhglmSpec`."""
    if data is None or data.n == 0:
        raise SpecError("a model needs a nonempty dataset")
    priors = priors or Priors()
    if not mean.terms:
        raise SpecError("mean predictor needs at least one term")
    expected_link = "identity" if family.tag == "gaussian" else "log"
    if mean.link != expected_link:
        raise SpecError(f"{family.tag} likelihood uses a {expected_link} link, got {mean.link!r}")
    if mean.level != "observation":
        raise SpecError("the mean predictor lives on observations")
    X = mean.design(data)
    if X.shape != (data.n, len(mean.terms)):
        raise SpecError("mean design matrix does not match declared coefficients")
    if mean.offset and mean.offset not in data.columns:
        raise SpecError(f"unknown offset column {mean.offset!r}")
    if family.nuisance == "known" and family.known_column not in data.columns:
        raise SpecError(f"unknown nuisance column {family.known_column!r}")

    re = mean.random
    if re is not None:
        if re.group == "group" and data.groups is None:
            raise SpecError("random effect grouped by 'group' but dataset has no grouping")
        if re.covariate and re.covariate not in data.columns:
            raise SpecError(f"unknown random-slope covariate {re.covariate!r}")

    needs_dispersion = family.nuisance == "modeled" or (re is not None and re.precision == "dispersion")
    if dispersion is None:
        if needs_dispersion:
            raise SpecError("model declares a modeled dispersion but no dispersion predictor")
    else:
        if not dispersion.terms:
            raise SpecError("dispersion predictor must have at least one column")
        if dispersion.link != "log":
            raise SpecError("dispersion predictor acts on the log scale")
        if dispersion.offset:
            raise SpecError("dispersion offsets are not supported")
        if dispersion.level == "group" and data.groups is None:
            raise SpecError("group-level dispersion predictor but dataset has no grouping")
        Xd = dispersion.design(data)
        if Xd.shape[1] != len(dispersion.terms):
            raise SpecError("dispersion design matrix does not match declared coefficients")
        if family.tag == "poisson":
            if re is None or re.precision != "dispersion":
                raise SpecError("a Poisson dispersion predictor must drive the precision of the mean random effect")
            want = "observation" if re.group == "obs" else "group"
            if dispersion.level != want:
                raise SpecError("dispersion rows must match the random-effect levels")
        else:
            if family.nuisance != "modeled":
                raise SpecError("dispersion predictor given but the likelihood nuisance is not modeled")
            if re is not None and re.precision == "dispersion":
                raise SpecError("only Poisson models may drive random-effect precisions by the dispersion predictor")
        drand = dispersion.random
        if drand is not None:
            if drand.precision != "free":
                raise SpecError("dispersion random effects need a free precision")
            if drand.covariate:
                raise SpecError("random slopes in the dispersion predictor are not supported")
            want = "group" if dispersion.level == "group" else "obs"
            if drand.group != want:
                raise SpecError("dispersion random effects must have one level per dispersion row")
    return DhglmSpec(family, mean, dispersion, priors, data)


@dataclass(frozen=True)
class SubmodelSpec:
    """One conditionally latent-Gaussian piece of a plan.

    ``response`` is ``"y"`` or ``"log_precision"`` (the sampled
    log-precisions treated as Gaussian data).  ``hyperparameter`` names the
    single free precision integrated by quadrature, and ``hyper_target``
    says whether it scales random effects (``"random"``) or the Gaussian
    observation noise (``"noise"``).
    """

    name: str
    response: str
    family: str
    coefficients: tuple
    latent_dim: int
    hyperparameter: str | None = None
    hyper_target: str | None = None
    flat_prior: bool = False


@dataclass(frozen=True)
class ConditioningPlan:
    spec: DhglmSpec
    mode: str
    theta_names: tuple
    transforms: tuple
    submodels: tuple

    @property
    def dim(self):
        return len(self.theta_names)

    def log_prior(self, thetas):
        """Prior of the sampled scalars on their sampling scale.

        Dispersion coefficients carry their Gaussian priors; sampled group
        log-precisions are deterministic nodes and get a constant prior.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self.mode == "group-precisions":
            return np.zeros(thetas.shape[0])
        a = self.spec.arrays()
        m, prec = a.gamma_prior[:, 0], a.gamma_prior[:, 1]
        return (0.5 * (np.log(prec) - np.log(2 * np.pi)) - 0.5 * prec * (thetas - m) ** 2).sum(axis=1)


def derive_conditioning_plan(spec, condition_on="auto"):
    """Rule-based choice of the importance-sampled scalars.

    Without dispersion random effects the dispersion coefficients are
    sampled and one submodel remains.  With them (grouped Gaussian data) the
    per-group log-precisions are sampled, leaving an observation submodel and
    a dispersion-regression submodel whose log marginal likelihoods add.
    """
    if condition_on not in ("auto", "coefficients_and_effects"):
        raise PlanError(f"unknown conditioning override {condition_on!r}")
    a = spec.arrays()
    fam = spec.family.tag
    mean_re = spec.mean.random
    for re in (mean_re, spec.dispersion.random if spec.dispersion is not None else None):
        if re is not None and re.precision_terms:
            raise PlanError("precision regressions with covariates are declared but not supported by the fitter")
    if spec.dispersion is None:
        raise PlanError("model has no dispersion predictor; nothing to condition on")
    if condition_on == "coefficients_and_effects":
        raise PlanError(
            "conditioning on the dispersion coefficients and every dispersion random effect grows "
            "with the number of groups and samples random effects by importance sampling; "
            "condition on the group log-precisions instead")

    mean_hyper = mean_re.precision_name if (mean_re is not None and mean_re.precision == "free") else None
    n_latent_mean = a.X.shape[1] + a.re_levels
    obs = SubmodelSpec(
        name="observation", response="y", family=fam, coefficients=a.beta_names,
        latent_dim=n_latent_mean, hyperparameter=mean_hyper,
        hyper_target="random" if mean_hyper else None,
    )
    if not a.disp_random:
        return ConditioningPlan(spec, "dispersion-coefficients", a.gamma_names,
                                ("identity",) * len(a.gamma_names), (obs,))
    if fam != "gaussian" or spec.dispersion.level != "group":
        raise PlanError(
            "random effects in the dispersion predictor are only supported for grouped Gaussian "
            "data, where the group log-precisions can be sampled")
    k = spec.data.n_groups
    disp = SubmodelSpec(
        name="dispersion", response="log_precision", family="gaussian",
        coefficients=a.gamma_names, latent_dim=a.Xd.shape[1],
        hyperparameter=a.disp_precision_name, hyper_target="noise",
    )
    names = tuple(f"log_tau[{i + 1}]" for i in range(k))
    return ConditioningPlan(spec, "group-precisions", names, ("log",) * k, (obs, disp))
