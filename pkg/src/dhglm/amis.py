"""Adaptive multiple importance sampling over the conditioning parameters.

Every stage draws from the current proposal, evaluates the conditional
log marginal likelihood plus log prior of each draw, and then reweights
*all* draws so far against the deterministic mixture of every proposal
used::

    log w_m = log target(theta_m) - log sum_t (N_t / N) s_t(theta_m)

The proposal is then moved to the weighted mean and covariance.
"""

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .fitter import FitError, FitTable
from .marginals import MarginalGrid, transform_marginal

log = logging.getLogger(__name__)

STUDENT_T_DF = 3.0
RIDGE = 1e-6
MIN_EIGENVALUE = 1e-10
MIX_POINTS = 201
NEGLIGIBLE_WEIGHT = 1e-12
EVAL_BLOCK = 250  # rows per batched conditional fit


class AmisError(RuntimeError):
    pass


class LowEssWarning(UserWarning):
    pass


@dataclass
class ProposalState:
    """Multivariate Gaussian (``df=None``) or Student-t proposal on the sampling scale.

    ``history`` lists ``(mean, cov, n_samples)`` for every completed stage.
    """

    mean: np.ndarray
    cov: np.ndarray
    df: float | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        d = self.mean.size
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = np.eye(d) * float(cov)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= MIN_EIGENVALUE:
            raise ValueError("covariance must be positive definite")
        self.cov = cov

    @property
    def family(self):
        return "gaussian" if self.df is None else "student-t"

    @property
    def dim(self):
        return self.mean.size

    def _dist(self, mean=None, cov=None):
        mean = self.mean if mean is None else mean
        cov = self.cov if cov is None else cov
        if self.df is None:
            return stats.multivariate_normal(mean, cov)
        return stats.multivariate_t(mean, cov, df=self.df)

    def sample(self, rng, n):
        x = self._dist().rvs(size=n, random_state=rng)
        return np.asarray(x, dtype=float).reshape(n, self.dim)

    def logpdf(self, x, mean=None, cov=None):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return np.atleast_1d(self._dist(mean, cov).logpdf(x))

    def completed(self, n):
        """Copy with the current component recorded as a finished stage of ``n`` draws."""
        return replace(self, history=self.history + [(self.mean.copy(), self.cov.copy(), int(n))])


def vague_proposal(dim, variance=5.0, df=None):
    return ProposalState(np.zeros(dim), np.eye(dim) * variance, df)


@dataclass
class AmisConfig:
    """Stage sizes, initial proposal and seed."""

    n_initial: int = 5000
    n_stages: int = 10
    n_per_stage: int = 1000
    proposal: ProposalState | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_initial < 1 or self.n_per_stage < 1 or self.n_stages < 0:
            raise ValueError("need n_initial >= 1, n_stages >= 0 and n_per_stage >= 1")

    @property
    def total(self):
        return self.n_initial + self.n_stages * self.n_per_stage


@dataclass
class WeightedEnsemble:
    """All AMIS draws with their deterministic-mixture weights and conditional fits."""

    samples: np.ndarray
    log_target: np.ndarray
    log_weights: np.ndarray
    fits: FitTable | None
    stage: np.ndarray
    names: tuple = ()
    transforms: tuple = ()
    stage_log: list = field(default_factory=list)
    proposal: ProposalState | None = None

    @property
    def weights(self):
        """Normalized weights (sum to one)."""
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw))

    @property
    def ess(self):
        return effective_sample_size(np.exp(self.log_weights - np.max(self.log_weights)))

    def __len__(self):
        return self.samples.shape[0]


def effective_sample_size(weights):
    """``(sum w)^2 / sum w^2`` for nonnegative, not all zero weights."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a nonempty array of finite nonnegative values")
    top = w.max()
    if top == 0:
        raise ValueError("all weights are zero")
    w = w / top
    return float(w.sum() ** 2 / np.dot(w, w))


class FunctionTarget:
    """Wrap a vectorised log density ``f(thetas) -> (M,)`` as an AMIS target without fits."""

    def __init__(self, log_density, dim, names=None):
        self.log_density = log_density
        self.dim = dim
        self.names = tuple(names) if names else tuple(f"theta[{i + 1}]" for i in range(dim))
        self.transforms = ("identity",) * dim

    def evaluate(self, thetas):
        thetas = np.atleast_2d(thetas)
        m = thetas.shape[0]
        lt = np.atleast_1d(np.asarray(self.log_density(thetas), dtype=float)).reshape(m)
        return FitTable(lt, np.zeros(m), {}, {}, {}, {}, np.ones(m, dtype=bool), np.zeros(m, dtype=np.int64))


def _evaluate(target, thetas, workers):
    # Fixed block boundaries: a row is always fitted alongside the same rows,
    # so batched linear algebra rounds identically whatever the worker count.
    parts = [thetas[s:s + EVAL_BLOCK] for s in range(0, thetas.shape[0], EVAL_BLOCK)]
    if workers <= 1 or len(parts) < 2:
        tables = [target.evaluate(p) for p in parts]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(parts))) as pool:
            tables = list(pool.map(target.evaluate, parts))
    return tables[0] if len(tables) == 1 else FitTable.concat(tables)


def _stage_rng(seed, stage):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stage)])))


def _mixture_log_density(log_comp, counts):
    """``log sum_t (N_t/N) s_t`` from per-component log densities ``(M, T)``."""
    counts = np.asarray(counts, dtype=float)
    return logsumexp(log_comp + np.log(counts / counts.sum()), axis=1)


def run_amis(target, config, workers=1, monitor=True):
    """Run AMIS on ``target`` (a :class:`ConditionalTarget` or any object with ``evaluate``).

    Returns a :class:`WeightedEnsemble`.  ``stage_log`` records, per stage,
    the sample count, ESS, proposal mean/covariance and (if ``monitor``)
    the conditional log marginal likelihood at the proposal mean.
    """
    dim = target.dim
    state = config.proposal if config.proposal is not None else vague_proposal(dim)
    if state.dim != dim:
        raise ValueError(f"proposal dimension {state.dim} does not match target dimension {dim}")
    state = replace(state, history=[])
    samples, tables, stage_idx = [], [], []
    log_comp = np.zeros((0, 0))
    stage_log = []
    ens = None
    for t in range(config.n_stages + 1):
        n = config.n_initial if t == 0 else config.n_per_stage
        x = state.sample(_stage_rng(config.seed, t), n)
        try:
            table = _evaluate(target, x, workers)
        except FitError as exc:
            raise AmisError(f"stage {t}: conditional fit failed: {exc}") from exc
        samples.append(x)
        tables.append(table)
        stage_idx.append(np.full(n, t))
        state = state.completed(n)
        all_x = np.concatenate(samples)
        # densities of the new draws under old components, and of all draws under the new one
        old = np.column_stack([state.logpdf(x, m, c) for m, c, _ in state.history[:-1]]) if t else np.zeros((n, 0))
        log_comp = np.vstack([log_comp.reshape(-1, t), old]) if t else old
        log_comp = np.column_stack([log_comp, state.logpdf(all_x)])
        counts = [h[2] for h in state.history]
        fits = FitTable.concat(tables) if len(tables) > 1 else tables[0]
        lt = fits.log_target
        n_bad = int(np.sum(~np.isfinite(lt)))
        lw = lt - _mixture_log_density(log_comp, counts)
        if not np.any(np.isfinite(lw)):
            raise AmisError(f"stage {t}: all importance weights are zero; the proposal misses the posterior")
        ens = WeightedEnsemble(all_x, lt, lw, fits, np.concatenate(stage_idx),
                               tuple(getattr(target, "names", None) or _names(target)),
                               tuple(_transforms(target)), stage_log, state)
        entry = {"stage": t, "n": n, "n_total": all_x.shape[0], "ess": ens.ess, "failed_fits": n_bad,
                 "mean": state.mean.tolist(), "cov": state.cov.tolist()}
        if monitor:
            entry["log_ml_at_mean"] = float(target.evaluate(state.mean[None, :]).log_ml[0])
        stage_log.append(entry)
        log.info("AMIS stage %d: n=%d ESS=%.2f", t, all_x.shape[0], entry["ess"])
        if t < config.n_stages:
            state = adapt_proposal(ens, state)
    ens.proposal = state
    return ens


def _names(target):
    plan = getattr(target, "plan", None)
    if plan is not None:
        return plan.theta_names
    return tuple(f"theta[{i + 1}]" for i in range(target.dim))


def _transforms(target):
    plan = getattr(target, "plan", None)
    if plan is not None:
        return plan.transforms
    return getattr(target, "transforms", ("identity",) * target.dim)


def weighted_moments(x, w):
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    m = w @ x
    r = x - m
    return m, (w[:, None] * r).T @ r


def adapt_proposal(ensemble, state, ridge=RIDGE, min_ess=None):
    """Move the proposal to the weighted sample mean and covariance.

    A ridge ``eps * I`` with ``eps = ridge * trace / dim`` keeps the
    covariance positive definite; ``trace`` is the larger of the weighted
    covariance trace and the current proposal trace, so a collapsed
    weighted covariance falls back to a small multiple of the previous
    scale.  Low ESS triggers a :class:`LowEssWarning`.
    """
    w = ensemble.weights
    ess = ensemble.ess
    d = state.dim
    if min_ess is None:
        min_ess = d + 1
    if ess < min_ess:
        warnings.warn(f"ESS {ess:.2f} is below {min_ess}; weighted covariance is unreliable", LowEssWarning,
                      stacklevel=2)
    mean, cov = weighted_moments(ensemble.samples, w)
    cov = 0.5 * (cov + cov.T)
    eps = max(ridge * max(np.trace(cov), np.trace(state.cov)) / d, MIN_EIGENVALUE)
    cov = cov + eps * np.eye(d)
    if not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov).min() <= MIN_EIGENVALUE:
        raise AmisError("adapted proposal covariance is not positive definite after regularization")
    return ProposalState(mean, cov, state.df, list(state.history))


def mix_marginals(ensemble, name, n_points=MIX_POINTS, transform=None):
    """Weighted average of the conditional marginals ``name`` on a common grid.

    The grid spans the union of the supports of every component with
    non-negligible weight.  ``transform`` (e.g. ``"exp"``) is applied after
    mixing, which is how log-precision marginals become precision marginals.
    """
    fits = ensemble.fits
    if fits is None or name not in fits.grids:
        raise KeyError(f"no conditional marginal named {name!r}")
    batch = fits.grids[name]
    w = ensemble.weights
    rows = np.flatnonzero(w > NEGLIGIBLE_WEIGHT * w.max())
    t = np.linspace(batch.lo[rows].min(), batch.hi[rows].max(), n_points)
    dens = np.zeros(n_points)
    for s in range(0, rows.size, 4096):
        r = rows[s:s + 4096]
        dens += w[r] @ batch.interpolate(t, r)
    grid = MarginalGrid(t, dens, batch.scale).normalized()
    if transform is not None:
        grid = transform_marginal(grid, transform)
    return grid


def mixed_moments(ensemble, name):
    """Exact mixture mean and sd from per-fit conditional means and sds."""
    w = ensemble.weights
    m = ensemble.fits.means[name]
    s = ensemble.fits.sds[name]
    mean = float(w @ m)
    var = float(w @ (s**2 + m**2)) - mean**2
    return mean, float(np.sqrt(max(var, 0.0)))


def weighted_quantile(values, weights, q):
    """Inverse of the weighted empirical cdf (first value whose cumulative weight reaches ``q``)."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values)[order]
    c = np.cumsum(np.asarray(weights)[order])
    c = c / c[-1]
    idx = np.searchsorted(c, np.atleast_1d(q) - 1e-12, side="left")
    return v[np.clip(idx, 0, v.size - 1)]


def sample_posterior_theta_c(ensemble, level=0.95, min_ess=10.0):
    """Weighted mean, sd and quantile interval per conditioning component.

    Refused (``AmisError``) when the ESS does not exceed ``min_ess``.
    Returns ``{name: {"mean", "sd", "lower", "upper"}}`` on the sampling scale.
    """
    ess = ensemble.ess
    if ess <= min_ess:
        raise AmisError(f"ESS {ess:.2f} <= {min_ess}: posterior summary of the conditioning "
                        "parameters is unreliable; inspect the weight diagnostic curves")
    w = ensemble.weights
    a = 0.5 * (1 - level)
    out = {}
    for j, name in enumerate(ensemble.names):
        x = ensemble.samples[:, j]
        m = float(w @ x)
        sd = float(np.sqrt(max(w @ (x - m) ** 2, 0.0)))
        lo, hi = weighted_quantile(x, w, [a, 1 - a])
        out[name] = {"mean": m, "sd": sd, "lower": float(lo), "upper": float(hi)}
    return out


def theta_marginal(ensemble, j, n_points=MIX_POINTS):
    """Weighted kernel density estimate of conditioning component ``j`` on a grid."""
    x = ensemble.samples[:, j]
    w = ensemble.weights
    keep = w > NEGLIGIBLE_WEIGHT * w.max()
    x, w = x[keep], w[keep]
    m = w @ x
    sd = np.sqrt(max(w @ (x - m) ** 2, 0.0))
    if x.size < 2 or sd == 0 or np.unique(x).size < 2:
        sd = sd if sd > 0 else 1e-3
        t = np.linspace(m - 6 * sd, m + 6 * sd, n_points)
        return MarginalGrid(t, stats.norm.pdf(t, m, sd)).normalized()
    kde = stats.gaussian_kde(x, weights=w)
    bw = float(np.sqrt(kde.covariance[0, 0]))
    t = np.linspace(x.min() - 4 * bw, x.max() + 4 * bw, n_points)
    return MarginalGrid(t, kde(t)).normalized()


def weight_diagnostic_curve(ensemble, component):
    """Cumulative normalized weight of draws sorted by one component, against ``1/M..M/M``.

    Returns ``(p, cumulative)``; an accurate weighting stays near the diagonal.
    """
    x = ensemble.samples[:, component]
    m = x.size
    if m < 2:
        raise ValueError("diagnostic curve needs at least two samples")
    order = np.argsort(x, kind="stable")
    u = np.exp(ensemble.log_weights - np.max(ensemble.log_weights))[order]
    cum = np.cumsum(u) / np.sum(u)
    p = np.arange(1, m + 1) / m
    return p, cum


def init_proposal_from_data(s2, scale=0.05, floor=0.05, df=None):
    """Proposal centred at ``log(1/S^2)`` with diagonal ``max(scale*|log(1/S^2)|, floor)``."""
    s2 = np.atleast_1d(np.asarray(s2, dtype=float))
    if np.any(~(s2 > 0)):
        raise ValueError("sample variances must be positive")
    mean = -np.log(s2)
    var = np.maximum(scale * np.abs(mean), floor)
    return ProposalState(mean, np.diag(var), df)


def init_proposal_from_group_variances(s2, n_per_group, inflate=1.0, df=None):
    """Proposal centred at ``log(1/S^2)`` with variances ``var(log S^2) / n_g`` times ``inflate``."""
    s2 = np.atleast_1d(np.asarray(s2, dtype=float))
    if np.any(~(s2 > 0)):
        raise ValueError("sample variances must be positive")
    n_g = np.broadcast_to(np.asarray(n_per_group, dtype=float), s2.shape)
    logs = np.log(s2)
    spread = np.var(logs, ddof=1) if s2.size > 1 else 1.0
    var = inflate * np.maximum(spread, 1e-6) / n_g
    return ProposalState(-logs, np.diag(var), df)


def group_sample_variances(y, groups, design=None, about="model"):
    """Per-group spread of ``y`` or of OLS residuals on ``design``.

    With ``about="model"`` (and a design) the spread is the mean squared
    residual about the pooled fit, so systematic group offsets the mean
    model does not capture count as noise.  ``about="group"`` gives the
    ordinary ``ddof=1`` variance about each group's own mean.
    """
    if about not in ("model", "group"):
        raise ValueError("about must be 'model' or 'group'")
    y = np.asarray(y, dtype=float)
    groups = np.asarray(groups)
    r = y
    if design is not None:
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        r = y - design @ coef
    k = groups.max() + 1
    n = np.bincount(groups, minlength=k)
    if np.any(n < 2):
        raise ValueError("every group needs at least two observations")
    if design is not None and about == "model":
        return np.bincount(groups, r ** 2, minlength=k) / n, n
    mean = np.bincount(groups, r, minlength=k) / n
    ss = np.bincount(groups, (r - mean[groups]) ** 2, minlength=k)
    return ss / (n - 1), n


def permutation_search_init(candidate, target, n_perm=500, seed=0, cov=None, df=None):
    """Pick the permutation of ``candidate`` with the highest conditional log marginal likelihood.

    The identity is evaluated first and wins ties.  When ``p!`` does not
    exceed ``n_perm + 1`` every permutation is tried.  Returns
    ``(ProposalState, best_value, identity_value)``; ``cov`` may be a
    callable mapping the chosen mean to a covariance.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    candidate = np.asarray(candidate, dtype=float)
    p = candidate.size
    n_all = 1
    for i in range(2, p + 1):
        n_all *= i
        if n_all > n_perm + 1:
            break
    if n_all <= n_perm + 1:
        perms = np.array(list(permutations(range(p))))
    else:
        rng = np.random.default_rng(seed)
        perms = np.vstack([np.arange(p)] + [rng.permutation(p) for _ in range(n_perm)])
    thetas = candidate[perms]
    values = target.evaluate(thetas).log_ml
    if not np.any(np.isfinite(values)):
        raise AmisError("conditional fit failed for every permutation")
    values = np.where(np.isfinite(values), values, -np.inf)
    best = int(np.argmax(values))  # first maximum; identity is row 0
    mean = thetas[best]
    if cov is None:
        c = np.diag(np.maximum(0.05 * np.abs(mean), 0.05))
    elif callable(cov):
        c = cov(mean)
    else:
        c = cov
    return ProposalState(mean, c, df), float(values[best]), float(values[0])


__all__ = [
    "AmisConfig", "AmisError", "FunctionTarget", "LowEssWarning", "ProposalState", "WeightedEnsemble",
    "adapt_proposal", "effective_sample_size", "group_sample_variances", "init_proposal_from_data",
    "init_proposal_from_group_variances", "mix_marginals", "mixed_moments", "permutation_search_init",
    "run_amis", "sample_posterior_theta_c", "theta_marginal", "vague_proposal", "weight_diagnostic_curve",
    "weighted_quantile",
]
