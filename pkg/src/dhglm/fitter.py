"""Conditional marginal likelihoods and posterior marginals of latent Gaussian models.

Latent vector ``kappa = (beta, u)``: ``p`` fixed effects with independent
Gaussian priors and ``q`` random-effect levels, each observation loading on
exactly one level.  The negated Hessian therefore has arrow structure (a
diagonal random-effect block bordered by ``p`` dense rows) and every
solve goes through the ``p x p`` Schur complement, so a fit costs
``O(n p^2)``.

Every routine works on a batch of problems that share design and response
but differ in nuisance values (per-observation precisions or sizes) and
random-effect precisions.  The single-problem functions wrap a batch of one.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .families import LOG_2PI, gamma_logpdf_logscale, log_factorial, loglik_terms
from .marginals import GridBatch, MarginalGrid, gaussian_grid_batch

MAX_ITER = 50
STEP_TOL = 1e-8
MAX_HALVINGS = 10

HYPER_NODES = 43
HYPER_WIDTH = 6.0
COARSE_GRID = np.arange(-12.0, 22.0 + 0.5, 1.0)
END_MASS = 1e-3
ESCAPED_MASS = 1e-2
COEF_GRID_POINTS = 61

_ROW_BUDGET = 2_000_000  # batch rows * observations per chunk


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparameter:
    """Free precision with a Gamma(shape, rate) prior, integrated on the log scale.

    ``target`` is ``"random"`` (precision of every random-effect level) or
    ``"noise"`` (precision of Gaussian observations).
    """

    name: str
    target: str = "random"
    shape: float = 1.0
    rate: float = 0.00005

    def __post_init__(self):
        if self.target not in ("random", "noise"):
            raise ValueError(f"hyperparameter target must be 'random' or 'noise', got {self.target!r}")


@dataclass(eq=False)
class LatentGaussianSubproblem:
    """A latent Gaussian model with every nuisance value fixed.

    ``nuisance`` holds per-observation Gaussian precisions or negative
    binomial sizes.  ``prior_precision`` entries of zero mean a flat prior.
    ``re_precision`` gives known per-level precisions; leave it ``None`` when
    ``hyper`` targets the random effects.
    """

    family: str
    y: np.ndarray
    design: np.ndarray
    names: tuple
    prior_mean: np.ndarray | None = None
    prior_precision: np.ndarray | None = None
    offset: np.ndarray | None = None
    nuisance: np.ndarray | None = None
    re_index: np.ndarray | None = None
    re_values: np.ndarray | None = None
    re_levels: int = 0
    re_precision: np.ndarray | None = None
    hyper: Hyperparameter | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        n, p = self.design.shape
        if self.y.shape != (n,):
            raise ValueError("response length does not match design rows")
        if len(self.names) != p:
            raise ValueError("one name per design column required")
        self.prior_mean = np.zeros(p) if self.prior_mean is None else np.asarray(self.prior_mean, dtype=float)
        self.prior_precision = (np.full(p, 0.001) if self.prior_precision is None
                                else np.asarray(self.prior_precision, dtype=float))
        if self.re_index is not None:
            self.re_index = np.asarray(self.re_index, dtype=np.int64)
            if self.re_index.shape != (n,):
                raise ValueError("every observation needs exactly one random-effect level")
            if self.re_levels <= 0:
                self.re_levels = int(self.re_index.max()) + 1
            if self.re_values is None:
                self.re_values = np.ones(n)
        if self.family in ("gaussian", "negbin") and self.nuisance is None:
            if not (self.family == "gaussian" and self.hyper is not None and self.hyper.target == "noise"):
                raise ValueError(f"{self.family} likelihood needs fixed nuisance values")
        if self.hyper is not None and self.hyper.target == "noise" and self.family != "gaussian":
            raise ValueError("a noise hyperparameter needs a Gaussian likelihood")

    @property
    def latent_dim(self):
        return self.design.shape[1] + self.re_levels

    def prior_precision_diagonal(self, hyper_value=None):
        """Diagonal of the latent prior precision ``Q``."""
        re = np.zeros(self.re_levels)
        if self.re_levels:
            if self.hyper is not None and self.hyper.target == "random":
                re[:] = hyper_value
            else:
                re = np.broadcast_to(self.re_precision, (self.re_levels,)).astype(float)
        return np.concatenate([self.prior_precision, re])


@dataclass
class ConditionalFit:
    """Result of fitting one conditional model."""

    log_marginal_likelihood: float
    marginals: dict = field(default_factory=dict)
    mean: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = True
    submodels: dict = field(default_factory=dict)
    objective_trace: tuple = ()
    random_mean: np.ndarray | None = None
    random_sd: np.ndarray | None = None


@dataclass
class FitTable:
    """Columnar results for a batch of conditional fits (one row per sample)."""

    log_ml: np.ndarray
    log_prior: np.ndarray
    submodel_log_ml: dict
    means: dict
    sds: dict
    grids: dict
    converged: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return self.log_ml.size

    @property
    def log_target(self):
        out = self.log_ml + self.log_prior
        return np.where(self.converged & np.isfinite(out), out, -np.inf)

    def row(self, i):
        return ConditionalFit(
            log_marginal_likelihood=float(self.log_ml[i]),
            marginals={k: g.row(i) for k, g in self.grids.items()},
            mean={k: float(v[i]) for k, v in self.means.items()},
            sd={k: float(v[i]) for k, v in self.sds.items()},
            iterations=int(self.iterations[i]),
            converged=bool(self.converged[i]),
            submodels={k: float(v[i]) for k, v in self.submodel_log_ml.items()},
        )

    def take(self, idx):
        return FitTable(
            self.log_ml[idx], self.log_prior[idx],
            {k: v[idx] for k, v in self.submodel_log_ml.items()},
            {k: v[idx] for k, v in self.means.items()},
            {k: v[idx] for k, v in self.sds.items()},
            {k: g.take(idx) for k, g in self.grids.items()},
            self.converged[idx], self.iterations[idx],
        )

    @staticmethod
    def concat(tables):
        t0 = tables[0]
        return FitTable(
            np.concatenate([t.log_ml for t in tables]),
            np.concatenate([t.log_prior for t in tables]),
            {k: np.concatenate([t.submodel_log_ml[k] for t in tables]) for k in t0.submodel_log_ml},
            {k: np.concatenate([t.means[k] for t in tables]) for k in t0.means},
            {k: np.concatenate([t.sds[k] for t in tables]) for k in t0.sds},
            {k: GridBatch.concat([t.grids[k] for t in tables]) for k in t0.grids},
            np.concatenate([t.converged for t in tables]),
            np.concatenate([t.iterations for t in tables]),
        )


class _Structure:
    """Batch-invariant pieces of a subproblem."""

    def __init__(self, sub):
        self.family = sub.family
        self.y = sub.y
        self.A = sub.design
        self.n, self.p = self.A.shape
        self.offset = np.zeros(self.n) if sub.offset is None else np.asarray(sub.offset, dtype=float)
        self.m = sub.prior_mean
        self.prec = sub.prior_precision
        self.proper = self.prec > 0
        self.prior_const = 0.5 * np.sum(np.log(self.prec[self.proper]) - LOG_2PI)
        self.AA = (self.A[:, :, None] * self.A[:, None, :]).reshape(self.n, self.p * self.p)
        self.q = sub.re_levels if sub.re_index is not None else 0
        self.identity_re = False
        if self.q:
            self.idx = sub.re_index
            self.v = np.asarray(sub.re_values, dtype=float)
            self.ZT = sparse.csr_matrix((np.ones(self.n), (self.idx, np.arange(self.n))), shape=(self.q, self.n))
            self.vA = self.v[:, None] * self.A
            # one level per observation with unit loadings: sums and gathers are no-ops
            self.identity_re = (self.q == self.n and np.array_equal(self.idx, np.arange(self.n))
                                and np.all(self.v == 1.0))
        self.y_const = log_factorial(self.y) if self.family != "gaussian" else None

    def rowsum(self, m):
        """Sum observation-level rows ``(B, n)`` into random-effect levels ``(B, q)``."""
        if self.identity_re:
            return m
        return np.asarray(self.ZT @ m.T).T

    def spread(self, u):
        """Random-effect contribution ``(B, n)`` to the linear predictor."""
        if self.identity_re:
            return u
        return u[:, self.idx] * self.v

    def eta(self, beta, u):
        e = self.offset + beta @ self.A.T
        if self.q:
            e = e + self.spread(u)
        return e

    def objective(self, beta, u, y, nuis, re_prec):
        ll = loglik_terms(self.family, y, self.eta(beta, u), nuis, self.y_const)[0].sum(axis=1)
        return ll + self._log_prior(beta, u, re_prec)

    def _log_prior(self, beta, u, re_prec):
        d = beta - self.m
        lp = self.prior_const - 0.5 * np.sum(self.prec * d * d, axis=1)
        if self.q:
            lp = lp + 0.5 * np.sum(np.log(re_prec) - LOG_2PI, axis=1) - 0.5 * np.sum(re_prec * u * u, axis=1)
        return lp

    def system(self, beta, u, y, nuis, re_prec):
        """Objective, gradient and the arrow blocks of the negated Hessian."""
        ll, g_eta, w = loglik_terms(self.family, y, self.eta(beta, u), nuis, self.y_const)
        w = np.broadcast_to(w, g_eta.shape)
        f = ll.sum(axis=1) + self._log_prior(beta, u, re_prec)
        B = beta.shape[0]
        g_b = g_eta @ self.A - self.prec * (beta - self.m)
        H = (w @ self.AA).reshape(B, self.p, self.p) + np.diag(self.prec)
        if not self.q:
            return f, g_b, None, H, None, None
        g_u = self.rowsum(g_eta * self.v) - re_prec * u
        wv = w * self.v
        D = self.rowsum(wv * self.v) + re_prec
        C = np.stack([self.rowsum(wv * self.A[:, a]) for a in range(self.p)], axis=1)
        return f, g_b, g_u, H, C, D


def _schur(H, C, D):
    if C is None:
        return H
    return H - np.einsum("baj,bcj->bac", C, C / D[:, None, :])


def _cholesky(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise FitError("posterior precision is singular or not positive definite "
                       "(collinear design with an improper prior?)") from None


def _newton_step(S, g_b, g_u, C, D):
    rhs = g_b if C is None else g_b - np.einsum("baj,bj->ba", C, g_u / D)
    d_b = np.linalg.solve(S, rhs[..., None])[..., 0]
    d_u = None if C is None else (g_u - np.einsum("baj,ba->bj", C, d_b)) / D
    return d_b, d_u


def _solve(st, y, nuis, re_prec, B, single_step=False, want_random=False, trace=False, integrate=False):
    """Batched safeguarded Newton ascent of the log joint density.

    Stops a row when the largest absolute latent update falls below
    ``STEP_TOL``; failing to increase the objective after ``MAX_HALVINGS``
    halvings or exhausting ``MAX_ITER`` iterations leaves the row
    unconverged.
    """
    beta = np.broadcast_to(st.m, (B, st.p)).copy()
    u = np.zeros((B, st.q))
    iters = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    history = []

    def rows(a, r):
        if a is None or a.ndim < 2 or a.shape[0] == 1:
            return a
        return a[r]

    for _ in range(1 if single_step else MAX_ITER):
        act = np.flatnonzero(~converged & ~failed)
        if act.size == 0:
            break
        yb, nb, rb = rows(y, act), rows(nuis, act), rows(re_prec, act)
        b0, u0 = beta[act], u[act]
        f, g_b, g_u, H, C, D = st.system(b0, u0, yb, nb, rb)
        if trace:
            history.append(float(f[0]))
        d_b, d_u = _newton_step(_schur_checked(H, C, D), g_b, g_u, C, D)
        size = np.abs(d_b).max(axis=1)
        if st.q:
            size = np.maximum(size, np.abs(d_u).max(axis=1))
        small = size < STEP_TOL
        t = np.ones(act.size)
        ok = small.copy()
        if single_step:
            ok[:] = True
        for _h in range(MAX_HALVINGS + 1):
            pending = np.flatnonzero(~ok)
            if pending.size == 0:
                break
            tb = t[pending, None]
            cand_b = b0[pending] + tb * d_b[pending]
            cand_u = u0[pending] + tb * d_u[pending] if st.q else u0[pending]
            f_new = st.objective(cand_b, cand_u, rows(yb, pending), rows(nb, pending), rows(rb, pending))
            good = f_new >= f[pending] - 1e-10 * (1.0 + np.abs(f[pending]))
            ok[pending[good]] = True
            t[pending[~good]] *= 0.5
        moved = ok
        beta[act[moved]] = b0[moved] + t[moved, None] * d_b[moved]
        if st.q:
            u[act[moved]] = u0[moved] + t[moved, None] * d_u[moved]
        iters[act] += 1
        converged[act[small]] = True
        failed[act[~moved]] = True
    if single_step:
        converged[:] = True

    f, g_b, g_u, H, C, D = st.system(beta, u, y, nuis, re_prec)
    if trace:
        history.append(float(f[0]))
    S = _schur(H, C, D)
    L = _cholesky(S)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    if st.q:
        logdet = logdet + np.log(D).sum(axis=1)
    d = st.p + st.q
    log_ml = f + 0.5 * d * LOG_2PI - 0.5 * logdet
    Sinv = np.linalg.inv(S)
    beta_sd = np.sqrt(np.diagonal(Sinv, axis1=1, axis2=2))
    out = {"beta": beta, "beta_sd": beta_sd, "log_ml": log_ml, "iterations": iters,
           "converged": converged & ~failed, "trace": tuple(history)}
    if want_random and st.q:
        K = C / D[:, None, :]
        var_u = 1.0 / D + np.einsum("baj,bac,bcj->bj", K, Sinv, K)
        out["u"] = u
        out["u_sd"] = np.sqrt(var_u)
    if integrate and st.q and st.family != "gaussian" and st.p <= MAX_INTEGRATED_FIXED:
        ref = _integrate_fixed_effects(st, y, nuis, re_prec, beta, u, Sinv, C, D)
        out["log_ml_joint"] = out["log_ml"]
        out["log_ml"], out["beta"], out["beta_sd"] = ref["log_ml"], ref["beta"], ref["beta_sd"]
        out["converged"] = out["converged"] & ref["converged"]
    return out


FIXED_NODES = 9
FIXED_HALF_WIDTH = 4.8
INNER_MAX_ITER = 30
MAX_INTEGRATED_FIXED = 3
INNER_MAX_STEP = 3.0


def _integrate_fixed_effects(st, y, nuis, re_prec, beta_hat, u_hat, cov, C, D):
    """Integrate random effects by a Laplace step per fixed-effect value, fixed effects by quadrature.

    Given ``beta`` the random-effect levels are conditionally independent,
    so their Laplace integral needs only a diagonal Newton solve.  The
    fixed effects are integrated on a tensor grid of ``FIXED_NODES`` points
    per dimension, uniform in the coordinates ``z`` of
    ``beta = beta_hat + chol(cov) z`` over ``|z| <= FIXED_HALF_WIDTH``.
    Returns the log marginal likelihood and the fixed-effect posterior
    mean and sd implied by the grid.
    """
    B, p = beta_hat.shape
    z1 = np.linspace(-FIXED_HALF_WIDTH, FIXED_HALF_WIDTH, FIXED_NODES)
    h = z1[1] - z1[0]
    Z = np.stack(np.meshgrid(*([z1] * p), indexing="ij"), axis=-1).reshape(-1, p)
    G = Z.shape[0]
    L = np.linalg.cholesky(cov)
    log_ml = np.empty(B)
    mean = np.empty((B, p))
    sd = np.empty((B, p))
    ok = np.ones(B, dtype=bool)
    size = max(1, _ROW_BUDGET // (G * (st.n + st.q)))

    def rows(a, sl):
        if a is None or a.ndim < 2 or a.shape[0] == 1:
            return a
        return a[sl]

    for s in range(0, B, size):
        sl = slice(s, min(B, s + size))
        b = sl.stop - sl.start
        step = np.einsum("bij,gj->bgi", L[sl], Z)
        betas = beta_hat[sl, None, :] + step
        # linear prediction of the conditional mode from the joint curvature
        u0 = u_hat[sl, None, :] - np.einsum("bpq,bgp->bgq", C[sl], step) / D[sl, None, :]
        rep = lambda a: None if a is None else (a if a.shape[0] == 1 else np.repeat(a, G, axis=0))
        yr, nr, rr = rep(rows(y, sl)), rep(rows(nuis, sl)), rep(rows(re_prec, sl))
        bf = betas.reshape(b * G, p)
        uf = u0.reshape(b * G, st.q)
        base = st.offset + bf @ st.A.T
        done = False
        for _ in range(INNER_MAX_ITER):
            eta = base + st.spread(uf)
            _, g, w = loglik_terms(st.family, yr, eta, nr, st.y_const)
            if st.identity_re:
                gu = g - rr * uf
                Du = w + rr
            else:
                gu = st.rowsum(g * st.v) - rr * uf
                Du = st.rowsum(w * st.v * st.v) + rr
            delta = np.clip(gu / Du, -INNER_MAX_STEP, INNER_MAX_STEP)
            uf = uf + delta
            if np.abs(delta).max() < STEP_TOL:
                done = True
                break
        eta = base + st.spread(uf)
        ll, _, w = loglik_terms(st.family, yr, eta, nr, st.y_const)
        Du = (w if st.identity_re else st.rowsum(w * st.v * st.v)) + rr
        f = ll.sum(axis=1) + st._log_prior(bf, uf, rr)
        lg = (f + 0.5 * st.q * LOG_2PI - 0.5 * np.log(Du).sum(axis=1)).reshape(b, G)
        logdet_L = np.log(np.diagonal(L[sl], axis1=1, axis2=2)).sum(axis=1)
        log_ml[sl] = logsumexp(lg, axis=1) + logdet_L + p * np.log(h)
        wts = np.exp(lg - lg.max(axis=1, keepdims=True))
        wts /= wts.sum(axis=1, keepdims=True)
        m = np.einsum("bg,bgp->bp", wts, betas)
        var = np.einsum("bg,bgp->bp", wts, (betas - m[:, None, :]) ** 2)
        mean[sl], sd[sl] = m, np.sqrt(var)
        ok[sl] = done & np.all(np.isfinite(lg), axis=1)
    return {"log_ml": log_ml, "beta": mean, "beta_sd": sd, "converged": ok}


def _schur_checked(H, C, D):
    S = _schur(H, C, D)
    _cholesky(S)
    return S


def _chunks(total, per_row):
    size = max(1, _ROW_BUDGET // max(per_row, 1))
    for start in range(0, total, size):
        yield slice(start, min(total, start + size))


def _solve_chunked(st, y, nuis, re_prec, B, **kw):
    parts = []

    def rows(a, sl):
        if a is None or a.ndim < 2 or a.shape[0] == 1:
            return a
        return a[sl]

    for sl in _chunks(B, st.n + st.q):
        parts.append(_solve(st, rows(y, sl), rows(nuis, sl), rows(re_prec, sl), sl.stop - sl.start, **kw))
    if len(parts) == 1:
        return parts[0]
    out = {}
    for k in parts[0]:
        if k == "trace":
            out[k] = ()
        else:
            out[k] = np.concatenate([p[k] for p in parts])
    return out


def _as_rows(a, B=None):
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    return a[None, :] if a.ndim == 1 else a


# ---------------------------------------------------------------------------
# batched fits without / with a free hyperparameter


def fit_batch(sub, nuisance=None, re_precision=None, y=None, exact=False, integrate=False):
    """Fit many copies of ``sub`` that differ in nuisance / random-effect precisions.

    Each of ``nuisance`` ``(B, n)``, ``re_precision`` ``(B, q)`` and ``y``
    ``(B, n)`` overrides the subproblem's own value row by row.  With
    ``integrate`` a non-Gaussian model with random effects gets its
    marginal likelihood and fixed-effect moments from
    :func:`_integrate_fixed_effects` instead of the joint Gaussian
    approximation.  Returns the raw result dictionary (``beta``,
    ``beta_sd``, ``log_ml``, ...).
    """
    st = _Structure(sub)
    y = _as_rows(sub.y if y is None else y)
    nuis = _as_rows(sub.nuisance if nuisance is None else nuisance)
    rp = None
    if st.q:
        rp = _as_rows(np.broadcast_to(sub.re_precision, (st.q,)) if re_precision is None else re_precision)
    B = max(a.shape[0] for a in (y, nuis, rp) if a is not None)
    return _solve_chunked(st, y, nuis, rp, B, single_step=exact, integrate=integrate)


def _hyper_rows(sub, st, ell, y, nuis, rp):
    """Expand ``(B,)`` problem rows by ``K`` log-hyperparameter nodes into ``(B*K)`` rows."""
    B, K = ell.shape
    tau = np.exp(ell.reshape(-1))

    def rep(a):
        if a is None:
            return None
        return a if a.shape[0] == 1 else np.repeat(a, K, axis=0)

    yr, nr, rr = rep(y), rep(nuis), rep(rp)
    if sub.hyper.target == "noise":
        nr = np.broadcast_to(tau[:, None], (B * K, st.n))
    elif st.q:
        rr = np.broadcast_to(tau[:, None], (B * K, st.q))
    return yr, nr, rr


def fit_hyper_batch(sub, nuisance=None, y=None, exact=False):
    """Integrate the free precision of ``sub`` by grid quadrature on the log scale, batched.

    For every row: a coarse scan locates the mode of the log posterior of
    ``log(tau)``, two parabolic refinements estimate its curvature, and a
    43-node grid covers the mode plus/minus six curvature standard
    deviations (extended once if more than 1e-3 of the mass sits in an end
    node).  The log marginal likelihood is the trapezoid log-sum-exp over
    the grid; coefficient marginals are grid-weighted Gaussian mixtures.
    """
    hyper = sub.hyper
    st = _Structure(sub)
    y = _as_rows(sub.y if y is None else y)
    nuis = _as_rows(sub.nuisance if nuisance is None else nuisance)
    rp = None
    if st.q and hyper.target != "random":
        rp = _as_rows(np.broadcast_to(sub.re_precision, (st.q,)))
    B = max([a.shape[0] for a in (y, nuis, rp) if a is not None] + [1])

    def pick(a, idx):
        if a is None or a.shape[0] == 1:
            return a
        return a[idx]

    def evaluate(ell, idx):
        yr, nr, rr = _hyper_rows(sub, st, ell, pick(y, idx), pick(nuis, idx), rp)
        res = _solve_chunked(st, yr, nr, rr, ell.size, single_step=exact)
        h = res["log_ml"].reshape(ell.shape) + gamma_logpdf_logscale(ell, hyper.shape, hyper.rate)
        ok = res["converged"].reshape(ell.shape).all(axis=1)
        return h, ok, res

    rows = np.arange(B)
    coarse = np.broadcast_to(COARSE_GRID, (B, COARSE_GRID.size))
    h0, ok, _ = evaluate(coarse, rows)
    j = np.argmax(h0, axis=1)
    at_edge = (j == 0) | (j == COARSE_GRID.size - 1)
    j = np.clip(j, 1, COARSE_GRID.size - 2)
    mode = _parabola_vertex(COARSE_GRID[j], 1.0, h0[rows, j - 1], h0[rows, j], h0[rows, j + 1])
    for step in (0.25, 0.05):
        pts = mode[:, None] + np.array([-step, 0.0, step])
        hp, ok2, _ = evaluate(pts, rows)
        ok &= ok2
        curv = -(hp[:, 0] - 2 * hp[:, 1] + hp[:, 2]) / step**2
        mode = _parabola_vertex(mode, step, hp[:, 0], hp[:, 1], hp[:, 2])
    sd = np.where(curv > 0, 1.0 / np.sqrt(np.maximum(curv, 1e-300)), 1.0)

    lo = mode - HYPER_WIDTH * sd
    hi = mode + HYPER_WIDTH * sd
    grid = np.linspace(lo, hi, HYPER_NODES, axis=1)
    h, ok3, res = evaluate(grid, rows)
    ok &= ok3
    node_beta = res["beta"].reshape(B, HYPER_NODES, -1)
    node_sd = res["beta_sd"].reshape(B, HYPER_NODES, -1)
    dens, tw, log_ml = _grid_density(grid, h)
    mass_lo, mass_hi = tw[:, 0] * dens[:, 0], tw[:, -1] * dens[:, -1]
    redo = np.flatnonzero((mass_lo > END_MASS) | (mass_hi > END_MASS))
    if redo.size:
        # shift towards the heavy end and widen
        lo2 = np.where(mass_lo[redo] > END_MASS, mode[redo] - (HYPER_WIDTH + 2) * sd[redo] - 3 * sd[redo],
                       mode[redo] - (HYPER_WIDTH + 2) * sd[redo] + 3 * sd[redo])
        hi2 = np.where(mass_hi[redo] > END_MASS, mode[redo] + (HYPER_WIDTH + 2) * sd[redo] + 3 * sd[redo],
                       mode[redo] + (HYPER_WIDTH + 2) * sd[redo] - 3 * sd[redo])
        both = (mass_lo[redo] > END_MASS) & (mass_hi[redo] > END_MASS)
        lo2 = np.where(both, mode[redo] - 2 * HYPER_WIDTH * sd[redo], lo2)
        hi2 = np.where(both, mode[redo] + 2 * HYPER_WIDTH * sd[redo], hi2)
        g2 = np.linspace(lo2, hi2, HYPER_NODES, axis=1)
        h2, ok4, res2 = evaluate(g2, redo)
        grid[redo], h[redo] = g2, h2
        ok[redo] &= ok4
        node_beta[redo] = res2["beta"].reshape(redo.size, HYPER_NODES, -1)
        node_sd[redo] = res2["beta_sd"].reshape(redo.size, HYPER_NODES, -1)
        dens, tw, log_ml = _grid_density(grid, h)
        mass_lo, mass_hi = tw[:, 0] * dens[:, 0], tw[:, -1] * dens[:, -1]
    escaped = (mass_lo > ESCAPED_MASS) | (mass_hi > ESCAPED_MASS)
    converged = ok & ~at_edge & ~escaped

    omega = tw * dens  # quadrature weight of each node, rows sum to one
    mu, sg = node_beta, node_sd
    mix_mean = np.einsum("bk,bkp->bp", omega, mu)
    mix_var = np.einsum("bk,bkp->bp", omega, sg**2 + mu**2) - mix_mean**2
    return {
        "log_ml": log_ml,
        "beta": mix_mean,
        "beta_sd": np.sqrt(np.maximum(mix_var, 0.0)),
        "node_beta": mu,
        "node_beta_sd": sg,
        "omega": omega,
        "hyper_grid": grid,
        "hyper_density": dens,
        "hyper_mean": np.sum(omega * grid, axis=1),
        "hyper_sd": np.sqrt(np.maximum(np.sum(omega * grid**2, axis=1) - np.sum(omega * grid, axis=1) ** 2, 0.0)),
        "converged": converged,
        "escaped": escaped,
        "iterations": np.full(B, HYPER_NODES, dtype=np.int64),
    }


def _grid_density(grid, h):
    step = (grid[:, -1] - grid[:, 0]) / (grid.shape[1] - 1)
    tw = np.ones_like(grid) * step[:, None]
    tw[:, 0] *= 0.5
    tw[:, -1] *= 0.5
    log_ml = logsumexp(h + np.log(tw), axis=1)
    dens = np.exp(h - log_ml[:, None])
    return dens, tw, log_ml


def _parabola_vertex(x0, step, hm, h0, hp):
    denom = hm - 2.0 * h0 + hp
    safe = np.where(denom < 0, denom, -1.0)
    offset = np.where(denom < 0, 0.5 * step * (hm - hp) / safe, 0.0)
    return x0 + np.clip(offset, -step, step)


def mixture_grid_batch(means, sds, weights, n_points=COEF_GRID_POINTS, width=6.0, chunk=2000):
    """Evaluate per-row Gaussian mixtures ``(B, K)`` on uniform per-row grids."""
    B = means.shape[0]
    live = weights > 1e-12
    lo = np.where(live, means - width * sds, np.inf).min(axis=1)
    hi = np.where(live, means + width * sds, -np.inf).max(axis=1)
    dens = np.empty((B, n_points))
    for s in range(0, B, chunk):
        sl = slice(s, min(B, s + chunk))
        x = np.linspace(lo[sl], hi[sl], n_points, axis=1)
        z = (x[:, :, None] - means[sl, None, :]) / sds[sl, None, :]
        comp = np.exp(-0.5 * z**2) / (sds[sl, None, :] * np.sqrt(2 * np.pi))
        dens[sl] = np.einsum("bgk,bk->bg", comp, weights[sl])
    return GridBatch(lo, hi, dens)


def result_table(sub, res, prefix_hyper="log_"):
    """Turn a raw batch result into a :class:`FitTable` for one submodel."""
    B = res["log_ml"].shape[0]
    means, sds, grids = {}, {}, {}
    for a, name in enumerate(sub.names):
        means[name] = res["beta"][:, a]
        sds[name] = res["beta_sd"][:, a]
        if "node_beta" in res:
            grids[name] = mixture_grid_batch(res["node_beta"][:, :, a], res["node_beta_sd"][:, :, a], res["omega"])
        else:
            grids[name] = gaussian_grid_batch(means[name], sds[name], COEF_GRID_POINTS)
    if "hyper_grid" in res:
        hname = prefix_hyper + sub.hyper.name
        means[hname] = res["hyper_mean"]
        sds[hname] = res["hyper_sd"]
        grids[hname] = GridBatch(res["hyper_grid"][:, 0].copy(), res["hyper_grid"][:, -1].copy(),
                                 res["hyper_density"], scale="log")
    return FitTable(res["log_ml"], np.zeros(B), {}, means, sds, grids,
                    np.asarray(res["converged"], dtype=bool), np.asarray(res["iterations"]))


# ---------------------------------------------------------------------------
# single-problem interface


def fit_gaussian_exact(sub):
    """Exact conjugate fit of a Gaussian model with known precisions.

    One Newton step from the prior mean lands on the posterior mean of a
    quadratic log density, and the Laplace formula is then exact.
    """
    if sub.family != "gaussian":
        raise ValueError("exact fitting needs a Gaussian likelihood")
    if sub.hyper is not None:
        raise ValueError("exact fitting needs every precision fixed; use fit_with_hyperparameter")
    return _single(sub, exact=True)


def fit_laplace(sub):
    """Laplace approximation around the Newton mode of the log joint density."""
    if sub.hyper is not None:
        raise ValueError("subproblem has a free hyperparameter; use fit_with_hyperparameter")
    fit = _single(sub, exact=False)
    if not fit.converged:
        raise FitError(f"Newton iterations did not converge after {fit.iterations} steps")
    return fit


def fit_with_hyperparameter(sub):
    """Fit with the single free precision integrated out on a log-scale grid."""
    if sub.hyper is None:
        raise ValueError("subproblem has no free hyperparameter")
    res = fit_hyper_batch(sub, exact=sub.family == "gaussian")
    if res["escaped"][0]:
        raise FitError(f"posterior mass of log({sub.hyper.name}) escapes the integration grid")
    if not res["converged"][0]:
        raise FitError("hyperparameter integration failed (inner fit or mode search did not converge)")
    table = result_table(sub, res)
    return table.row(0)


def fit(sub):
    """Dispatch to the exact, Laplace or hyperparameter-integrating fitter."""
    if sub.hyper is not None:
        return fit_with_hyperparameter(sub)
    if sub.family == "gaussian":
        return fit_gaussian_exact(sub)
    return fit_laplace(sub)


def _single(sub, exact):
    st = _Structure(sub)
    y = sub.y[None, :]
    nuis = None if sub.nuisance is None else np.asarray(sub.nuisance, dtype=float)[None, :]
    rp = None
    if st.q:
        rp = np.broadcast_to(np.asarray(sub.re_precision, dtype=float), (st.q,))[None, :]
    res = _solve(st, y, nuis, rp, 1, single_step=exact, want_random=True, trace=True)
    table = result_table(sub, res)
    out = table.row(0)
    out = replace(out, objective_trace=res["trace"])
    if st.q:
        out.random_mean = res["u"][0]
        out.random_sd = res["u_sd"][0]
    return out


def penalized_objective(sub, kappa):
    """Log joint density ``log p(y | kappa) + log p(kappa)`` at latent vector ``kappa``."""
    st = _Structure(sub)
    kappa = np.asarray(kappa, dtype=float)
    beta, u = kappa[None, :st.p], kappa[None, st.p:]
    nuis = None if sub.nuisance is None else np.asarray(sub.nuisance, dtype=float)[None, :]
    rp = None if not st.q else np.broadcast_to(sub.re_precision, (st.q,))[None, :]
    return float(st.objective(beta, u, sub.y[None, :], nuis, rp)[0])


def penalized_gradient(sub, kappa):
    """Analytic gradient of :func:`penalized_objective`."""
    st = _Structure(sub)
    kappa = np.asarray(kappa, dtype=float)
    beta, u = kappa[None, :st.p], kappa[None, st.p:]
    nuis = None if sub.nuisance is None else np.asarray(sub.nuisance, dtype=float)[None, :]
    rp = None if not st.q else np.broadcast_to(sub.re_precision, (st.q,))[None, :]
    _, g_b, g_u, *_ = st.system(beta, u, sub.y[None, :], nuis, rp)
    return g_b[0] if g_u is None else np.concatenate([g_b[0], g_u[0]])


def marginal_grid(mean, sd, n_points=COEF_GRID_POINTS):
    """Gaussian marginal on a grid over ``mean +- 6 sd``."""
    return gaussian_grid_batch(np.array([mean]), np.array([sd]), n_points).row(0)


__all__ = [
    "ConditionalFit", "FitError", "FitTable", "Hyperparameter", "LatentGaussianSubproblem",
    "MarginalGrid", "fit", "fit_batch", "fit_gaussian_exact", "fit_hyper_batch", "fit_laplace",
    "fit_with_hyperparameter", "marginal_grid", "penalized_gradient", "penalized_objective",
    "result_table",
]
