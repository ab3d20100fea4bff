"""Random-walk Metropolis-within-Gibbs sampler for the full DHGLM posterior.

Blocks, each a Gaussian random walk:

* mean coefficients ``beta`` (joint block);
* mean random effects ``u`` (one independent 1-D update per level,
  vectorised because each observation loads on a single level);
* a free random-effect precision (log scale);
* dispersion coefficients ``gamma`` (joint block);
* group log-precisions ``log_tau[g]`` when the dispersion predictor has
  random effects (one 1-D update per group), and their precision ``tau_u``.

Precisions move on the log scale; their Gamma priors are expressed on that
scale so the Jacobian is included.  Step sizes adapt during burn-in only:
Robbins-Monro on the log step, plus the empirical covariance shape of joint
blocks refreshed at doubling checkpoints.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .conditional import ConditionalTarget
from .families import gamma_logpdf_logscale, log_factorial, loglik_terms
from .fitter import fit
from .model import derive_conditioning_plan

TARGET_JOINT = 0.234
TARGET_SCALAR = 0.44
ADAPT_EXPONENT = 0.6


class McmcError(RuntimeError):
    pass


@dataclass
class McmcConfig:
    burn_in: int = 2000
    iterations: int = 20000
    thin: int = 20
    seed: int = 0
    step_sizes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thinning interval must be at least 1")
        if self.burn_in < 0 or self.iterations < 0:
            raise ValueError("burn-in and iterations must be nonnegative")

    @property
    def retained(self):
        return self.iterations // self.thin


@dataclass
class McmcChain:
    """Retained draws (name -> array) and post-burn-in acceptance rates per block."""

    draws: dict
    acceptance: dict
    config: McmcConfig | None = None

    @property
    def n_draws(self):
        return len(next(iter(self.draws.values()))) if self.draws else 0

    def to_frame(self):
        return pd.DataFrame(self.draws)


class _Adapter:
    """Burn-in step-size adaptation for one block (scalar or per-component log steps)."""

    def __init__(self, log_step, target):
        self.log_step = np.asarray(log_step, dtype=float).copy()
        self.target = target

    def update(self, t, accept_prob):
        self.log_step += (t + 1.0) ** -ADAPT_EXPONENT * (accept_prob - self.target)
        np.clip(self.log_step, -30.0, 10.0, out=self.log_step)

    @property
    def step(self):
        return np.exp(self.log_step)


def _accept_prob(delta):
    return np.exp(np.minimum(delta, 0.0))


class _Sampler:
    def __init__(self, spec, config, init):
        self.spec = spec
        self.config = config
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(config.seed), 7])))
        a = self.a = spec.arrays()
        self.family = a.family
        self.y = a.y
        self.y_const = log_factorial(a.y) if a.family != "gaussian" else None
        self.q = a.re_levels if a.re_index is not None else 0
        self.free_re = self.q and a.re_precision == "free"
        self.has_gamma = a.Xd is not None
        self.grouped_disp = a.disp_random
        self.beta = init["beta"].copy()
        self.u = init["u"].copy() if self.q else np.zeros(0)
        self.log_tau_re = init.get("log_tau_re", 0.0)
        self.gamma = init["gamma"].copy() if self.has_gamma else np.zeros(0)
        if self.grouped_disp:
            self.log_tau_g = init["log_tau_g"].copy()
            self.log_tau_u = init["log_tau_u"]
        self.eta = self._eta(self.beta, self.u)
        self.nuis = self._nuisance()
        self.ll = self._ll(self.eta, self.nuis)
        if not np.all(np.isfinite(self.ll)) or not np.isfinite(self._gamma_logdens(self.gamma)):
            raise McmcError("log posterior is not finite at the initial state")
        self._init_proposals(init.get("scales", {}))

    # -- model pieces ------------------------------------------------------
    def _eta(self, beta, u):
        a = self.a
        e = a.offset + a.X @ beta
        if self.q:
            e = e + u[a.re_index] * a.re_values
        return e

    def _nuisance(self, gamma=None, log_tau_g=None):
        a = self.a
        if self.family == "poisson":
            return None
        if a.known_nuisance is not None:
            return a.known_nuisance
        if self.grouped_disp:
            ltg = self.log_tau_g if log_tau_g is None else log_tau_g
            return np.exp(ltg)[a.disp_map]
        g = self.gamma if gamma is None else gamma
        return np.exp(a.Xd @ g)[a.disp_map]

    def _ll(self, eta, nuis):
        return loglik_terms(self.family, self.y, eta, nuis, self.y_const)[0]

    def _re_precision(self, gamma=None):
        a = self.a
        if a.re_precision == "dispersion":
            g = self.gamma if gamma is None else gamma
            return np.exp(a.Xd @ g)
        return np.exp(self.log_tau_re)

    @staticmethod
    def _normal_prior(x, prior):
        m, p = prior[:, 0], prior[:, 1]
        return float(np.sum(-0.5 * p * (x - m) ** 2))

    def _gamma_logdens(self, gamma):
        """Terms of the log posterior that involve the dispersion coefficients."""
        if not self.has_gamma:
            return 0.0
        a = self.a
        out = self._normal_prior(gamma, a.gamma_prior)
        if self.grouped_disp:
            r = self.log_tau_g - a.Xd @ gamma
            return out - 0.5 * np.exp(self.log_tau_u) * float(r @ r)
        if a.re_precision == "dispersion":
            lp = a.Xd @ gamma
            return out + float(np.sum(0.5 * lp - 0.5 * np.exp(lp) * self.u**2))
        return out + float(np.sum(self._ll(self.eta, self._nuisance(gamma=gamma))))

    # -- proposals ---------------------------------------------------------
    def _init_proposals(self, scales):
        p = self.beta.size
        sb = np.asarray(scales.get("beta", np.full(p, 0.1)), dtype=float)
        self.L_beta = np.diag(np.maximum(sb, 1e-8))
        self.ad_beta = _Adapter(np.log(2.38 / np.sqrt(p)) if p > 1 else np.log(2.4), TARGET_JOINT if p > 1 else TARGET_SCALAR)
        if self.q:
            su = np.asarray(scales.get("u", np.full(self.q, 0.5)), dtype=float)
            self.ad_u = _Adapter(np.log(2.4 * np.maximum(su, 1e-8)), TARGET_SCALAR)
        if self.free_re:
            self.ad_tau = _Adapter(np.log(0.5), TARGET_SCALAR)
        if self.has_gamma:
            r = self.gamma.size
            sg = np.asarray(scales.get("gamma", np.full(r, 0.1)), dtype=float)
            self.L_gamma = np.diag(np.maximum(sg, 1e-8))
            self.ad_gamma = _Adapter(np.log(2.38 / np.sqrt(r)) if r > 1 else np.log(2.4),
                                     TARGET_JOINT if r > 1 else TARGET_SCALAR)
        if self.grouped_disp:
            k = self.log_tau_g.size
            st = np.asarray(scales.get("log_tau_g", np.full(k, 0.1)), dtype=float)
            self.ad_ltg = _Adapter(np.log(2.4 * np.maximum(st, 1e-8)), TARGET_SCALAR)
            self.ad_tau_u = _Adapter(np.log(0.5), TARGET_SCALAR)

    # -- block updates -----------------------------------------------------
    def update_beta(self, t, adapt):
        z = self.rng.standard_normal(self.beta.size)
        prop = self.beta + self.ad_beta.step * (self.L_beta @ z)
        eta = self._eta(prop, self.u)
        ll = self._ll(eta, self.nuis)
        a = self.a
        delta = float(ll.sum() - self.ll.sum()) + self._normal_prior(prop, a.beta_prior) - self._normal_prior(self.beta, a.beta_prior)
        acc = np.log(self.rng.random()) < delta
        if acc:
            self.beta, self.eta, self.ll = prop, eta, ll
        if adapt:
            self.ad_beta.update(t, float(_accept_prob(delta)) if np.isfinite(delta) else 0.0)
        return acc

    def update_u(self, t, adapt):
        a = self.a
        z = self.rng.standard_normal(self.q)
        prop = self.u + self.ad_u.step * z
        d_eta = (prop - self.u)[a.re_index] * a.re_values
        eta = self.eta + d_eta
        ll = self._ll(eta, self.nuis)
        dll = np.bincount(a.re_index, weights=ll - self.ll, minlength=self.q)
        prec = self._re_precision()
        delta = dll - 0.5 * prec * (prop**2 - self.u**2)
        delta = np.where(np.isfinite(delta), delta, -np.inf)
        acc = np.log(self.rng.random(self.q)) < delta
        self.u = np.where(acc, prop, self.u)
        obs_acc = acc[a.re_index]
        self.eta = np.where(obs_acc, eta, self.eta)
        self.ll = np.where(obs_acc, ll, self.ll)
        if adapt:
            self.ad_u.update(t, _accept_prob(delta))
        return acc.mean()

    def update_tau_re(self, t, adapt):
        shape, rate = self.a.re_prior
        cur = self.log_tau_re
        prop = cur + self.ad_tau.step * self.rng.standard_normal()
        ss = float(self.u @ self.u)

        def logd(l):
            return 0.5 * self.q * l - 0.5 * np.exp(l) * ss + gamma_logpdf_logscale(l, shape, rate)

        delta = logd(prop) - logd(cur)
        acc = np.log(self.rng.random()) < delta
        if acc:
            self.log_tau_re = prop
        if adapt:
            self.ad_tau.update(t, float(_accept_prob(delta)))
        return acc

    def update_gamma(self, t, adapt):
        z = self.rng.standard_normal(self.gamma.size)
        prop = self.gamma + self.ad_gamma.step * (self.L_gamma @ z)
        delta = self._gamma_logdens(prop) - self._gamma_logdens(self.gamma)
        if not np.isfinite(delta):
            delta = -np.inf
        acc = np.log(self.rng.random()) < delta
        if acc:
            self.gamma = prop
            if not self.grouped_disp and self.family != "poisson" and self.a.known_nuisance is None:
                self.nuis = self._nuisance()
                self.ll = self._ll(self.eta, self.nuis)
        if adapt:
            self.ad_gamma.update(t, float(_accept_prob(delta)))
        return acc

    def update_log_tau_g(self, t, adapt):
        a = self.a
        k = self.log_tau_g.size
        prop = self.log_tau_g + self.ad_ltg.step * self.rng.standard_normal(k)
        nuis = np.exp(prop)[a.disp_map]
        ll = self._ll(self.eta, nuis)
        dll = np.bincount(a.disp_map, weights=ll - self.ll, minlength=k)
        mean = a.Xd @ self.gamma
        tu = np.exp(self.log_tau_u)
        delta = dll - 0.5 * tu * ((prop - mean) ** 2 - (self.log_tau_g - mean) ** 2)
        acc = np.log(self.rng.random(k)) < delta
        self.log_tau_g = np.where(acc, prop, self.log_tau_g)
        obs_acc = acc[a.disp_map]
        self.nuis = np.exp(self.log_tau_g)[a.disp_map]
        self.ll = np.where(obs_acc, ll, self.ll)
        if adapt:
            self.ad_ltg.update(t, _accept_prob(delta))
        return acc.mean()

    def update_tau_u(self, t, adapt):
        shape, rate = self.a.disp_prior
        r = self.log_tau_g - self.a.Xd @ self.gamma
        ss = float(r @ r)
        k = r.size
        cur = self.log_tau_u
        prop = cur + self.ad_tau_u.step * self.rng.standard_normal()

        def logd(l):
            return 0.5 * k * l - 0.5 * np.exp(l) * ss + gamma_logpdf_logscale(l, shape, rate)

        delta = logd(prop) - logd(cur)
        acc = np.log(self.rng.random()) < delta
        if acc:
            self.log_tau_u = prop
        if adapt:
            self.ad_tau_u.update(t, float(_accept_prob(delta)))
        return acc

    # -- driver ------------------------------------------------------------
    def blocks(self):
        out = [("beta", self.update_beta)]
        if self.q:
            out.append(("u", self.update_u))
        if self.free_re:
            out.append(("tau_re", self.update_tau_re))
        if self.has_gamma:
            out.append(("gamma", self.update_gamma))
        if self.grouped_disp:
            out.append(("log_tau_g", self.update_log_tau_g))
            out.append(("tau_u", self.update_tau_u))
        return out

    def record(self):
        a = self.a
        rec = dict(zip(a.beta_names, self.beta))
        if self.free_re:
            rec[a.re_precision_name] = np.exp(self.log_tau_re)
        if self.has_gamma:
            rec.update(zip(a.gamma_names, self.gamma))
        if self.grouped_disp:
            rec[a.disp_precision_name] = np.exp(self.log_tau_u)
            for g, v in enumerate(self.log_tau_g):
                rec[f"log_tau[{g + 1}]"] = v
        return rec

    def _refresh_shape(self, hist, L_attr, adapter):
        h = np.asarray(hist[len(hist) // 2:])
        if h.shape[0] < 20:
            return
        d = h.shape[1]
        cov = np.cov(h, rowvar=False).reshape(d, d)
        cov = cov + 1e-10 * max(np.trace(cov) / d, 1e-10) * np.eye(d)
        try:
            setattr(self, L_attr, np.linalg.cholesky(cov))
        except np.linalg.LinAlgError:
            return
        adapter.log_step[...] = np.log(2.38 / np.sqrt(d))

    def run(self):
        cfg = self.config
        blocks = self.blocks()
        joint = [(name, getattr(self, "L_" + name), getattr(self, "ad_" + name))
                 for name in ("beta", "gamma") if hasattr(self, "L_" + name) and getattr(self, name).size > 1]
        hist = {name: [] for name, *_ in joint}
        checkpoint = 100
        for t in range(cfg.burn_in):
            for _, fn in blocks:
                fn(t, True)
            for name, *_ in joint:
                hist[name].append(getattr(self, name).copy())
            if t + 1 == checkpoint:
                for name, _, ad in joint:
                    self._refresh_shape(hist[name], "L_" + name, ad)
                checkpoint *= 2
        draws = {k: [] for k in self.record()}
        acc = {name: 0.0 for name, _ in blocks}
        for t in range(cfg.iterations):
            for name, fn in blocks:
                acc[name] += float(fn(t, False))
            if (t + 1) % cfg.thin == 0:
                for k, v in self.record().items():
                    draws[k].append(float(v))
        n = max(cfg.iterations, 1)
        return McmcChain({k: np.asarray(v) for k, v in draws.items()}, {k: v / n for k, v in acc.items()}, cfg)


def initial_state(spec, theta0=None):
    """Starting values from a conditional Laplace/exact fit at ``theta0``.

    ``theta0`` defaults to zero dispersion coefficients or, for grouped
    dispersion random effects, the log inverse residual variance of each group.
    """
    a = spec.arrays()
    plan = derive_conditioning_plan(spec) if a.Xd is not None else None
    init = {}
    scales = {}
    if plan is None:
        sub = _plain_subproblem(spec)
        f = fit(sub)
        init["beta"] = np.array([f.mean[n] for n in a.beta_names])
        scales["beta"] = np.array([f.sd[n] for n in a.beta_names])
        if f.random_mean is not None:
            init["u"] = f.random_mean
            scales["u"] = f.random_sd
        if a.re_index is not None and a.re_precision == "free":
            init["log_tau_re"] = 0.0
        init["scales"] = scales
        return init
    target = ConditionalTarget(plan)
    if theta0 is None:
        if plan.mode == "group-precisions":
            from .amis import group_sample_variances
            s2, _ = group_sample_variances(a.y, spec.data.groups, a.X)
            theta0 = -np.log(s2)
        else:
            theta0 = np.zeros(plan.dim)
    theta0 = np.asarray(theta0, dtype=float)
    table = target.evaluate(theta0[None, :])
    row = table.row(0)
    init["beta"] = np.array([row.mean[n] for n in a.beta_names])
    scales["beta"] = np.array([row.sd[n] for n in a.beta_names])
    sub = target.observation
    nuis, re_prec = target._observation_inputs(theta0[None, :])
    changes = {"hyper": None}
    if nuis is not None:
        changes["nuisance"] = nuis[0]
    if sub.re_index is not None:
        if sub.hyper is not None:
            lt = row.mean["log_" + sub.hyper.name]
            init["log_tau_re"] = lt
            changes["re_precision"] = np.full(sub.re_levels, np.exp(lt))
        else:
            changes["re_precision"] = re_prec[0]
    f = fit(replace(sub, **changes))
    if f.random_mean is not None:
        init["u"] = f.random_mean
        scales["u"] = f.random_sd
    if plan.mode == "group-precisions":
        init["log_tau_g"] = theta0
        init["gamma"] = np.array([row.mean[n] for n in a.gamma_names])
        scales["gamma"] = np.array([row.sd[n] for n in a.gamma_names])
        init["log_tau_u"] = row.mean["log_" + a.disp_precision_name]
        n_g = np.bincount(spec.data.groups)
        scales["log_tau_g"] = np.sqrt(2.0 / np.maximum(n_g - 1, 1))
    else:
        init["gamma"] = theta0
        scales["gamma"] = np.full(plan.dim, 0.1)
    init["scales"] = scales
    return init


def _plain_subproblem(spec):
    from .fitter import LatentGaussianSubproblem
    a = spec.arrays()
    re_prec = None
    if a.re_index is not None:
        re_prec = np.ones(a.re_levels)
    return LatentGaussianSubproblem(
        family=a.family, y=a.y, design=a.X, names=a.beta_names, prior_mean=a.beta_prior[:, 0],
        prior_precision=a.beta_prior[:, 1], offset=a.offset, nuisance=a.known_nuisance,
        re_index=a.re_index, re_values=a.re_values, re_levels=a.re_levels, re_precision=re_prec,
    )


def run_mcmc(spec, config=None, init=None):
    """Sample the joint posterior of ``spec``; returns a :class:`McmcChain`."""
    config = config or McmcConfig()
    if config.retained == 0:
        raise McmcError("no iterations retained after burn-in and thinning; the chain would be empty")
    init = init or initial_state(spec)
    return _Sampler(spec, config, init).run()


def chain_summary(chain, level=0.95, min_draws=10):
    """Mean, sd and equal-tailed interval of every retained parameter."""
    draws = chain.draws if isinstance(chain, McmcChain) else chain
    a = 0.5 * (1 - level)
    out = {}
    for name, x in draws.items():
        x = np.asarray(x, dtype=float)
        if x.size < min_draws:
            raise McmcError(f"{name}: {x.size} draws, need at least {min_draws}")
        lo, hi = np.quantile(x, [a, 1 - a])
        out[name] = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)), "lower": float(lo), "upper": float(hi)}
    return out


def random_walk_metropolis(logpdf, n, x0=0.0, burn_in=2000, seed=0, step=1.0):
    """Adaptive-in-burn-in 1-D random-walk Metropolis on a scalar log density."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 11])))
    x, lp = float(x0), float(logpdf(x0))
    ad = _Adapter(np.log(step), TARGET_SCALAR)
    out = np.empty(n)
    for t in range(burn_in + n):
        prop = x + float(ad.step) * rng.standard_normal()
        lq = float(logpdf(prop))
        delta = lq - lp
        if np.log(rng.random()) < delta:
            x, lp = prop, lq
        if t < burn_in:
            ad.update(t, float(_accept_prob(delta)))
        else:
            out[t - burn_in] = x
    return out


__all__ = ["McmcChain", "McmcConfig", "McmcError", "chain_summary", "initial_state", "random_walk_metropolis",
           "run_mcmc"]
