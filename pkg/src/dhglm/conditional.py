"""Conditional marginal likelihood ``log p(y | theta_c)`` for batches of sampled scalars."""

import numpy as np

from .fitter import (FitTable, Hyperparameter, LatentGaussianSubproblem, fit_batch,
                     fit_hyper_batch, result_table)


class ConditionalTarget:
    """Evaluate every conditional fit required by a :class:`ConditioningPlan`.

    ``evaluate(thetas)`` takes an ``(M, d)`` array of sampled scalars and
    returns a :class:`FitTable` whose ``log_target`` is the unnormalised log
    posterior of each row.  With two submodels the total log marginal
    likelihood is the sum of the submodel values.
    """

    def __init__(self, plan, integrate=True):
        self.plan = plan
        self.integrate = integrate
        self.spec = plan.spec
        self.arrays = a = plan.spec.arrays()
        obs = plan.submodels[0]
        hyper = None
        if obs.hyperparameter:
            shape, rate = a.re_prior
            hyper = Hyperparameter(obs.hyperparameter, "random", shape, rate)
        dummy_nuis = np.ones(a.y.size) if a.family in ("gaussian", "negbin") else None
        fixed_re = None
        if a.re_index is not None and a.re_precision == "dispersion":
            fixed_re = np.ones(a.re_levels)
        self.observation = LatentGaussianSubproblem(
            family=a.family, y=a.y, design=a.X, names=a.beta_names,
            prior_mean=a.beta_prior[:, 0], prior_precision=a.beta_prior[:, 1], offset=a.offset,
            nuisance=dummy_nuis, re_index=a.re_index, re_values=a.re_values, re_levels=a.re_levels,
            re_precision=fixed_re, hyper=hyper,
        )
        self.dispersion = None
        if plan.mode == "group-precisions":
            shape, rate = a.disp_prior
            self.dispersion = LatentGaussianSubproblem(
                family="gaussian", y=np.zeros(a.Xd.shape[0]), design=a.Xd, names=a.gamma_names,
                prior_mean=a.gamma_prior[:, 0], prior_precision=a.gamma_prior[:, 1],
                hyper=Hyperparameter(plan.submodels[1].hyperparameter, "noise", shape, rate),
            )

    @property
    def dim(self):
        return self.plan.dim

    def _observation_inputs(self, thetas):
        a = self.arrays
        if self.plan.mode == "group-precisions":
            return np.exp(thetas)[:, a.disp_map], None
        scale = np.exp(thetas @ a.Xd.T)
        if a.family == "poisson":
            return None, scale
        return scale[:, a.disp_map], None

    def _fit_observation(self, thetas):
        nuis, re_prec = self._observation_inputs(thetas)
        sub = self.observation
        exact = sub.family == "gaussian"
        if sub.hyper is not None:
            res = fit_hyper_batch(sub, nuisance=nuis, exact=exact)
        else:
            res = fit_batch(sub, nuisance=nuis, re_precision=re_prec, exact=exact, integrate=self.integrate)
        return result_table(sub, res)

    def evaluate(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} conditioning values per row, got {thetas.shape[1]}")
        table = self._fit_observation(thetas)
        first = self.plan.submodels[0].name
        table.submodel_log_ml = {first: table.log_ml.copy()}
        if self.dispersion is not None:
            res = fit_hyper_batch(self.dispersion, y=thetas, exact=True)
            other = result_table(self.dispersion, res)
            table.submodel_log_ml[self.plan.submodels[1].name] = other.log_ml
            table.log_ml = table.log_ml + other.log_ml
            table.means.update(other.means)
            table.sds.update(other.sds)
            table.grids.update(other.grids)
            table.converged = table.converged & other.converged
            table.iterations = np.maximum(table.iterations, other.iterations)
        table.log_prior = self.plan.log_prior(thetas)
        return table

    def log_target(self, thetas):
        return self.evaluate(thetas).log_target

    def fit_one(self, theta):
        """Single-row convenience returning a :class:`ConditionalFit`."""
        return self.evaluate(np.asarray(theta, dtype=float)[None, :]).row(0)


__all__ = ["ConditionalTarget", "FitTable"]
