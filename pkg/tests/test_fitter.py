import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from oracles import adaptive_log_integral, gaussian_log_evidence, log_joint, tensor_log_integral
from dhglm.conditional import ConditionalTarget
from dhglm.fitter import (FitError, Hyperparameter, LatentGaussianSubproblem, fit, fit_gaussian_exact, fit_laplace,
                          fit_with_hyperparameter, penalized_gradient, penalized_objective)
from dhglm.model import derive_conditioning_plan
from dhglm.simulate import SimulationRecipe, simulate
from conftest import gaussian_groups_spec


def _sub(family, y, X, prior_prec=1.0, nuisance=None, **kw):
    X = np.atleast_2d(X)
    p = X.shape[1]
    return LatentGaussianSubproblem(family, np.asarray(y, float), X, tuple(f"b{i}" for i in range(p)),
                                    prior_mean=np.zeros(p), prior_precision=np.full(p, prior_prec),
                                    nuisance=nuisance, **kw)


def test_single_observation_closed_form():
    sub = _sub("gaussian", [0.0], np.ones((1, 1)), 1.0, nuisance=np.ones(1))
    assert fit_gaussian_exact(sub).log_marginal_likelihood == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-12)
    assert -0.5 * np.log(4 * np.pi) == pytest.approx(-1.26551, abs=1e-5)


def test_exact_gaussian_against_tensor_quadrature(rng):
    n = 5
    X = np.column_stack([np.ones(n), rng.uniform(-1, 1, n)])
    tau = rng.uniform(0.5, 3.0, n)
    y = X @ np.array([0.4, -0.7]) + rng.standard_normal(n) / np.sqrt(tau)
    sub = _sub("gaussian", y, X, 1.0, nuisance=tau)
    got = fit_gaussian_exact(sub).log_marginal_likelihood
    # dense 401 x 401 grid over +-10 prior sd on the coefficient plane
    g = np.linspace(-10, 10, 401)
    B0, B1 = np.meshgrid(g, g, indexing="ij")
    eta = B0[..., None] * X[:, 0] + B1[..., None] * X[:, 1]
    logf = (stats.norm.logpdf(y, eta, 1 / np.sqrt(tau)).sum(-1)
            + stats.norm.logpdf(B0) + stats.norm.logpdf(B1))
    top = logf.max()
    quad = np.log(trapezoid(trapezoid(np.exp(logf - top), g, axis=1), g)) + top
    assert abs(got - quad) < 1e-6
    assert got == pytest.approx(gaussian_log_evidence(y, X, np.zeros(2), np.ones(2), tau), abs=1e-9)


def test_unit_prior_scaling_is_bit_identical(rng):
    X = np.column_stack([np.ones(6), rng.standard_normal(6)])
    y = rng.standard_normal(6)
    a = _sub("gaussian", y, X, 0.3, nuisance=np.full(6, 2.0))
    b = _sub("gaussian", y, X, 0.3 * 1.0, nuisance=np.full(6, 2.0))
    b.prior_precision = b.prior_precision * 1.0
    assert fit_gaussian_exact(a).log_marginal_likelihood == fit_gaussian_exact(b).log_marginal_likelihood


def test_poisson_intercept_against_adaptive_quadrature():
    r = np.random.default_rng(7)
    y = r.poisson(5.0, 10).astype(float)
    sub = _sub("poisson", y, np.ones((10, 1)), 0.001)
    got = fit_laplace(sub).log_marginal_likelihood
    sd = 1 / np.sqrt(0.001)

    def logf(b):
        return log_joint("poisson", y, np.ones((10, 1)), np.array([b]), 0.0, 0.001)

    quad = adaptive_log_integral(logf, -12 * sd, 12 * sd, np.log(y.mean()))
    assert abs(got - quad) < 1e-2


def test_gaussian_through_laplace_is_exact(rng):
    X = np.column_stack([np.ones(8), rng.standard_normal(8)])
    y = rng.standard_normal(8)
    sub = _sub("gaussian", y, X, 0.5, nuisance=rng.uniform(0.5, 2, 8))
    assert fit_laplace(sub).log_marginal_likelihood == pytest.approx(
        fit_gaussian_exact(sub).log_marginal_likelihood, abs=1e-10)


def test_negbin_all_zero_counts_guarded_by_prior():
    sub = _sub("negbin", np.zeros(10), np.ones((10, 1)), 0.001, nuisance=np.full(10, 5.0))
    res = fit_laplace(sub)
    assert res.converged
    assert np.isfinite(res.log_marginal_likelihood)
    assert res.mean["b0"] < -1


def _random_instance(family, seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(6, 20))
    dim = int(r.integers(1, 3))
    X = np.ones((n, 1)) if dim == 1 else np.column_stack([np.ones(n), r.uniform(-1, 1, n)])
    beta = r.normal([1.5, 0.5][:dim], 0.3)
    nuis = None
    if family == "poisson":
        y = r.poisson(np.exp(X @ beta)).astype(float)
    elif family == "negbin":
        nuis = r.uniform(1.0, 20.0, n)
        mu = np.exp(X @ beta)
        y = r.negative_binomial(nuis, nuis / (nuis + mu)).astype(float)
    else:
        nuis = r.uniform(0.5, 4.0, n)
        y = X @ beta + r.standard_normal(n) / np.sqrt(nuis)
    prec = float(r.choice([0.01, 0.1, 1.0]))
    return y, X, nuis, prec


@pytest.mark.parametrize("family,tol", [("poisson", 1e-2), ("negbin", 1e-2), ("gaussian", 1e-6)])
@pytest.mark.parametrize("seed", range(12))
def test_marginal_likelihood_matches_quadrature(family, tol, seed):
    y, X, nuis, prec = _random_instance(family, 1000 + seed)
    sub = _sub(family, y, X, prec, nuisance=nuis)
    got = fit(sub).log_marginal_likelihood
    p = X.shape[1]

    def logf(b):
        return log_joint(family, y, X, b, np.zeros(p), np.full(p, prec), nuis)

    quad = tensor_log_integral(logf, p)
    assert abs(got - quad) < tol


def _random_effects_sub(family, seed, q=6):
    r = np.random.default_rng(seed)
    n = 4 * q
    idx = np.repeat(np.arange(q), 4)
    X = np.column_stack([np.ones(n), r.uniform(0, 1, n)])
    u = r.normal(0, 0.4, q)
    mu = np.exp(X @ [1.0, 0.5] + u[idx])
    nuis = None
    if family == "poisson":
        y = r.poisson(mu).astype(float)
    else:
        nuis = r.uniform(2, 10, n)
        y = r.negative_binomial(nuis, nuis / (nuis + mu)).astype(float)
    return _sub(family, y, X, 0.01, nuisance=nuis, re_index=idx, re_levels=q,
                re_precision=r.uniform(2, 10, q))


@pytest.mark.parametrize("family", ["poisson", "negbin"])
@pytest.mark.parametrize("point", range(10))
def test_gradient_matches_central_differences(family, point):
    sub = _random_effects_sub(family, 50 + point)
    r = np.random.default_rng(point)
    kappa = r.normal(0, 0.5, sub.latent_dim) + np.r_[1.0, 0.5, np.zeros(sub.re_levels)]
    g = penalized_gradient(sub, kappa)
    num = np.empty_like(g)
    for i in range(kappa.size):
        h = 1e-6 * max(1.0, abs(kappa[i]))
        e = np.zeros_like(kappa)
        e[i] = h
        num[i] = (penalized_objective(sub, kappa + e) - penalized_objective(sub, kappa - e)) / (2 * h)
    assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1.0)) < 1e-5


@pytest.mark.parametrize("family", ["poisson", "negbin"])
def test_newton_objective_non_decreasing(family):
    for seed in range(5):
        res = fit_laplace(_random_effects_sub(family, 200 + seed))
        trace = np.asarray(res.objective_trace)
        assert trace.size >= 2
        assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[1:]))
        assert res.converged


@pytest.mark.parametrize("family", ["poisson", "negbin", "gaussian"])
def test_marginals_normalize(family):
    y, X, nuis, prec = _random_instance(family, 9)
    res = fit(_sub(family, y, X, prec, nuisance=nuis))
    for grid in res.marginals.values():
        assert abs(grid.integral() - 1.0) < 0.01


def test_prior_only_hyperparameter_grid_equals_prior():
    shape, rate = 1.0, 0.00005
    sub = LatentGaussianSubproblem("gaussian", np.array([0.3, -0.2]), np.ones((2, 1)), ("b0",),
                                   nuisance=np.ones(2), hyper=Hyperparameter("tau", "random", shape, rate))
    res = fit_with_hyperparameter(sub)
    grid = res.marginals["log_tau"]
    t = grid.x
    prior = stats.gamma.pdf(np.exp(t), shape, scale=1 / rate) * np.exp(t)
    prior = prior / trapezoid(prior, t)
    assert np.max(np.abs(grid.density - prior)) < 1e-6


def test_noise_precision_matches_normal_gamma_posterior():
    r = np.random.default_rng(4)
    y = r.normal(2.0, 0.5, 12)
    a, b = 2.0, 0.5
    sub = LatentGaussianSubproblem("gaussian", y, np.ones((12, 1)), ("mu",), prior_mean=np.zeros(1),
                                   prior_precision=np.zeros(1), hyper=Hyperparameter("tau", "noise", a, b))
    grid = fit_with_hyperparameter(sub).marginals["log_tau"]
    ss = np.sum((y - y.mean()) ** 2)
    post_a, post_b = a + (y.size - 1) / 2, b + ss / 2
    t = grid.x
    exact = stats.gamma.pdf(np.exp(t), post_a, scale=1 / post_b) * np.exp(t)
    assert np.max(np.abs(grid.density - exact)) < 1e-4


def test_tau_u_mode_at_true_group_precisions_inside_reference_interval():
    data = simulate(SimulationRecipe("gaussian-groups", 5, seed=1, n_per_group=500))
    target = ConditionalTarget(derive_conditioning_plan(gaussian_groups_spec(data)))
    res = target.fit_one(np.array(data.provenance["log_tau"]))
    from dhglm.marginals import transform_marginal
    tau_u = transform_marginal(res.marginals["log_tau_u"], "exp")
    assert 0.3247 < tau_u.mode() < 4.7935


def test_two_submodel_total_is_sum(gaussian_data):
    target = ConditionalTarget(derive_conditioning_plan(gaussian_groups_spec(gaussian_data)))
    thetas = np.random.default_rng(0).normal(3.0, 1.0, (20, 5))
    table = target.evaluate(thetas)
    total = table.submodel_log_ml["observation"] + table.submodel_log_ml["dispersion"]
    assert np.array_equal(table.log_ml, total)


def test_fit_laplace_rejects_free_hyperparameter():
    sub = LatentGaussianSubproblem("poisson", np.ones(3), np.ones((3, 1)), ("b",), re_index=np.arange(3),
                                   hyper=Hyperparameter("tau"))
    with pytest.raises(ValueError):
        fit_laplace(sub)


def test_fit_exact_rejects_non_gaussian():
    with pytest.raises(ValueError):
        fit_gaussian_exact(_sub("poisson", np.ones(3), np.ones((3, 1))))


def test_singular_posterior_precision_raises():
    X = np.column_stack([np.ones(4), np.ones(4)])
    sub = _sub("gaussian", np.arange(4.0), X, 0.0, nuisance=np.ones(4))
    with pytest.raises(FitError):
        fit_gaussian_exact(sub)


def test_latent_dimension_counts_random_levels():
    sub = _random_effects_sub("poisson", 1, q=7)
    assert sub.latent_dim == 2 + 7
    assert np.all(sub.prior_precision_diagonal() > 0)
