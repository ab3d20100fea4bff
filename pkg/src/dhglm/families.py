"""Observation log-likelihoods and their first two derivatives in the linear predictor.

All functions are vectorised over arbitrary leading batch dimensions: ``eta``
and ``nuisance`` broadcast against ``y``.
"""

import numpy as np
from scipy.special import expit, gammaln

FAMILIES = ("gaussian", "poisson", "negbin")

LOG_2PI = float(np.log(2.0 * np.pi))


def check_family(tag):
    if tag not in FAMILIES:
        raise ValueError(f"unsupported likelihood family {tag!r}; expected one of {FAMILIES}")
    return tag


def variance_function(tag, mu, nuisance=None):
    """Variance of one observation with mean ``mu``.

    For the Gaussian family ``nuisance`` is the precision, for the negative
    binomial it is the size ``k``.
    """
    mu = np.asarray(mu, dtype=float)
    if tag == "gaussian":
        return np.broadcast_to(1.0 / np.asarray(nuisance, dtype=float), mu.shape).copy()
    if tag == "poisson":
        return mu.copy()
    if tag == "negbin":
        return mu + mu**2 / np.asarray(nuisance, dtype=float)
    raise ValueError(f"unsupported likelihood family {tag!r}")


def log_factorial(y):
    return gammaln(np.asarray(y, dtype=float) + 1.0)


def loglik_terms(tag, y, eta, nuisance=None, y_const=None):
    """Per-observation log-likelihood, score and negated curvature.

    Returns ``(ll, grad, w)`` where ``grad = d ll / d eta`` and
    ``w = -d^2 ll / d eta^2`` (always nonnegative for these families).
    ``y_const`` optionally carries precomputed ``log(y!)``.
    """
    if tag == "gaussian":
        tau = nuisance
        resid = y - eta
        ll = 0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * resid**2
        grad = tau * resid
        w = np.broadcast_to(tau, ll.shape)
        return ll, grad, w
    if y_const is None:
        y_const = log_factorial(y)
    if tag == "poisson":
        mu = np.exp(eta)
        ll = y * eta - mu - y_const
        return ll, y - mu, mu
    if tag == "negbin":
        k = nuisance
        log_k = np.log(k)
        log_k_mu = np.logaddexp(log_k, eta)
        ll = (gammaln(y + k) - gammaln(k) - y_const
              + k * (log_k - log_k_mu) + y * (eta - log_k_mu))
        s = expit(eta - log_k)  # mu / (k + mu)
        grad = y - (y + k) * s
        w = (y + k) * s * (1.0 - s)
        return ll, grad, w
    raise ValueError(f"unsupported likelihood family {tag!r}")


def loglik(tag, y, eta, nuisance=None, y_const=None):
    return loglik_terms(tag, y, eta, nuisance, y_const)[0]


def normal_logpdf_precision(x, mean, precision):
    """log N(x | mean, 1/precision); Gaussians are parameterised by precision."""
    return 0.5 * (np.log(precision) - LOG_2PI) - 0.5 * precision * (x - mean) ** 2


def gamma_logpdf(tau, shape, rate):
    """Gamma(shape, rate) log density at ``tau``."""
    tau = np.asarray(tau, dtype=float)
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(tau) - rate * tau


def gamma_logpdf_logscale(log_tau, shape, rate):
    """Density of ``log(tau)`` when ``tau ~ Gamma(shape, rate)`` (Jacobian included)."""
    log_tau = np.asarray(log_tau, dtype=float)
    return shape * np.log(rate) - gammaln(shape) + shape * log_tau - rate * np.exp(log_tau)
