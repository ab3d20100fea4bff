"""Bayesian inference for double hierarchical GLMs by adaptive importance sampling."""
