import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dhglm.fitter import marginal_grid
from dhglm.marginals import GridBatch, MarginalGrid, gaussian_grid_batch, transform_marginal


def _normal_grid(m=0.0, s=1.0, n=2001, width=8.0):
    x = np.linspace(m - width * s, m + width * s, n)
    return MarginalGrid(x, stats.norm.pdf(x, m, s)).normalized()


def test_exp_of_standard_normal_is_log_normal():
    g = transform_marginal(_normal_grid(), "exp")
    assert g.mode() == pytest.approx(np.exp(-1.0), abs=np.max(np.diff(g.x)[:1500]))
    t = np.linspace(0.05, 5, 50)
    assert np.allclose(g.pdf(t), stats.lognorm.pdf(t, 1.0), atol=2e-3)


def test_identity_transform_returns_input():
    g = _normal_grid()
    assert transform_marginal(g, "identity") is g


def test_exp_then_log_round_trip():
    g = _normal_grid(0.3, 0.7)
    back = transform_marginal(transform_marginal(g, "exp"), "log")
    assert np.max(np.abs(back.x - g.x)) < 1e-8
    assert np.max(np.abs(back.density - g.density)) < 1e-8


def test_non_monotone_transform_rejected():
    with pytest.raises(ValueError, match="monotone"):
        transform_marginal(_normal_grid(), (np.square, lambda x: 2 * x))


def test_grid_invariants_enforced():
    with pytest.raises(ValueError, match="at least"):
        MarginalGrid(np.linspace(0, 1, 10), np.ones(10))
    with pytest.raises(ValueError, match="increasing"):
        MarginalGrid(np.r_[np.linspace(0, 1, 40), 0.5], np.ones(41))
    with pytest.raises(ValueError, match="nonnegative"):
        MarginalGrid(np.linspace(0, 1, 40), -np.ones(40))


@given(m=st.floats(-50, 50), s=st.floats(1e-3, 1e3))
@settings(max_examples=50)
def test_gaussian_marginal_grid_normalizes(m, s):
    g = marginal_grid(m, s)
    assert abs(g.integral() - 1.0) < 0.01
    assert g.mean() == pytest.approx(m, abs=1e-3 * s + 1e-9)
    assert g.sd() == pytest.approx(s, rel=1e-2)


@given(m=st.floats(-3, 3), s=st.floats(0.05, 2))
@settings(max_examples=30)
def test_transformed_grid_normalizes(m, s):
    g = transform_marginal(_normal_grid(m, s, n=201, width=6), "exp")
    assert abs(g.integral() - 1.0) < 0.01


def test_interval_of_standard_normal():
    lo, hi = _normal_grid().interval()
    assert lo == pytest.approx(-1.959964, abs=2e-3)
    assert hi == pytest.approx(1.959964, abs=2e-3)


def test_grid_batch_interpolation_matches_rows():
    batch = gaussian_grid_batch(np.array([0.0, 2.0]), np.array([1.0, 0.5]))
    t = np.linspace(-1, 3, 9)
    vals = batch.interpolate(t)
    for i in range(2):
        assert np.allclose(vals[i], batch.row(i).pdf(t), atol=1e-12)
    both = GridBatch.concat([batch.take([0]), batch.take([1])])
    assert np.allclose(both.interpolate(t), vals)
