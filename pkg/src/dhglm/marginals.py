"""Gridded univariate posterior marginals."""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

MIN_GRID_POINTS = 31

_MAPS = {
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "exp": (np.exp, np.exp),
    "log": (np.log, lambda x: 1.0 / x),
}


@dataclass(frozen=True)
class MarginalGrid:
    """Density values on strictly increasing abscissae.

    ``scale`` records the scale the parameter lives on (``"identity"`` or
    ``"log"`` for log-transformed positive parameters).
    """

    x: np.ndarray
    density: np.ndarray
    scale: str = "identity"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if x.ndim != 1 or x.shape != d.shape:
            raise ValueError("abscissae and density must be 1-D arrays of equal length")
        if x.size < MIN_GRID_POINTS:
            raise ValueError(f"marginal grid needs at least {MIN_GRID_POINTS} points, got {x.size}")
        if np.any(np.diff(x) <= 0):
            raise ValueError("abscissae must be strictly increasing")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("density values must be finite and nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "density", d)

    def integral(self):
        return float(trapezoid(self.density, self.x))

    def normalized(self):
        return MarginalGrid(self.x, self.density / self.integral(), self.scale)

    def mean(self):
        return float(trapezoid(self.x * self.density, self.x) / self.integral())

    def sd(self):
        m = self.mean()
        var = trapezoid((self.x - m) ** 2 * self.density, self.x) / self.integral()
        return float(np.sqrt(max(var, 0.0)))

    def mode(self):
        return float(self.x[np.argmax(self.density)])

    def cdf(self):
        c = cumulative_trapezoid(self.density, self.x, initial=0.0)
        return c / c[-1]

    def quantile(self, q):
        c = self.cdf()
        # plateaus in the cdf make interp ambiguous; keep the first crossing
        keep = np.concatenate([[True], np.diff(c) > 0])
        return np.interp(q, c[keep], self.x[keep])

    def interval(self, level=0.95):
        a = 0.5 * (1.0 - level)
        lo, hi = self.quantile([a, 1.0 - a])
        return float(lo), float(hi)

    def pdf(self, t):
        return np.interp(t, self.x, self.density, left=0.0, right=0.0)


def transform_marginal(grid, transform):
    """Change of variables for a gridded density.

    ``transform`` is ``"identity"``, ``"exp"``, ``"log"`` or a pair
    ``(f, df)`` of a strictly monotone map and its derivative.  The result is
    renormalised by the trapezoid rule on the transformed abscissae.
    """
    if isinstance(transform, str):
        if transform == "identity":
            return grid
        try:
            f, df = _MAPS[transform]
        except KeyError:
            raise ValueError(f"unknown transform {transform!r}") from None
    else:
        f, df = transform
    x = grid.x
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.asarray(f(x), dtype=float)
        slope = np.asarray(df(x), dtype=float)
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(slope)):
        raise ValueError("transform is not finite on the grid support")
    dy = np.diff(y)
    if np.all(dy > 0):
        order = slice(None)
    elif np.all(dy < 0):
        order = slice(None, None, -1)
    else:
        raise ValueError("transform is not strictly monotone on the grid")
    if np.any(slope == 0):
        raise ValueError("transform has zero derivative on the grid")
    dens = grid.density / np.abs(slope)
    y, dens = y[order], dens[order]
    total = trapezoid(dens, y)
    scale = {"exp": "identity", "log": "log"}.get(transform, grid.scale) if isinstance(transform, str) else "identity"
    return MarginalGrid(y, dens / total, scale)


@dataclass
class GridBatch:
    """Many uniform grids stored columnar: row ``i`` spans ``lo[i]..hi[i]``."""

    lo: np.ndarray
    hi: np.ndarray
    density: np.ndarray
    scale: str = "identity"

    @property
    def n_points(self):
        return self.density.shape[1]

    def row(self, i):
        x = np.linspace(self.lo[i], self.hi[i], self.n_points)
        return MarginalGrid(x, self.density[i], self.scale)

    def take(self, idx):
        return GridBatch(self.lo[idx], self.hi[idx], self.density[idx], self.scale)

    def interpolate(self, t, rows=None):
        """Evaluate every (or selected) row's density at common points ``t``.

        Returns an array of shape ``(len(rows), len(t))``; zero outside each
        row's support.
        """
        rows = np.arange(self.lo.size) if rows is None else np.asarray(rows)
        lo, hi, dens = self.lo[rows], self.hi[rows], self.density[rows]
        g = self.n_points
        step = (hi - lo) / (g - 1)
        pos = (t[None, :] - lo[:, None]) / step[:, None]
        inside = (pos >= 0) & (pos <= g - 1)
        j = np.clip(np.floor(pos).astype(int), 0, g - 2)
        frac = np.clip(pos - j, 0.0, 1.0)
        left = np.take_along_axis(dens, j, axis=1)
        right = np.take_along_axis(dens, j + 1, axis=1)
        return np.where(inside, left + frac * (right - left), 0.0)

    @staticmethod
    def concat(batches):
        return GridBatch(
            np.concatenate([b.lo for b in batches]),
            np.concatenate([b.hi for b in batches]),
            np.concatenate([b.density for b in batches]),
            batches[0].scale,
        )


def gaussian_grid_batch(mean, sd, n_points=61, width=6.0):
    """Uniform grids of Gaussian densities over ``mean +- width*sd``."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    lo = mean - width * sd
    hi = mean + width * sd
    z = np.linspace(-width, width, n_points)
    dens = np.exp(-0.5 * z**2)[None, :] / (sd[:, None] * np.sqrt(2.0 * np.pi))
    return GridBatch(lo, hi, dens)
