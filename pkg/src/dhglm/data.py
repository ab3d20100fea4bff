"""Datasets: containers, CSV input/output and neighbourhood matrices."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

GROUP_PREFIX = "g_"


class DataError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    """Observed data for one analysis.

    ``columns`` are observation-level covariates, ``group_columns`` are
    covariates with one value per group (``groups`` holds dense 0-based
    group indices).  ``adjacency`` is an optional 0/1 neighbourhood matrix.
    """

    y: np.ndarray
    columns: dict = field(default_factory=dict)
    groups: np.ndarray | None = None
    group_columns: dict = field(default_factory=dict)
    adjacency: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n = self.y.size
        if n == 0:
            raise DataError("dataset has no observations")
        self.columns = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        for name, col in self.columns.items():
            if col.shape != (n,):
                raise DataError(f"column {name!r} has length {col.size}, expected {n}")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != (n,):
                raise DataError("group index must have one entry per observation")
            if not np.issubdtype(self.groups.dtype, np.integer):
                raise DataError("group index must be integer")
            self.groups = self.groups.astype(np.int64)
            k = self.groups.max() + 1
            if self.groups.min() < 0 or np.unique(self.groups).size != k:
                raise DataError("group indices must be dense 0-based integers")
        self.group_columns = {k: np.asarray(v, dtype=float) for k, v in self.group_columns.items()}
        if self.group_columns and self.groups is None:
            raise DataError("group-level columns need a group index")
        for name, col in self.group_columns.items():
            if col.shape != (self.n_groups,):
                raise DataError(f"group column {name!r} has length {col.size}, expected {self.n_groups}")

    @property
    def n(self):
        return self.y.size

    @property
    def n_groups(self):
        return 0 if self.groups is None else int(self.groups.max()) + 1

    def group_sizes(self):
        return np.bincount(self.groups, minlength=self.n_groups)

    def to_frame(self):
        frame = {"y": self.y}
        frame.update(self.columns)
        if self.groups is not None:
            frame["group"] = self.groups
            for name, col in self.group_columns.items():
                frame[GROUP_PREFIX + name] = col[self.groups]
        return pd.DataFrame(frame)


def dense_group_index(labels):
    """Map arbitrary labels to dense 0-based indices in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return remap[inverse].astype(np.int64), labels[np.sort(first)]


def write_dataset(dataset, directory):
    """Write ``dataset.csv`` (and ``adjacency.csv`` when present) into ``directory``.

    Header: ``y``, observation columns, then ``group`` and group-level
    columns prefixed with ``g_`` broadcast to observation rows.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(directory / "dataset.csv", index=False, float_format="%.17g")
    if dataset.adjacency is not None:
        np.savetxt(directory / "adjacency.csv", dataset.adjacency, delimiter=",", fmt="%.17g")
    return directory / "dataset.csv"


def read_dataset(path, adjacency=None):
    """Inverse of :func:`write_dataset`."""
    frame = _read_frame(path)
    if "y" not in frame:
        raise DataError(f"{path}: missing column 'y'")
    groups = None
    group_columns = {}
    if "group" in frame:
        groups = frame["group"].to_numpy()
        if np.any(groups != np.round(groups)):
            raise DataError(f"{path}: group column must hold integers")
        groups = groups.astype(np.int64)
        for name in frame.columns:
            if name.startswith(GROUP_PREFIX):
                vals = frame[name].to_numpy()
                per_group = np.zeros(groups.max() + 1)
                per_group[groups] = vals
                if not np.allclose(per_group[groups], vals):
                    raise DataError(f"{path}: group column {name!r} varies within a group")
                group_columns[name[len(GROUP_PREFIX):]] = per_group
    columns = {c: frame[c].to_numpy() for c in frame.columns
               if c not in ("y", "group") and not c.startswith(GROUP_PREFIX)}
    adj = None
    if adjacency is not None and Path(adjacency).exists():
        adj = np.loadtxt(adjacency, delimiter=",", ndmin=2)
    return Dataset(frame["y"].to_numpy(), columns, groups, group_columns, adj,
                   provenance={"source": str(path)})


def _read_frame(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    if frame.empty:
        raise DataError(f"{path}: file has a header but no data rows")
    return frame


def ingest_csv(path, schema):
    """Read an external table into a :class:`Dataset`.

    ``schema`` maps roles to CSV headers: ``response`` (required),
    ``group`` (optional), ``columns`` (dict of dataset name -> header) and
    ``rescale`` (factor applied to the response, recorded in provenance).
    """
    frame = _read_frame(path)
    response = schema["response"]
    wanted = [response, *schema.get("columns", {}).values()]
    if schema.get("group"):
        wanted.append(schema["group"])
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")

    def numeric(header):
        vals = pd.to_numeric(frame[header], errors="coerce")
        if vals.isna().any():
            row = int(np.flatnonzero(vals.isna().to_numpy())[0])
            raise DataError(f"{path}: non-numeric value in column {header!r} (data row {row + 1})")
        return vals.to_numpy(dtype=float)

    rescale = float(schema.get("rescale", 1.0))
    y = numeric(response) * rescale
    columns = {name: numeric(header) for name, header in schema.get("columns", {}).items()}
    groups = None
    provenance = {"source": str(path), "rescale": rescale}
    if schema.get("group"):
        groups, labels = dense_group_index(frame[schema["group"]].astype(str).to_numpy())
        provenance["group_labels"] = [str(v) for v in labels]
    return Dataset(y, columns, groups, provenance=provenance)


def row_standardize(adjacency):
    """Row-standardise a 0/1 neighbourhood matrix.

    Raises for non-square input, negative entries, self-neighbours or
    regions without neighbours.
    """
    w = np.asarray(adjacency, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DataError("neighbourhood matrix must be square")
    if np.any(w < 0):
        raise DataError("neighbourhood matrix must be nonnegative")
    if np.any(np.diag(w) != 0):
        raise DataError("neighbourhood matrix must have a zero diagonal")
    rs = w.sum(axis=1)
    if np.any(rs == 0):
        islands = np.flatnonzero(rs == 0).tolist()
        raise DataError(f"regions without neighbours: {islands}")
    return w / rs[:, None]


def spatial_lag(w, values):
    """Neighbourhood average ``W @ values`` for a row-standardised ``w``."""
    w = np.asarray(w, dtype=float)
    values = np.asarray(values, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DataError("neighbourhood matrix must be square")
    if np.any(np.diag(w) != 0):
        raise DataError("neighbourhood matrix must have a zero diagonal")
    rs = w.sum(axis=1)
    if np.any(rs == 0):
        raise DataError(f"regions without neighbours: {np.flatnonzero(rs == 0).tolist()}")
    if np.any(w < 0) or np.any(np.abs(rs - 1.0) > 1e-12):
        raise DataError("neighbourhood matrix must be row-standardised")
    if values.shape != (w.shape[0],):
        raise DataError("values must have one entry per region")
    return w @ values


def lattice_adjacency(n_rows, n_cols, queen=True):
    """0/1 adjacency for a regular lattice; ``queen`` counts shared corners."""
    n = n_rows * n_cols
    adj = np.zeros((n, n))
    for r in range(n_rows):
        for c in range(n_cols):
            i = r * n_cols + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if (dr, dc) == (0, 0) or (not queen and dr and dc):
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < n_rows and 0 <= cc < n_cols:
                        adj[i, rr * n_cols + cc] = 1.0
    return adj
