import numpy as np
import pytest

from dhglm.data import (DataError, Dataset, dense_group_index, ingest_csv, lattice_adjacency, read_dataset,
                        row_standardize, spatial_lag, write_dataset)
from dhglm.presets import sleep_data

SCHEMA = {"response": "Reaction", "group": "Subject", "columns": {"days": "Days"}}


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_bundled_sleep_table_layout():
    d = sleep_data()
    assert d.n_groups == 18
    assert np.array_equal(d.group_sizes(), np.full(18, 10))
    assert d.provenance["rescale"] == 1e-3
    assert np.all((d.y > 0.1) & (d.y < 0.6))
    assert sorted(np.unique(d.columns["days"])) == list(range(10))


def test_single_row_file(tmp_path):
    d = ingest_csv(_write(tmp_path, "Reaction,Days,Subject\n250.5,0,308\n"), SCHEMA)
    assert d.n == 1 and d.n_groups == 1
    assert d.y[0] == 250.5


def test_header_only_file(tmp_path):
    with pytest.raises(DataError, match="no data rows"):
        ingest_csv(_write(tmp_path, "Reaction,Days,Subject\n"), SCHEMA)


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="empty"):
        ingest_csv(_write(tmp_path, ""), SCHEMA)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        ingest_csv(tmp_path / "absent.csv", SCHEMA)


def test_missing_columns(tmp_path):
    with pytest.raises(DataError, match="missing columns"):
        ingest_csv(_write(tmp_path, "Reaction,Subject\n1,2\n"), SCHEMA)


def test_non_numeric_cell(tmp_path):
    with pytest.raises(DataError, match="non-numeric value in column 'Days' \\(data row 2\\)"):
        ingest_csv(_write(tmp_path, "Reaction,Days,Subject\n1,0,a\n2,x,a\n"), SCHEMA)


def test_rescale_applied_and_recorded(tmp_path):
    d = ingest_csv(_write(tmp_path, "Reaction,Days,Subject\n200,0,a\n300,1,a\n"), {**SCHEMA, "rescale": 0.5})
    assert np.array_equal(d.y, [100, 150])
    assert d.provenance["rescale"] == 0.5


def test_dense_group_index_keeps_first_appearance_order():
    idx, labels = dense_group_index(["b", "a", "b", "c", "a"])
    assert idx.tolist() == [0, 1, 0, 2, 1]
    assert labels.tolist() == ["b", "a", "c"]


def test_dataset_invariants():
    with pytest.raises(DataError, match="no observations"):
        Dataset(np.zeros(0))
    with pytest.raises(DataError, match="length"):
        Dataset(np.zeros(3), {"x": np.zeros(2)})
    with pytest.raises(DataError, match="dense"):
        Dataset(np.zeros(3), groups=np.array([0, 2, 2]))
    with pytest.raises(DataError, match="group index"):
        Dataset(np.zeros(3), group_columns={"z": np.zeros(1)})


def test_write_read_round_trip(tmp_path):
    adj = lattice_adjacency(2, 3)
    d = Dataset(np.array([1.5, 2.0, 0.1, 3.3, 4.4, 5.5]), {"x": np.linspace(0, 1, 6)},
                np.array([0, 0, 1, 1, 2, 2]), {"z": np.array([0.1, -0.2, 1 / 3])}, adj)
    path = write_dataset(d, tmp_path / "out")
    assert path.read_text().splitlines()[0] == "y,x,group,g_z"
    back = read_dataset(path, tmp_path / "out" / "adjacency.csv")
    assert np.array_equal(back.y, d.y)
    assert np.array_equal(back.columns["x"], d.columns["x"])
    assert np.array_equal(back.groups, d.groups)
    assert np.array_equal(back.group_columns["z"], d.group_columns["z"])
    assert np.array_equal(back.adjacency, adj)


def test_queen_lattice_neighbour_counts():
    adj = lattice_adjacency(3, 3)
    assert adj.sum(axis=1).tolist() == [3, 5, 3, 5, 8, 5, 3, 5, 3]
    assert np.array_equal(adj, adj.T)
    rook = lattice_adjacency(3, 3, queen=False)
    assert rook[4].sum() == 4


def test_row_standardize_and_lag():
    w = row_standardize(lattice_adjacency(2, 2))
    assert np.allclose(w.sum(axis=1), 1)
    assert np.allclose(spatial_lag(w, np.array([1.0, 2.0, 3.0, 4.0])), [3, 8 / 3, 7 / 3, 2])


def test_neighbourhood_errors():
    with pytest.raises(DataError, match="without neighbours"):
        row_standardize(np.zeros((2, 2)))
    with pytest.raises(DataError, match="diagonal"):
        row_standardize(np.eye(2))
    with pytest.raises(DataError, match="square"):
        row_standardize(np.zeros((2, 3)))
    with pytest.raises(DataError, match="row-standardised"):
        spatial_lag(lattice_adjacency(2, 2), np.ones(4))
