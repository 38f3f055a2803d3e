import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkfit.data import (
    DataParseError, LinkedDataset, Schema, SchemaError, block_partition, ingest_csv, write_csv,
)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ingest_with_intercept(tmp_path):
    p = _write(tmp_path, "y,x\n1.0,2\n2.5,3\n0,4\n")
    ds = ingest_csv(p, {"outcome": "y", "covariates": ["x"], "intercept": True}, "gaussian")
    assert (ds.n, ds.p) == (3, 2)
    assert ds.x_names == ("(Intercept)", "x")
    np.testing.assert_array_equal(ds.x[:, 0], 1.0)
    np.testing.assert_array_equal(ds.y, [1.0, 2.5, 0.0])


def test_ingest_cox_sets_events(tmp_path):
    p = _write(tmp_path, "t,d,x\n1.5,1,0\n2.0,0,1\n3.1,1,2\n")
    ds = ingest_csv(p, Schema(outcome="t", covariates=("x",), event="d"), "cox")
    np.testing.assert_array_equal(ds.event, [1, 0, 1])
    assert ds.record(1).event == 0


def test_parse_error_cites_row(tmp_path):
    rows = "".join(f"{i},{i}\n" for i in range(6)) + "7,abc\n"
    p = _write(tmp_path, "y,x\n" + rows)
    with pytest.raises(DataParseError) as exc:
        ingest_csv(p, {"outcome": "y", "covariates": ["x"]}, "gaussian")
    assert exc.value.row == 7
    assert "row 7" in str(exc.value)


def test_missing_column(tmp_path):
    p = _write(tmp_path, "y,x\n1,2\n")
    with pytest.raises(SchemaError):
        ingest_csv(p, {"outcome": "y", "covariates": ["w"]}, "gaussian")


def test_cox_without_event_column(tmp_path):
    p = _write(tmp_path, "t,x\n1,2\n")
    with pytest.raises(SchemaError):
        ingest_csv(p, {"outcome": "t", "covariates": ["x"]}, "cox")


def test_contingency_levels(tmp_path):
    p = _write(tmp_path, "a,b\nlo,no\nhi,yes\nlo,yes\n")
    ds = ingest_csv(p, {"outcome": "b", "covariates": ["a"]}, "contingency")
    assert ds.n_categories == (2, 2)
    np.testing.assert_array_equal(ds.x, [2, 1, 2])  # levels sorted: hi=1, lo=2
    np.testing.assert_array_equal(ds.y, [1, 2, 2])


def test_payload_validation():
    with pytest.raises(SchemaError):
        LinkedDataset(np.ones((2, 1)), [0.0, -1.0], "cox", event=[1, 1])
    with pytest.raises(SchemaError):
        LinkedDataset(np.ones((2, 1)), [0.0, 2.0], "logistic")
    with pytest.raises(SchemaError):
        LinkedDataset(np.ones((2, 1)), [0.5, 2.0], "poisson")
    with pytest.raises(SchemaError):
        LinkedDataset([1, 3], [1, 1], "contingency", n_categories=(2, 2))


def test_arrays_are_read_only():
    ds = LinkedDataset(np.ones((3, 1)), [1.0, 2.0, 3.0], "gaussian")
    with pytest.raises(ValueError):
        ds.y[0] = 5.0


def test_block_partition():
    ds = LinkedDataset(np.ones((8, 1)), np.arange(8.0), "gaussian", block=[0, 0, 1, 1, 2, 2, 3, 3])
    parts = block_partition(ds)
    assert [len(s) for s in parts] == [2, 2, 2, 2]
    ds = LinkedDataset(np.ones((5, 1)), np.arange(5.0), "gaussian", block=[0] * 5)
    assert [len(s) for s in block_partition(ds)] == [5]
    with pytest.raises(SchemaError):
        LinkedDataset(np.ones((2, 1)), [1.0, 2.0], "gaussian", block=[0, 2])


def test_subset_relabels_blocks():
    ds = LinkedDataset(np.ones((4, 1)), np.arange(4.0), "gaussian", block=[0, 1, 2, 2])
    sub = ds.subset([2, 3, 1])
    np.testing.assert_array_equal(sub.block, [1, 1, 0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20),
       st.lists(st.integers(0, 3), min_size=1, max_size=20))
def test_csv_round_trip(tmp_path_factory, ys, blocks):
    n = min(len(ys), len(blocks))
    ys = np.array(ys[:n])
    b = np.array(blocks[:n])
    _, b = np.unique(b, return_inverse=True)
    x = np.linspace(0, 1, n)
    ds = LinkedDataset(np.column_stack([np.ones(n), x]), ys, "gaussian", block=b,
                       x_names=("(Intercept)", "x"), y_names=("y",))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    back = ingest_csv(path, {"outcome": "y", "covariates": ["x"], "block": "block",
                             "intercept": True}, "gaussian")
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.block, ds.block)
