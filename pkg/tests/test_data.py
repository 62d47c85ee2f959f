from __future__ import annotations

import json

import numpy as np
import pytest

from breakiv.data import Dataset, ParamSet, Partition, load_csv, split, write_csv
from breakiv.errors import (DimensionMismatch, EmptyInput, MissingColumn, NonNumericCell,
                            SegmentTooShort, TooFewRows, ValidationError)


def _toy(T: int = 40, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((T, 2))
    x = z.sum(axis=1) + rng.standard_normal(T)
    y = 1.0 + 0.5 * x + rng.standard_normal(T)
    return Dataset.from_arrays(y, x, np.ones((T, 1)), z)


class TestDataset:
    def test_dimensions(self):
        d = _toy()
        assert (d.T, d.p1, d.p2, d.p, d.q) == (40, 1, 1, 2, 3)
        np.testing.assert_array_equal(d.W[:, 0], 1.0)
        np.testing.assert_array_equal(d.Z[:, :1], d.Z1)

    def test_arrays_are_read_only_and_caller_untouched(self):
        y = np.arange(10.0)
        X = y ** 2
        d = Dataset(y, X, np.ones((10, 1)), np.column_stack([np.ones(10), y]))
        assert not d.y.flags.writeable
        with pytest.raises(ValueError):
            d.y[0] = 5.0
        assert y.flags.writeable
        y[0] = -1.0
        assert d.y[0] == 0.0

    def test_order_condition(self):
        T = 30
        with pytest.raises(DimensionMismatch):
            Dataset.from_arrays(np.zeros(T), np.ones((T, 2)), np.ones((T, 1)), np.ones((T, 1)))

    def test_z_must_start_with_z1(self):
        T = 20
        with pytest.raises(DimensionMismatch):
            Dataset(np.zeros(T), np.ones(T), np.ones((T, 1)), np.zeros((T, 2)))

    def test_nonfinite_rejected(self):
        y = np.zeros(30)
        y[3] = np.nan
        with pytest.raises(ValidationError):
            Dataset.from_arrays(y, np.ones(30), np.ones((30, 1)), np.arange(30.0))

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            Dataset.from_arrays(np.zeros(5), np.ones(5), np.ones((5, 1)), np.arange(5.0))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            Dataset(np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 2)))

    def test_rows_view(self):
        d = _toy()
        sub = d.rows(10, 25)
        assert sub.T == 15
        np.testing.assert_array_equal(sub.y, d.y[10:25])
        with pytest.raises(SegmentTooShort):
            d.rows(5, 5)


class TestPartition:
    def test_bounds(self):
        assert Partition((10, 30)).bounds(50) == [(0, 10), (10, 30), (30, 50)]
        assert Partition().bounds(7) == [(0, 7)]

    def test_unsorted_rejected(self):
        with pytest.raises(ValidationError):
            Partition((30, 10))

    def test_trimming_enforced(self):
        Partition((60,), 0.15).validate(400, 2)
        with pytest.raises(SegmentTooShort):
            Partition((59,), 0.15).validate(400, 2)
        with pytest.raises(SegmentTooShort):
            Partition((341,), 0.15).validate(400, 2)

    def test_split(self):
        parts = split(_toy(), Partition((20,), 0.2))
        assert [p.T for p in parts] == [20, 20]


class TestParamSet:
    def test_regime_count_checked(self):
        with pytest.raises(ValidationError):
            ParamSet((np.zeros(2),), (np.zeros((3, 1)),), Partition((5,)))

    def test_to_dict(self):
        ps = ParamSet((np.array([1.0, 2.0]), np.array([3.0, 4.0])), (np.ones((3, 1)),),
                      Partition((20,)))
        d = ps.to_dict()
        assert d["theta_per_regime"] == [[1.0, 2.0], [3.0, 4.0]]
        assert d["break_indices"] == [20]


class TestCsv:
    def test_round_trip_is_exact(self, tmp_path):
        d = _toy(seed=3)
        path = tmp_path / "toy.csv"
        write_csv(d, path)
        back = load_csv(path)
        for a, b in ((d.y, back.y), (d.X, back.X), (d.Z, back.Z), (d.Z1, back.Z1)):
            np.testing.assert_array_equal(a, b)

    def test_header_prefixes_without_sidecar(self, tmp_path):
        path = tmp_path / "h.csv"
        rows = ["y,x1,z1_c,ziv_a,ziv_b"]
        rng = np.random.default_rng(1)
        for r in rng.standard_normal((12, 5)):
            rows.append(",".join(repr(float(v)) for v in r))
        path.write_text("\n".join(rows) + "\n")
        d = load_csv(path)
        assert (d.p1, d.p2, d.q) == (1, 1, 3)

    def test_add_intercept(self, tmp_path):
        path = tmp_path / "a.csv"
        rng = np.random.default_rng(2)
        body = rng.standard_normal((12, 3))
        path.write_text("y,x1,ziv_1\n" + "\n".join(",".join(map(str, r)) for r in body))
        d = load_csv(path, add_intercept=True)
        np.testing.assert_array_equal(d.Z1[:, 0], 1.0)
        assert d.names["z1"] == ["z1_const"]
        assert load_csv(path).p1 == 0

    def test_schema_mapping(self, tmp_path):
        path = tmp_path / "s.csv"
        rng = np.random.default_rng(4)
        body = rng.standard_normal((12, 3))
        path.write_text("infl,unemp,lag\n" + "\n".join(",".join(map(str, r)) for r in body))
        schema = tmp_path / "roles.json"
        schema.write_text(json.dumps({"y": "infl", "x": ["unemp"], "z1": [], "ziv": ["lag"]}))
        d = load_csv(path, schema)
        np.testing.assert_allclose(d.y, body[:, 0])

    def test_missing_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("y,x1\n1,2\n")
        with pytest.raises(MissingColumn):
            load_csv(path, {"y": "y", "x": ["x1"], "ziv": ["ziv_1"]})

    def test_non_numeric_cell_located(self, tmp_path):
        path = tmp_path / "n.csv"
        lines = ["y,x1,ziv_1,ziv_2"] + [f"{i},{i + 1},{i * 2},{i % 3}" for i in range(12)]
        lines[5] = "4,abc,8,1"
        path.write_text("\n".join(lines))
        with pytest.raises(NonNumericCell) as info:
            load_csv(path)
        assert info.value.row == 5 and info.value.col == "x1"

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        with pytest.raises(EmptyInput):
            load_csv(path)
