"""Datasets, sample partitions and parameter containers.

Break indices are 1-based "last index of the earlier regime": a break at
``k`` splits rows ``1..k`` from ``k+1..T`` (0-based slices ``[:k]`` and
``[k:]``).
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    MissingColumn,
    NonNumericCell,
    SegmentTooShort,
    TooFewRows,
    ValidationError,
)

ROLES = ("y", "x", "z1", "ziv")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Observed series of a linear IV model with a possibly shifting structural equation.

    Parameters
    ----------
    y : ndarray, shape (T,)
        Outcome.
    X : ndarray, shape (T, p2)
        Endogenous regressors.
    Z1 : ndarray, shape (T, p1)
        Exogenous regressors (an intercept, if wanted, is an explicit column).
    Z : ndarray, shape (T, q)
        Instruments; the first ``p1`` columns must equal ``Z1``.
    names : dict, optional
        Column names per role, carried for reporting and CSV output.
    """

    y: np.ndarray
    X: np.ndarray
    Z1: np.ndarray
    Z: np.ndarray
    names: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        T = y.shape[0]
        if T == 0:
            raise EmptyInput("dataset has no rows")
        X = np.asarray(self.X, dtype=float).reshape(T, -1)
        Z1 = np.asarray(self.Z1, dtype=float).reshape(T, -1)
        Z = np.asarray(self.Z, dtype=float).reshape(T, -1)
        p1, p2, q = Z1.shape[1], X.shape[1], Z.shape[1]
        if p2 < 1:
            raise DimensionMismatch("at least one endogenous regressor is required")
        if q < p1 + p2:
            raise DimensionMismatch(f"order condition fails: q={q} < p1+p2={p1 + p2}")
        if not np.array_equal(Z[:, :p1], Z1):
            raise DimensionMismatch("the first p1 columns of Z must equal Z1")
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "Z1", _frozen(Z1))
        object.__setattr__(self, "Z", _frozen(Z))

    @classmethod
    def from_arrays(cls, y, X, Z1, Ziv, names: dict | None = None) -> Dataset:
        """Build ``Z = [Z1 | Ziv]`` and check there are enough rows to split."""
        y = np.asarray(y, dtype=float).reshape(-1)
        T = y.shape[0]
        Z1 = np.asarray(Z1, dtype=float).reshape(T, -1)
        Ziv = np.asarray(Ziv, dtype=float).reshape(T, -1)
        ds = cls(y, X, Z1, np.hstack([Z1, Ziv]), names=dict(names or {}))
        ds.check_length()
        return ds

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def p1(self) -> int:
        return self.Z1.shape[1]

    @property
    def p2(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def W(self) -> np.ndarray:
        """Structural regressors ``[Z1, X]``."""
        return np.hstack([self.Z1, self.X])

    def check_length(self) -> None:
        need = 2 * max(self.p, self.q) + 2
        if self.T < need:
            raise TooFewRows(f"T={self.T} rows but at least {need} are needed")

    def rows(self, start: int, stop: int) -> Dataset:
        """Contiguous view of 0-based rows ``start:stop``."""
        if not 0 <= start < stop <= self.T:
            raise SegmentTooShort(f"empty or invalid row range [{start}, {stop})")
        return Dataset(self.y[start:stop], self.X[start:stop], self.Z1[start:stop],
                       self.Z[start:stop], names=self.names)

    def with_instruments(self, Z: np.ndarray) -> Dataset:
        return Dataset(self.y, self.X, self.Z1, Z, names=self.names)


@dataclass(frozen=True)
class Partition:
    """Sorted break indices and the trimming fraction that constrains them."""

    break_indices: tuple[int, ...] = ()
    trimming: float = 0.15

    def __post_init__(self) -> None:
        b = tuple(int(k) for k in self.break_indices)
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValidationError(f"break indices must be strictly increasing: {b}")
        if not 0 < self.trimming < 0.5:
            raise ValidationError(f"trimming must lie in (0, 0.5), got {self.trimming}")
        object.__setattr__(self, "break_indices", b)

    @property
    def n_regimes(self) -> int:
        return len(self.break_indices) + 1

    def bounds(self, T: int) -> list[tuple[int, int]]:
        """0-based ``(start, stop)`` pairs of the regimes."""
        edges = [0, *self.break_indices, T]
        return list(zip(edges[:-1], edges[1:]))

    def validate(self, T: int, p: int) -> None:
        min_len = max(p, math.ceil(self.trimming * T - 1e-9))
        for k in self.break_indices:
            if not 0 < k < T:
                raise SegmentTooShort(f"break {k} outside (0, {T})")
        for start, stop in self.bounds(T):
            if stop - start < min_len:
                raise SegmentTooShort(
                    f"segment [{start + 1}, {stop}] has {stop - start} rows; need {min_len}")


@dataclass(frozen=True)
class ParamSet:
    """Structural coefficients per regime and first-stage coefficients per segment.

    ``theta_per_regime[i]`` is ordered ``(theta_z, theta_x)``;
    ``pi_per_segment[j]`` is ``q x p2``.
    """

    theta_per_regime: tuple[np.ndarray, ...]
    pi_per_segment: tuple[np.ndarray, ...]
    regime_boundaries: Partition = field(default_factory=Partition)

    def __post_init__(self) -> None:
        th = tuple(_frozen(t).reshape(-1) for t in self.theta_per_regime)
        pi = tuple(_frozen(np.atleast_2d(m)) for m in self.pi_per_segment)
        if len(th) != self.regime_boundaries.n_regimes:
            raise ValidationError(
                f"{len(th)} theta vectors for {self.regime_boundaries.n_regimes} regimes")
        object.__setattr__(self, "theta_per_regime", th)
        object.__setattr__(self, "pi_per_segment", pi)

    def to_dict(self) -> dict:
        return {
            "theta_per_regime": [t.tolist() for t in self.theta_per_regime],
            "pi_per_segment": [m.tolist() for m in self.pi_per_segment],
            "break_indices": list(self.regime_boundaries.break_indices),
        }


def split(data: Dataset, part: Partition) -> list[Dataset]:
    """Row-range views of ``data`` for each regime of ``part``."""
    part.validate(data.T, data.p)
    return [data.rows(a, b) for a, b in part.bounds(data.T)]


def _roles_from_header(header: Sequence[str]) -> dict:
    schema: dict = {"y": None, "x": [], "z1": [], "ziv": []}
    for col in header:
        if col == "y":
            schema["y"] = col
        elif col.startswith("ziv_"):
            schema["ziv"].append(col)
        elif col.startswith("z1_"):
            schema["z1"].append(col)
        elif col.startswith("x") and col[1:].isdigit():
            schema["x"].append(col)
    return schema


def _load_schema(schema, path: Path, header: Sequence[str]) -> dict:
    if schema is None:
        sidecar = path.with_name(path.stem + ".schema.json")
        if sidecar.exists():
            schema = sidecar
    if isinstance(schema, (str, os.PathLike)):
        schema = json.loads(Path(schema).read_text(encoding="utf-8"))
    if schema is None:
        schema = _roles_from_header(header)
    out = {"y": schema.get("y"), "x": list(schema.get("x", [])),
           "z1": list(schema.get("z1", [])), "ziv": list(schema.get("ziv", []))}
    if isinstance(out["y"], list):
        if len(out["y"]) != 1:
            raise ValidationError("exactly one outcome column is required")
        out["y"] = out["y"][0]
    return out


def load_csv(path, schema: Mapping | str | os.PathLike | None = None,
             add_intercept: bool = False) -> Dataset:
    """Read a comma-separated file with one header row into a :class:`Dataset`.

    Column roles come from ``schema`` (a mapping or a JSON file with keys
    ``y``, ``x``, ``z1``, ``ziv``), else from a ``<stem>.schema.json``
    sidecar, else from header prefixes (``y``, ``x1..``, ``z1_..``,
    ``ziv_..``). ``add_intercept`` prepends a column of ones to ``Z1``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"{path} is empty") from None
        body = [row for row in reader if row and any(c.strip() for c in row)]
    roles = _load_schema(schema, path, header)
    if roles["y"] is None:
        raise MissingColumn("no outcome column (role 'y')")
    if not roles["x"]:
        raise MissingColumn("no endogenous regressor columns (role 'x')")
    wanted = [roles["y"], *roles["x"], *roles["z1"], *roles["ziv"]]
    if len(set(wanted)) != len(wanted):
        raise ValidationError("a column is mapped to more than one role")
    index = {h: i for i, h in enumerate(header)}
    for col in wanted:
        if col not in index:
            raise MissingColumn(f"column {col!r} not found in {path.name}")

    def column(col: str) -> np.ndarray:
        j = index[col]
        vals = np.empty(len(body))
        for r, row in enumerate(body):
            cell = row[j].strip() if j < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCell(r + 1, col, cell) from None
            if not math.isfinite(v):
                raise NonNumericCell(r + 1, col, cell)
            vals[r] = v
        return vals

    T = len(body)
    if T == 0:
        raise TooFewRows(f"{path.name} has no data rows")

    def block(cols: list[str]) -> np.ndarray:
        return np.column_stack([column(c) for c in cols]) if cols else np.empty((T, 0))

    y = column(roles["y"])
    X, Z1, Ziv = block(roles["x"]), block(roles["z1"]), block(roles["ziv"])
    z1_names = list(roles["z1"])
    if add_intercept:
        Z1 = np.hstack([np.ones((T, 1)), Z1])
        z1_names = ["z1_const", *z1_names]
    p, q = Z1.shape[1] + X.shape[1], Z1.shape[1] + Ziv.shape[1]
    if q < p:
        raise DimensionMismatch(f"order condition fails: q={q} < p1+p2={p}")
    names = {"y": roles["y"], "x": list(roles["x"]), "z1": z1_names, "ziv": list(roles["ziv"])}
    return Dataset.from_arrays(y, X, Z1, Ziv, names=names)


def default_names(data: Dataset) -> dict:
    n = data.names
    return {
        "y": n.get("y", "y"),
        "x": n.get("x") or [f"x{j + 1}" for j in range(data.p2)],
        "z1": n.get("z1") or [f"z1_{j + 1}" for j in range(data.p1)],
        "ziv": n.get("ziv") or [f"ziv_{j + 1}" for j in range(data.q - data.p1)],
    }


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` plus a ``<stem>.schema.json`` sidecar.

    Floats use the shortest round-trip representation, so reading the file
    back reproduces every value exactly.
    """
    path = Path(path)
    names = default_names(data)
    header = [names["y"], *names["x"], *names["z1"], *names["ziv"]]
    body = np.hstack([data.y[:, None], data.X, data.Z1, data.Z[:, data.p1:]])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in body:
            w.writerow([repr(float(v)) for v in row])
    sidecar = path.with_name(path.stem + ".schema.json")
    sidecar.write_text(json.dumps(names, indent=2), encoding="utf-8")
