"""Linked-file containers and CSV ingestion.

A :class:`LinkedDataset` holds the already-linked pairs ``(x_i, y_i, z_i)``
plus optional censoring indicators, block ids and a known-match mask. Arrays
are stored column-wise and frozen after construction so that datasets can be
shared between concurrent fits.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

FAMILIES = ("gaussian", "poisson", "logistic", "gamma", "cox", "mvnormal", "contingency")
REGRESSION_FAMILIES = ("gaussian", "poisson", "logistic", "gamma", "cox")


class SchemaError(ValueError):
    """Column mapping does not fit the file or the family."""


class DataParseError(ValueError):
    """A cell could not be parsed; ``row`` is the 1-based data row."""

    def __init__(self, msg, row=None, column=None):
        super().__init__(msg)
        self.row = row
        self.column = column


class LinkedRecord(NamedTuple):
    x: np.ndarray | int
    y: float | int | np.ndarray
    z: np.ndarray
    event: int | None = None
    block: int | None = None


@dataclass(frozen=True)
class Schema:
    """Maps CSV columns onto the roles of a linked file.

    ``outcome`` may be a list of columns for the multivariate-normal family.
    Columns listed in ``categorical`` are encoded as 1-based level indices.
    """

    outcome: str | Sequence[str]
    covariates: Sequence[str] = ()
    match_covariates: Sequence[str] = ()
    event: str | None = None
    block: str | None = None
    known_match: str | None = None
    intercept: bool = False
    categorical: Sequence[str] = ()

    @classmethod
    def from_dict(cls, d):
        keys = {"outcome", "covariates", "match_covariates", "event", "block",
                "known_match", "intercept", "categorical"}
        unknown = set(d) - keys
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "outcome" not in d:
            raise SchemaError("schema needs an 'outcome' column")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def outcome_columns(self):
        return [self.outcome] if isinstance(self.outcome, str) else list(self.outcome)

    def to_dict(self):
        return {
            "outcome": self.outcome if isinstance(self.outcome, str) else list(self.outcome),
            "covariates": list(self.covariates),
            "match_covariates": list(self.match_covariates),
            "event": self.event,
            "block": self.block,
            "known_match": self.known_match,
            "intercept": self.intercept,
            "categorical": list(self.categorical),
        }


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LinkedDataset:
    """An imperfectly linked file, one row per linked pair.

    Parameters
    ----------
    x : array_like
        Covariates, shape (n, p). For ``contingency`` a vector of 1-based row
        categories.
    y : array_like
        Outcomes, shape (n,), or (n, k) for ``mvnormal``. For ``contingency``
        a vector of 1-based column categories.
    family : str
        One of :data:`FAMILIES`.
    z : array_like, optional
        Match covariates, shape (n, q). May have zero columns.
    event : array_like, optional
        Event indicators for ``cox`` (1 = observed, 0 = right-censored).
    block : array_like, optional
        Block ids forming a contiguous range starting at 0.
    known_match : array_like of bool, optional
        Records known to be correctly linked.
    """

    x: np.ndarray
    y: np.ndarray
    family: str
    z: np.ndarray | None = None
    event: np.ndarray | None = None
    block: np.ndarray | None = None
    known_match: np.ndarray | None = None
    x_names: tuple = ()
    y_names: tuple = ()
    z_names: tuple = ()
    levels: dict = field(default_factory=dict)
    n_categories: tuple | None = None

    def __post_init__(self):
        fam = self.family
        if fam not in FAMILIES:
            raise SchemaError(f"unknown family {fam!r}; expected one of {FAMILIES}")
        set_ = object.__setattr__
        if fam == "contingency":
            x = _frozen(self.x, dtype=np.int64).reshape(-1)
            y = _frozen(self.y, dtype=np.int64).reshape(-1)
        else:
            x = np.array(self.x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            x = _frozen(x)
            y = np.array(self.y, dtype=float)
            if fam == "mvnormal" and y.ndim == 1:
                y = y[:, None]
            y = _frozen(y)
        n = x.shape[0]
        if n < 1:
            raise SchemaError("dataset must contain at least one record")
        if y.shape[0] != n:
            raise SchemaError(f"x has {n} rows but y has {y.shape[0]}")
        z = np.zeros((n, 0)) if self.z is None else np.array(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise SchemaError(f"z has {z.shape[0]} rows, expected {n}")
        set_(self, "x", x)
        set_(self, "y", y)
        set_(self, "z", _frozen(z))
        if self.event is not None:
            ev = np.asarray(self.event)
            if ev.shape != (n,) or not np.all(np.isin(ev, (0, 1))):
                raise SchemaError("event indicators must be 0/1, one per record")
            set_(self, "event", _frozen(ev, dtype=np.int64))
        if self.block is not None:
            b = np.asarray(self.block)
            if b.shape != (n,) or np.any(b < 0) or np.any(b != np.round(b)):
                raise SchemaError("block ids must be nonnegative integers, one per record")
            b = _frozen(b, dtype=np.int64)
            present = np.unique(b)
            if not np.array_equal(present, np.arange(present.size)):
                raise SchemaError(f"block ids must be contiguous from 0, got {present.tolist()}")
            set_(self, "block", b)
        if self.known_match is not None:
            km = np.asarray(self.known_match, dtype=bool)
            if km.shape != (n,):
                raise SchemaError("known_match mask must have one entry per record")
            set_(self, "known_match", _frozen(km, dtype=bool))
        if not self.x_names:
            set_(self, "x_names", tuple(f"x{j}" for j in range(self.p)))
        if not self.z_names:
            set_(self, "z_names", tuple(f"z{j}" for j in range(self.q)))
        self._check_payload()

    def _check_payload(self):
        fam, y = self.family, self.y
        if fam in ("gaussian", "poisson", "logistic", "gamma", "cox", "mvnormal"):
            if not np.all(np.isfinite(y)) or not np.all(np.isfinite(self.x)):
                raise SchemaError("x and y must be finite")
        if fam == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise SchemaError("poisson outcomes must be nonnegative integers")
        if fam == "logistic" and not np.all(np.isin(y, (0.0, 1.0))):
            raise SchemaError("logistic outcomes must be 0/1")
        if fam == "gamma" and np.any(y <= 0):
            raise SchemaError("gamma outcomes must be positive")
        if fam == "cox":
            if np.any(y <= 0):
                raise SchemaError("survival times must be strictly positive")
            if self.event is None:
                raise SchemaError("cox family requires event indicators")
        if fam == "contingency":
            K, L = self.n_categories or (int(self.x.max()), int(self.y.max()))
            if self.x.min() < 1 or self.x.max() > K or self.y.min() < 1 or self.y.max() > L:
                raise SchemaError(f"category indices must lie in 1..{K} (rows) and 1..{L} (columns)")
            object.__setattr__(self, "n_categories", (int(K), int(L)))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return 1 if self.family == "contingency" else self.x.shape[1]

    @property
    def q(self):
        return self.z.shape[1]

    @property
    def dims(self):
        d = {"n": self.n, "p": self.p, "q": self.q}
        if self.family == "contingency":
            d["K"], d["L"] = self.n_categories
        if self.family == "mvnormal":
            d["k"] = self.y.shape[1]
        return d

    def record(self, i):
        return LinkedRecord(
            self.x[i], self.y[i], self.z[i],
            None if self.event is None else int(self.event[i]),
            None if self.block is None else int(self.block[i]),
        )

    def __len__(self):
        return self.n

    def __iter__(self):
        return (self.record(i) for i in range(self.n))

    def subset(self, idx):
        """New dataset restricted to ``idx`` (order kept as given)."""
        idx = np.asarray(idx)
        block = None
        if self.block is not None:
            # relabel so the ids stay contiguous
            _, block = np.unique(self.block[idx], return_inverse=True)
        return LinkedDataset(
            x=self.x[idx], y=self.y[idx], family=self.family, z=self.z[idx],
            event=None if self.event is None else self.event[idx],
            block=block,
            known_match=None if self.known_match is None else self.known_match[idx],
            x_names=self.x_names, y_names=self.y_names, z_names=self.z_names,
            levels=self.levels, n_categories=self.n_categories,
        )

    def with_y(self, y):
        """Copy with outcomes replaced (used by the simulation harness)."""
        return LinkedDataset(
            x=self.x, y=y, family=self.family, z=self.z, event=self.event,
            block=self.block, known_match=self.known_match, x_names=self.x_names,
            y_names=self.y_names, z_names=self.z_names, levels=self.levels,
            n_categories=self.n_categories,
        )


def block_partition(ds):
    """Index sets of the records in each block, ordered by block id.

    Raises
    ------
    SchemaError
        If the dataset carries no block ids.
    """
    if ds.block is None:
        raise SchemaError("dataset has no block identifiers")
    nb = int(ds.block.max()) + 1
    return [np.flatnonzero(ds.block == b) for b in range(nb)]


def _parse_float(cell, row, col):
    if cell.strip() == "":
        raise DataParseError(f"empty cell in column {col!r} at row {row}", row, col)
    try:
        return float(cell)
    except ValueError:
        raise DataParseError(
            f"non-numeric value {cell!r} in column {col!r} at row {row}", row, col
        ) from None


def ingest_csv(path, schema, family):
    """Read a header-row CSV into a :class:`LinkedDataset`.

    Parameters
    ----------
    path : str or os.PathLike
    schema : Schema or dict
    family : str

    Returns
    -------
    LinkedDataset
        Rows in file order. If ``schema.intercept`` is set a leading column of
        ones named ``(Intercept)`` is prepended to the covariates.
    """
    if isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    if family not in FAMILIES:
        raise SchemaError(f"unknown family {family!r}")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataParseError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not rows:
        raise DataParseError(f"{path}: no data rows")

    ycols = schema.outcome_columns()
    needed = ycols + list(schema.covariates) + list(schema.match_covariates)
    needed += [c for c in (schema.event, schema.block, schema.known_match) if c]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"columns not found in {path}: {missing}")
    pos = {c: header.index(c) for c in needed}
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataParseError(f"row {i} has {len(r)} fields, header has {len(header)}", i)

    categorical = set(schema.categorical)
    if family == "contingency":
        categorical |= {ycols[0], *schema.covariates}
    levels = {}

    def column(name):
        cells = [r[pos[name]] for r in rows]
        if name in categorical:
            for i, c in enumerate(cells, start=1):
                if c.strip() == "":
                    raise DataParseError(f"empty cell in column {name!r} at row {i}", i, name)
            lv = sorted({c.strip() for c in cells}, key=_level_key)
            levels[name] = {v: k + 1 for k, v in enumerate(lv)}
            return np.array([levels[name][c.strip()] for c in cells], dtype=float)
        return np.array([_parse_float(c, i, name) for i, c in enumerate(cells, start=1)])

    ys = [column(c) for c in ycols]
    xs = [column(c) for c in schema.covariates]
    zs = [column(c) for c in schema.match_covariates]
    n = len(rows)
    kw = {}
    if family == "contingency":
        if len(xs) != 1:
            raise SchemaError("contingency family needs exactly one covariate column")
        x = xs[0].astype(np.int64)
        y = ys[0].astype(np.int64)
        kw["n_categories"] = (len(levels[schema.covariates[0]]), len(levels[ycols[0]]))
        x_names = tuple(schema.covariates)
    else:
        if schema.intercept and family != "mvnormal":
            xs = [np.ones(n)] + xs
            x_names = ("(Intercept)",) + tuple(schema.covariates)
        else:
            x_names = tuple(schema.covariates)
        if not xs:
            raise SchemaError("no covariates: list covariate columns or set intercept")
        x = np.column_stack(xs)
        y = np.column_stack(ys) if family == "mvnormal" else ys[0]
    if family == "cox" and schema.event is None:
        raise SchemaError("cox family requires an event column")
    event = column(schema.event) if schema.event else None
    if event is not None and not np.all(np.isin(event, (0, 1))):
        bad = int(np.flatnonzero(~np.isin(event, (0, 1)))[0]) + 1
        raise DataParseError(f"event column must be 0/1 (row {bad})", bad, schema.event)
    block = column(schema.block).astype(np.int64) if schema.block else None
    known = column(schema.known_match).astype(bool) if schema.known_match else None
    return LinkedDataset(
        x=x, y=y, family=family,
        z=np.column_stack(zs) if zs else None,
        event=event, block=block, known_match=known,
        x_names=x_names, y_names=tuple(ycols), z_names=tuple(schema.match_covariates),
        levels=levels, **kw,
    )


def _level_key(v):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def write_csv(ds, path):
    """Write a dataset back out with ``repr``-precision floats.

    The intercept column, if present, is not written. Category indices are
    mapped back to their level strings when a level map is available.
    """
    cols, names = [], []
    inv = {k: {i: s for s, i in v.items()} for k, v in ds.levels.items()}

    def add(name, values):
        if name in inv:
            values = [inv[name][int(v)] for v in values]
        cols.append(values)
        names.append(name)

    ynames = list(ds.y_names) or (
        [f"y{j}" for j in range(ds.y.shape[1])] if ds.y.ndim == 2 else ["y"])
    if ds.y.ndim == 2:
        for j, nm in enumerate(ynames):
            add(nm, ds.y[:, j])
    else:
        add(ynames[0], ds.y)
    if ds.family == "contingency":
        add(ds.x_names[0] if ds.x_names else "x", ds.x)
    else:
        for j, nm in enumerate(ds.x_names):
            if nm == "(Intercept)":
                continue
            add(nm, ds.x[:, j])
    for j, nm in enumerate(ds.z_names):
        add(nm, ds.z[:, j])
    if ds.event is not None:
        add("event", ds.event)
    if ds.block is not None:
        add("block", ds.block)
    if ds.known_match is not None:
        add("known_match", ds.known_match.astype(int))

    def fmt(v):
        if isinstance(v, str):
            return v
        if isinstance(v, (np.integer, int)):
            return str(int(v))
        f = float(v)
        return str(int(f)) if f.is_integer() and abs(f) < 2**53 else repr(f)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([fmt(v) for v in row])
