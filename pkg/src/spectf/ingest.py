"""Wide-format spectra CSV reading, validation and preprocessing.

Input layout: one row per sample with an id column, optional scalar
covariates, an optional response column and one column per wavelength whose
header is the (numeric) wavelength. Non-numeric scalar columns are dummy
coded against a reference level, by default the first level observed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd


class IngestError(ValueError):
    """Invalid input data; the message names the offending row and column."""


def format_float(v) -> str:
    """Shortest text that reads back to the same double."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _is_number(text) -> bool:
    try:
        return math.isfinite(float(text))
    except (TypeError, ValueError):
        return False


@dataclass(frozen=True)
class Schema:
    """Column roles and preprocessing for a spectra file.

    ``scalars=None`` takes every column that is neither the id, the response
    nor a wavelength. ``categorical`` maps a column to its levels, reference
    level first; an empty list means levels are taken in order of first
    appearance. Text columns are treated as categorical automatically.
    """

    id: str = "id"
    response: Optional[str] = "response"
    scalars: Optional[tuple] = None
    categorical: dict = field(default_factory=dict)
    transform: str = "identity"
    aggregate: int = 1

    def __post_init__(self):
        if self.transform not in ("identity", "log"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if int(self.aggregate) < 1:
            raise ValueError("aggregate must be >= 1")
        if self.scalars is not None:
            object.__setattr__(self, "scalars", tuple(self.scalars))

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        known = {"id", "response", "scalars", "categorical", "transform", "aggregate"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown schema keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"id": self.id, "response": self.response,
                "scalars": None if self.scalars is None else list(self.scalars),
                "categorical": {k: list(v) for k, v in self.categorical.items()},
                "transform": self.transform, "aggregate": int(self.aggregate)}


@dataclass(frozen=True)
class SpectraTable:
    """Validated spectra with optional response and scalar covariates."""

    ids: tuple
    wavelengths: np.ndarray
    absorbances: np.ndarray
    response: Optional[np.ndarray] = None
    scalars: Optional[np.ndarray] = None
    scalar_names: tuple = ()
    response_name: str = "response"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n, p = self.absorbances.shape
        if len(self.ids) != n:
            raise IngestError("ids and absorbance rows differ in length")
        if self.wavelengths.shape != (p,):
            raise IngestError("wavelengths and absorbance columns differ in length")
        if p > 1 and not np.all(np.diff(self.wavelengths) > 0):
            raise IngestError("wavelengths must be strictly ascending")
        if self.response is not None and self.response.shape != (n,):
            raise IngestError("response length differs from the number of rows")
        if self.scalars is not None and self.scalars.shape != (n, len(self.scalar_names)):
            raise IngestError("scalar covariates and names disagree in shape")

    @property
    def n(self) -> int:
        return self.absorbances.shape[0]

    @property
    def p(self) -> int:
        return self.absorbances.shape[1]

    @property
    def Z(self) -> Optional[np.ndarray]:
        if self.scalars is None or self.scalars.shape[1] == 0:
            return None
        return self.scalars

    def subset(self, rows) -> "SpectraTable":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return replace(
            self, ids=tuple(self.ids[i] for i in rows), absorbances=self.absorbances[rows],
            response=None if self.response is None else self.response[rows],
            scalars=None if self.scalars is None else self.scalars[rows])


# ---------------------------------------------------------------------------
# reading and writing


def _wavelength_columns(columns, schema: Schema):
    reserved = {schema.id, schema.response} | set(schema.scalars or ()) | set(schema.categorical)
    return [c for c in columns if c not in reserved and _is_number(c)]


def _dummy_code(name, values, ids, levels):
    values = [str(v) for v in values]
    if not levels:
        levels = list(dict.fromkeys(values))
    levels = [str(v) for v in levels]
    unknown = [(i, v) for i, v in zip(ids, values) if v not in levels]
    if unknown:
        i, v = unknown[0]
        raise IngestError(f"row {i!r}: column {name!r} has unknown level {v!r}")
    cols = np.array([[v == lev for lev in levels[1:]] for v in values], dtype=float).reshape(
        len(values), len(levels) - 1)
    return cols, [f"{name}[{lev}]" for lev in levels[1:]], levels


def read_csv(path, schema: Optional[Schema] = None) -> SpectraTable:
    """Read and validate a wide spectra CSV.

    Raises
    ------
    IngestError
        On malformed CSV, missing or non-numeric values (naming the row id and
        column), duplicated ids, or wavelength headers that are not monotone.
        Strictly descending wavelengths are accepted and reordered ascending.
    """
    schema = schema or Schema()
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            header = next(csv.reader(fh), [])
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestError(f"{path}: malformed CSV ({exc})") from exc
    # pandas renames repeated headers, so check the raw header row
    if len(set(header)) != len(header):
        raise IngestError(f"{path}: duplicated column headers")
    if schema.id not in df.columns:
        raise IngestError(f"{path}: id column {schema.id!r} not found")
    ids = tuple(df[schema.id].tolist())
    dup = pd.Series(ids)[pd.Series(ids).duplicated()]
    if len(dup):
        raise IngestError(f"{path}: duplicated id {dup.iloc[0]!r}")

    wcols = _wavelength_columns(df.columns, schema)
    if not wcols:
        raise IngestError(f"{path}: no wavelength columns (numeric headers) found")
    wl = np.array([float(c) for c in wcols])
    order = np.arange(len(wcols))
    if len(wcols) > 1:
        steps = np.diff(wl)
        if np.all(steps < 0):
            order = order[::-1]
        elif not np.all(steps > 0):
            raise IngestError(f"{path}: wavelength headers are not monotone")
    wcols = [wcols[i] for i in order]
    wl = wl[order]

    def numeric(col):
        out = np.empty(len(ids))
        for j, (i, v) in enumerate(zip(ids, df[col])):
            try:
                x = float(v)
            except ValueError:
                x = math.nan
            if not math.isfinite(x):
                raise IngestError(f"row {i!r}: column {col!r} has missing or invalid value {v!r}")
            out[j] = x
        return out

    A = np.column_stack([numeric(c) for c in wcols])

    response = None
    if schema.response and schema.response in df.columns:
        response = numeric(schema.response)

    if schema.scalars is not None:
        scalar_cols = list(schema.scalars)
        missing = [c for c in scalar_cols if c not in df.columns]
        if missing:
            raise IngestError(f"{path}: scalar columns not found: {missing}")
    else:
        taken = {schema.id, schema.response} | set(wcols)
        scalar_cols = [c for c in df.columns if c not in taken]
    blocks, names, levels_used = [], [], {}
    for c in scalar_cols:
        col = df[c]
        is_cat = c in schema.categorical or not all(_is_number(v) for v in col)
        if is_cat:
            if any(v == "" for v in col):
                i = ids[[v == "" for v in col].index(True)]
                raise IngestError(f"row {i!r}: column {c!r} is empty")
            block, nm, levels = _dummy_code(c, col, ids, schema.categorical.get(c, []))
            levels_used[c] = levels
        else:
            block, nm = numeric(c)[:, None], [c]
        blocks.append(block)
        names.extend(nm)
    scalars = np.hstack(blocks) if blocks else None
    meta = {"source": str(Path(path).name), "categorical": levels_used,
            "transform": "identity", "aggregate": 1}
    return SpectraTable(ids, wl, A, response, scalars, tuple(names),
                        schema.response or "response", meta)


def write_csv(table: SpectraTable, path=None) -> str:
    """Write ``table`` in the wide layout with round-trip float text.

    Categorical covariates are written as their indicator columns. Returns
    the CSV text; also writes it to ``path`` when given.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["id", *table.scalar_names]
    if table.response is not None:
        header.append(table.response_name)
    header.extend(format_float(v) for v in table.wavelengths)
    w.writerow(header)
    for j, i in enumerate(table.ids):
        row = [i]
        if table.scalars is not None:
            row.extend(format_float(v) for v in table.scalars[j])
        if table.response is not None:
            row.append(format_float(table.response[j]))
        row.extend(format_float(v) for v in table.absorbances[j])
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def table_from_arrays(X, y=None, Z=None, wavelengths=None, ids=None, scalar_names=None,
                      response_name: str = "response") -> SpectraTable:
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    wl = np.arange(1, p + 1, dtype=float) if wavelengths is None else np.asarray(wavelengths, dtype=float)
    ids = tuple(f"s{i + 1}" for i in range(n)) if ids is None else tuple(str(i) for i in ids)
    if Z is not None:
        Z = np.asarray(Z, dtype=float).reshape(n, -1)
        scalar_names = tuple(scalar_names or (f"z{j + 1}" for j in range(Z.shape[1])))
    return SpectraTable(ids, wl, X, None if y is None else np.asarray(y, dtype=float), Z,
                        tuple(scalar_names or ()), response_name,
                        {"categorical": {}, "transform": "identity", "aggregate": 1})


# ---------------------------------------------------------------------------
# preprocessing


def aggregate_wavelengths(table: SpectraTable, factor: int) -> SpectraTable:
    """Average non-overlapping blocks of ``factor`` adjacent wavelengths.

    A trailing partial block is averaged over the columns it has, so the
    result has ``ceil(p / factor)`` columns.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor > table.p:
        raise ValueError(f"factor {factor} exceeds the number of wavelengths {table.p}")
    if factor == 1:
        return table
    starts = np.arange(0, table.p, factor)
    counts = np.minimum(factor, table.p - starts)
    A = np.add.reduceat(table.absorbances, starts, axis=1) / counts
    wl = np.add.reduceat(table.wavelengths, starts) / counts
    meta = dict(table.metadata)
    meta["aggregate"] = int(meta.get("aggregate", 1)) * factor
    return replace(table, wavelengths=wl, absorbances=A, metadata=meta)


def transform_response(table: SpectraTable, transform: str = "identity") -> SpectraTable:
    """Apply ``log`` or ``identity`` to the response and record it."""
    if transform not in ("identity", "log"):
        raise ValueError(f"unknown transform {transform!r}")
    if table.response is None:
        raise IngestError("table has no response column")
    meta = dict(table.metadata)
    if transform == "identity":
        meta.setdefault("transform", "identity")
        return replace(table, metadata=meta)
    if meta.get("transform", "identity") != "identity":
        raise IngestError("response is already transformed")
    bad = np.flatnonzero(~(table.response > 0))
    if bad.size:
        j = bad[0]
        raise IngestError(f"row {table.ids[j]!r}: log transform needs a positive response, got {table.response[j]!r}")
    meta["transform"] = "log"
    return replace(table, response=np.log(table.response), metadata=meta)


def inverse_transform(values, transform: str):
    values = np.asarray(values, dtype=float)
    return np.exp(values) if transform == "log" else values


def load_dataset(path, schema: Optional[Schema] = None) -> SpectraTable:
    """Read, aggregate and transform as the schema prescribes."""
    schema = schema or Schema()
    table = read_csv(path, schema)
    table = aggregate_wavelengths(table, schema.aggregate)
    if schema.transform != "identity" and table.response is not None:
        table = transform_response(table, schema.transform)
    return table


def train_holdout_split(table: SpectraTable, holdout_fraction: float, seed: int):
    """Random split into ``(train, holdout)``; deterministic given ``seed``."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    m = int(round(holdout_fraction * table.n))
    if m < 1 or m >= table.n:
        raise ValueError("split leaves an empty part")
    perm = np.random.default_rng(seed).permutation(table.n)
    test = np.sort(perm[:m])
    train = np.sort(perm[m:])
    return table.subset(train), table.subset(test)


def tables_equal(a: SpectraTable, b: SpectraTable) -> bool:
    """Data equality (ids, wavelengths, values and names), ignoring metadata."""
    def same(u, v):
        if u is None or v is None:
            return u is None and v is None
        return u.shape == v.shape and np.array_equal(u, v)
    return (tuple(a.ids) == tuple(b.ids) and same(a.wavelengths, b.wavelengths)
            and same(a.absorbances, b.absorbances) and same(a.response, b.response)
            and same(a.scalars, b.scalars) and tuple(a.scalar_names) == tuple(b.scalar_names))


def columns_for(names: Sequence[str], table: SpectraTable) -> np.ndarray:
    """Scalar columns of ``table`` in the order of ``names``."""
    missing = [n for n in names if n not in table.scalar_names]
    if missing:
        raise IngestError(f"scalar covariates missing from data: {missing}")
    idx = [table.scalar_names.index(n) for n in names]
    return table.scalars[:, idx]
