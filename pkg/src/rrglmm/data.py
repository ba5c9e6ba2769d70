"""Column-oriented data tables ingested from CSV.

A :class:`DataTable` holds named columns of equal length.  Columns are
numeric (float arrays, NaN marks a missing cell) or categorical (string
levels ordered by first appearance unless an explicit ordering is given).
CSV ingestion follows RFC 4180 with a required header row; numbers are
parsed with ``float()`` and are therefore locale-independent.
"""

from __future__ import annotations

import csv

import numpy as np

_MISSING_TOKENS = {"", "NA", "NaN", "nan"}


class DataError(ValueError):
    """Raised for problems with the data itself (not formula syntax)."""


def _try_numeric(values):
    out = np.empty(len(values), dtype=float)
    for i, v in enumerate(values):
        if v is None or (isinstance(v, str) and v.strip() in _MISSING_TOKENS):
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except (TypeError, ValueError):
            return None
    return out


class DataTable:
    """Named columns of one common length.

    Parameters
    ----------
    columns
        Mapping of column name to a sequence of values. Sequences of
        numbers become numeric columns; anything else is categorical.
    categorical
        Column names to force categorical even when all values parse as
        numbers.
    levels
        Optional explicit level ordering per categorical column.
    """

    def __init__(self, columns, categorical=(), levels=None):
        categorical = set(categorical)
        levels = dict(levels or {})
        self._numeric = {}
        self._strings = {}
        self._levels = {}
        self.names = list(columns)
        n = None
        for name, values in columns.items():
            values = list(np.asarray(values, dtype=object).ravel()) if not isinstance(values, list) else values
            if n is None:
                n = len(values)
            elif len(values) != n:
                raise DataError(
                    f"column {name!r} has length {len(values)}, expected {n}"
                )
            as_num = None if name in categorical else _try_numeric(values)
            if as_num is not None:
                self._numeric[name] = as_num
                continue
            strs = [
                None
                if v is None or (isinstance(v, str) and v.strip() in _MISSING_TOKENS)
                else str(v)
                for v in values
            ]
            if name in levels:
                lv = list(levels[name])
            else:
                lv, seen = [], set()
                for v in strs:
                    if v is not None and v not in seen:
                        seen.add(v)
                        lv.append(v)
            index = {l: i for i, l in enumerate(lv)}
            codes = np.empty(n, dtype=int)
            for i, v in enumerate(strs):
                if v is None:
                    codes[i] = -1
                elif v in index:
                    codes[i] = index[v]
                else:
                    raise DataError(f"value {v!r} not in declared levels of {name!r}")
            self._strings[name] = codes
            self._levels[name] = lv
        self.n = n or 0

    @classmethod
    def from_csv(cls, path, categorical=(), levels=None) -> "DataTable":
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file, expected a header row") from None
            rows = list(reader)
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        for i, row in enumerate(rows):
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}"
                )
        columns = {name: [row[j] for row in rows] for j, name in enumerate(header)}
        return cls(columns, categorical=categorical, levels=levels)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.names)
            cols = [self.column_strings(name) for name in self.names]
            writer.writerows(zip(*cols))

    def column_strings(self, name):
        """Column rendered as strings, for CSV output."""
        if self.is_categorical(name):
            lv = self._levels[name]
            return ["" if c < 0 else lv[c] for c in self._strings[name]]
        return [
            "" if np.isnan(v) else repr(int(v)) if float(v).is_integer() else repr(float(v))
            for v in self._numeric[name]
        ]

    def is_categorical(self, name) -> bool:
        self._check(name)
        return name in self._strings

    def numeric(self, name) -> np.ndarray:
        self._check(name)
        if name in self._strings:
            raise DataError(f"column {name!r} is categorical, expected numeric")
        return self._numeric[name]

    def codes(self, name) -> np.ndarray:
        self._check(name)
        if name not in self._strings:
            raise DataError(f"column {name!r} is numeric, expected categorical")
        return self._strings[name]

    def levels(self, name):
        self._check(name)
        if name not in self._strings:
            raise DataError(f"column {name!r} is numeric, expected categorical")
        return list(self._levels[name])

    def missing_mask(self, name) -> np.ndarray:
        self._check(name)
        if name in self._strings:
            return self._strings[name] < 0
        return np.isnan(self._numeric[name])

    def with_column(self, name, values) -> "DataTable":
        """A copy with one numeric column replaced (or appended)."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n,):
            raise DataError(f"replacement column must have length {self.n}")
        columns = {}
        for nm in self.names:
            if nm == name:
                columns[nm] = list(values)
            elif self.is_categorical(nm):
                columns[nm] = self.column_strings(nm)
            else:
                columns[nm] = list(self._numeric[nm])
        if name not in self.names:
            columns[name] = list(values)
        cat = [nm for nm in self.names if self.is_categorical(nm) and nm != name]
        lv = {nm: self._levels[nm] for nm in cat}
        return DataTable(columns, categorical=cat, levels=lv)

    def _check(self, name):
        if name not in self._numeric and name not in self._strings:
            raise DataError(f"no column named {name!r}")

    def __repr__(self):
        kinds = ", ".join(
            f"{nm}{'[cat]' if self.is_categorical(nm) else ''}" for nm in self.names
        )
        return f"DataTable(n={self.n}, columns=[{kinds}])"
