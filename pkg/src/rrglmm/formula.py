"""Mixed-model formula parsing and design-matrix construction.

Grammar (EBNF)::

    formula     = ident "~" rhs ;
    rhs         = term { "+" term } ;
    term        = random | "0" | "1" | product ;
    product     = ident { ("*" | ":") ident } ;
    random      = [ struct ] "(" varying "|" ident [ "," rank ] ")" ;
    struct      = "diag" | "us" | "rr" ;
    varying     = vterm { "+" vterm } ;
    vterm       = "0" | "1" | product ;
    rank        = integer | "d" "=" integer ;

``:`` binds tighter than ``*``; ``a * b`` expands to ``a + b + a:b``.
A bare ``( ... | g )`` random term is unstructured (``us``); ``rr`` without
a rank defaults to rank 2, and the rank argument is only accepted for
``rr``.

Design-matrix rules: a categorical main effect with k levels expands to
k-1 treatment-coded columns against the first level when the expression
has an intercept, and to k full indicator columns without one.  Factors
inside interactions always use the k-1 treatment columns.  Expansion is
left to right as written, main effects before the interactions produced
by ``*``.  Rows with missing values in any referenced column are rejected.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .data import DataError, DataTable

STRUCTURE_KINDS = ("us", "diag", "rr")
DEFAULT_RR_RANK = 2


class FormulaError(ValueError):
    """Formula syntax error, with the character position that caused it."""

    def __init__(self, message, pos=None):
        self.pos = pos
        if pos is not None:
            message = f"{message} (at position {pos})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# parsed representation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TermExpr:
    """A sum of product terms plus an intercept flag.

    Each product term is a tuple of column names; a 1-tuple is a main
    effect and longer tuples are interactions.
    """

    intercept: bool = True
    terms: tuple = ()

    def unparse(self) -> str:
        parts = [":".join(t) for t in self.terms]
        if not self.intercept:
            parts = ["0"] + parts
        elif not parts:
            parts = ["1"]
        return " + ".join(parts)

    def columns(self):
        """All data columns referenced by this expression."""
        return {f for t in self.terms for f in t}


@dataclass(frozen=True)
class RandomTerm:
    varying: TermExpr
    group: str
    structure: str = "us"
    rank: int | None = None

    def unparse(self) -> str:
        inner = f"{self.varying.unparse()} | {self.group}"
        if self.structure == "us":
            return f"({inner})"
        if self.structure == "rr":
            return f"rr({inner}, {self.rank})"
        return f"{self.structure}({inner})"


@dataclass(frozen=True)
class ModelSpec:
    response: str
    fixed: TermExpr
    random_terms: tuple = ()

    def unparse(self) -> str:
        parts = [self.fixed.unparse()]
        parts += [t.unparse() for t in self.random_terms]
        return f"{self.response} ~ " + " + ".join(parts)

    def with_rank(self, term_index: int, rank: int) -> "ModelSpec":
        """Copy with the rank of one rr term changed; rank 0 drops the term."""
        terms = list(self.random_terms)
        t = terms[term_index]
        if t.structure != "rr":
            raise ValueError(f"random term {term_index} is {t.structure}, not rr")
        if rank == 0:
            del terms[term_index]
        else:
            terms[term_index] = RandomTerm(t.varying, t.group, "rr", rank)
        return ModelSpec(self.response, self.fixed, tuple(terms))


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<int>\d+)|(?P<ident>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<sym>[~+*:|,=()]))"
)


def _tokenize(text):
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].lstrip()
            if not rest:
                break
            bad = len(text) - len(rest)
            raise FormulaError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self, offset=0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.next()
        if val != value:
            shown = val if val else "end of formula"
            raise FormulaError(f"expected {value!r}, found {shown!r}", pos)
        return pos

    def parse(self) -> ModelSpec:
        kind, response, pos = self.next()
        if kind != "ident":
            raise FormulaError("expected a response column name", pos)
        self.expect("~")
        intercept, fixed_terms, randoms = True, [], []
        while True:
            intercept = self._parse_term(intercept, fixed_terms, randoms)
            kind, val, pos = self.peek()
            if kind == "end":
                break
            if val != "+":
                raise FormulaError(f"expected '+', found {val!r}", pos)
            self.next()
        fixed = TermExpr(intercept, tuple(dict.fromkeys(fixed_terms)))
        return ModelSpec(response, fixed, tuple(randoms))

    def _parse_term(self, intercept, out_terms, out_randoms):
        kind, val, pos = self.peek()
        if kind == "int":
            self.next()
            if val == "0":
                return False
            if val == "1":
                return intercept
            raise FormulaError(f"unexpected integer {val!r} in term", pos)
        if val == "(":
            out_randoms.append(self._parse_random(None))
            return intercept
        if kind != "ident":
            shown = val if val else "end of formula"
            raise FormulaError(f"expected a term, found {shown!r}", pos)
        if self.peek(1)[1] == "(":
            name_pos = pos
            name = self.next()[1]
            if name not in STRUCTURE_KINDS:
                raise FormulaError(
                    f"unknown structure keyword {name!r}; expected one of "
                    f"{', '.join(STRUCTURE_KINDS)}",
                    name_pos,
                )
            out_randoms.append(self._parse_random(name))
            return intercept
        out_terms.extend(self._parse_product())
        return intercept

    def _parse_product(self):
        """Parse a chain of ``ident (:|*) ident ...`` into product terms."""
        # ':' binds tighter than '*': collect ':'-chains first.
        def colon_chain():
            kind, val, pos = self.next()
            if kind != "ident":
                raise FormulaError(f"expected a column name, found {val!r}", pos)
            factors = [val]
            while self.peek()[1] == ":":
                self.next()
                kind, val, pos = self.next()
                if kind != "ident":
                    raise FormulaError(f"expected a column name after ':', found {val!r}", pos)
                factors.append(val)
            return tuple(factors)

        terms = [colon_chain()]
        while self.peek()[1] == "*":
            self.next()
            rhs = colon_chain()
            crossed = [t + rhs for t in terms]
            terms = terms + [rhs] + crossed
        return terms

    def _parse_random(self, structure):
        self.expect("(")
        intercept, vterms = True, []
        while True:
            kind, val, pos = self.peek()
            if kind == "int":
                self.next()
                if val == "0":
                    intercept = False
                elif val != "1":
                    raise FormulaError(f"unexpected integer {val!r} in random term", pos)
            else:
                vterms.extend(self._parse_product())
            kind, val, pos = self.peek()
            if val == "+":
                self.next()
                continue
            break
        self.expect("|")
        kind, group, pos = self.next()
        if kind != "ident":
            raise FormulaError("expected a grouping column after '|'", pos)
        rank = None
        kind, val, pos = self.peek()
        if val == ",":
            self.next()
            if structure != "rr":
                raise FormulaError(
                    f"rank argument is only valid for rr terms, not "
                    f"{structure or 'us'!r}",
                    pos,
                )
            rank = self._parse_rank()
        close = self.expect(")")
        structure = structure or "us"
        if structure == "rr" and rank is None:
            rank = DEFAULT_RR_RANK
        varying = TermExpr(intercept, tuple(dict.fromkeys(vterms)))
        if not varying.terms and not varying.intercept:
            raise FormulaError("random term has no varying columns", close)
        return RandomTerm(varying, group, structure, rank)

    def _parse_rank(self):
        kind, val, pos = self.next()
        if kind == "ident":
            if val != "d":
                raise FormulaError(f"expected a rank like '2' or 'd = 2', found {val!r}", pos)
            self.expect("=")
            kind, val, pos = self.next()
        if kind != "int":
            raise FormulaError(f"rank must be a positive integer, found {val!r}", pos)
        rank = int(val)
        if rank < 1:
            raise FormulaError("rank must be a positive integer", pos)
        return rank


def parse_formula(text: str) -> ModelSpec:
    """Parse a model formula such as ``y ~ x + rr(x | g, 2)``."""
    if not isinstance(text, str) or not text.strip():
        raise FormulaError("empty formula")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# design matrices
# ---------------------------------------------------------------------------


@dataclass
class TermDesign:
    """Random-effect design block for one term."""

    Z: np.ndarray
    colnames: list
    group: str
    group_index: np.ndarray
    group_levels: list
    structure: str
    rank: int | None

    @property
    def q(self):
        return self.Z.shape[1]

    @property
    def m(self):
        return len(self.group_levels)


@dataclass
class DesignSet:
    X: np.ndarray
    xnames: list
    terms: list
    n: int


def _check_missing(data: DataTable, columns):
    for name in columns:
        if name not in data.names:
            raise DataError(f"no column named {name!r}")
        mask = data.missing_mask(name)
        if mask.any():
            rows = np.flatnonzero(mask)[:5] + 1
            raise DataError(
                f"column {name!r} has {int(mask.sum())} missing value(s) "
                f"(e.g. data row {rows[0]}); rows with missing values are "
                "rejected, not dropped"
            )


def _factor_columns(data: DataTable, name, drop_first):
    """Expand one factor to (name, values) column pairs."""
    if not data.is_categorical(name):
        return [(name, data.numeric(name))]
    levels = data.levels(name)
    codes = data.codes(name)
    keep = levels[1:] if drop_first else levels
    offset = 1 if drop_first else 0
    return [
        (f"{name}{lev}", (codes == i + offset).astype(float))
        for i, lev in enumerate(keep)
    ]


def expand_expression(expr: TermExpr, data: DataTable):
    """Expand a term expression to a design matrix and its column names."""
    cols, names = [], []
    if expr.intercept:
        cols.append(np.ones(data.n))
        names.append("(Intercept)")
    for term in expr.terms:
        parts = [
            _factor_columns(data, fac, drop_first=expr.intercept or len(term) > 1)
            for fac in term
        ]
        expanded = parts[0]
        for nxt in parts[1:]:
            expanded = [
                (f"{na}:{nb}", va * vb) for na, va in expanded for nb, vb in nxt
            ]
        for name, values in expanded:
            names.append(name)
            cols.append(values)
    if not cols:
        return np.empty((data.n, 0)), []
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise DataError(f"duplicate design columns after expansion: {sorted(dup)}")
    return np.column_stack(cols), names


def build_design(spec: ModelSpec, data: DataTable) -> DesignSet:
    """Build the fixed design matrix and per-term random design blocks."""
    referenced = set(spec.fixed.columns())
    for t in spec.random_terms:
        referenced |= t.varying.columns()
        referenced.add(t.group)
    _check_missing(data, sorted(referenced))

    X, xnames = expand_expression(spec.fixed, data)
    terms = []
    for t in spec.random_terms:
        if not data.is_categorical(t.group):
            raise DataError(
                f"grouping column {t.group!r} must be categorical "
                "(force it with the categorical option if it is numeric)"
            )
        Z, znames = expand_expression(t.varying, data)
        if Z.shape[1] == 0:
            raise DataError(f"random term ({t.varying.unparse()} | {t.group}) is empty")
        codes = data.codes(t.group)
        levels = data.levels(t.group)
        counts = np.bincount(codes, minlength=len(levels))
        if (counts == 0).any():
            empty = [levels[i] for i in np.flatnonzero(counts == 0)]
            raise DataError(f"empty group level(s) in {t.group!r}: {empty}")
        rank = t.rank
        if t.structure == "rr" and rank > Z.shape[1]:
            raise DataError(
                f"rr rank {rank} exceeds the {Z.shape[1]} varying column(s) "
                f"of ({t.varying.unparse()} | {t.group})"
            )
        terms.append(
            TermDesign(Z, znames, t.group, codes.copy(), levels, t.structure, rank)
        )
    return DesignSet(X, xnames, terms, data.n)
