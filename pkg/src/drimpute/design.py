"""Design specifications: ordered model terms and matrix building.

A design is written as a small formula, e.g. ``"1 + x1 + x2 + t + x2:t"``.
``1`` is the intercept, ``a:b`` an interaction. Two tokens expand with
context:

``hist``
    the observed history L̄_s (outcomes y1..ys plus any time-varying
    covariates up to visit s); only meaningful in subject-level designs.
``visit``
    indicator columns v1..vM (categorical time); only meaningful in
    long-format (subject-visit) designs.

Interactions with an expanding token expand element-wise, so
``x2:visit`` becomes ``x2:v1 + ... + x2:vM``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

HIST = "hist"
VISIT = "visit"
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.@]*$")

Term = tuple  # tuple[str, ...]; the empty tuple is the intercept


def term_name(term: Term) -> str:
    return ":".join(term) if term else "intercept"


@dataclass(frozen=True)
class DesignSpec:
    terms: tuple

    def __post_init__(self):
        terms = tuple(tuple(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        if sum(1 for t in terms if not t) > 1:
            raise DataError("intercept appears more than once in design")
        for t in terms:
            if len(set(t)) != len(t):
                raise DataError(f"interaction {term_name(t)!r} repeats a factor")
            for f in t:
                if not _NAME.match(f):
                    raise DataError(f"bad factor name {f!r}")
        if len(set(terms)) != len(terms):
            raise DataError("duplicate terms in design")

    @classmethod
    def parse(cls, formula: str) -> "DesignSpec":
        terms = []
        for raw in formula.split("+"):
            raw = raw.strip()
            if not raw:
                raise DataError(f"empty term in formula {formula!r}")
            if raw == "1":
                terms.append(())
            else:
                terms.append(tuple(f.strip() for f in raw.split(":")))
        return cls(tuple(terms))

    def __str__(self):
        return " + ".join("1" if not t else ":".join(t) for t in self.terms)

    @property
    def names(self) -> list:
        return [term_name(t) for t in self.terms]

    @property
    def width(self) -> int:
        return len(self.terms)

    @property
    def has_intercept(self) -> bool:
        return () in self.terms

    def references(self) -> frozenset:
        return frozenset(f for t in self.terms for f in t)

    def plus(self, *terms) -> "DesignSpec":
        extra = [tuple(t) if not isinstance(t, str) else tuple(t.split(":")) for t in terms]
        return DesignSpec(self.terms + tuple(t for t in extra if t not in self.terms))

    def without(self, *factors: str) -> "DesignSpec":
        """Drop every term that involves any of ``factors``."""
        drop = set(factors)
        return DesignSpec(tuple(t for t in self.terms if not drop.intersection(t)))

    def expand(self, history: Sequence[str] = (), visits: Sequence[str] = ()) -> "DesignSpec":
        out = []
        for t in self.terms:
            pieces = [()]
            for f in t:
                if f == HIST:
                    choices = list(history)
                elif f == VISIT:
                    choices = list(visits)
                else:
                    choices = [f]
                pieces = [p + (c,) for p in pieces for c in choices]
            for p in pieces:
                if p not in out:
                    out.append(p)
        return DesignSpec(tuple(out))

    def matrix(self, frame: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
        if n is None:
            n = len(next(iter(frame.values())))
        X = np.empty((n, len(self.terms)))
        for c, t in enumerate(self.terms):
            if not t:
                X[:, c] = 1.0
                continue
            col = None
            for f in t:
                if f in (HIST, VISIT):
                    raise DataError(f"design token {f!r} was not expanded")
                try:
                    v = frame[f]
                except KeyError:
                    raise DataError(f"unknown design reference {f!r}") from None
                col = v if col is None else col * v
            X[:, c] = col
        return X


def as_spec(design) -> DesignSpec:
    if isinstance(design, DesignSpec):
        return design
    if isinstance(design, str):
        return DesignSpec.parse(design)
    raise TypeError(f"cannot interpret {design!r} as a design")
