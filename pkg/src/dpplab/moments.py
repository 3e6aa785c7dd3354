"""The stacked vector of marginal, pairwise and pivot-anchored triple inclusion probabilities.

Ordering is fixed: marginals ascending, then pairs ``(i, j)`` with ``i < j`` in
lexicographic order, then triples ``(pivot, i, j)`` with ``i < j`` and both
different from the pivot, lexicographic in ``(i, j)``. The total length is
``d**2 - d + 1``.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, ValidationError

CONSISTENCY_TOL = 1e-12


@dataclass(frozen=True)
class MomentLayout:
    d: int
    pivot: int
    pairs: tuple[tuple[int, int], ...]
    triples: tuple[tuple[int, int], ...]

    @property
    def size(self) -> int:
        return self.d + len(self.pairs) + len(self.triples)

    def pair_index(self, i: int, j: int) -> int:
        i, j = min(i, j), max(i, j)
        return self.d + self._pair_pos[(i, j)]

    def triple_index(self, i: int, j: int) -> int:
        i, j = min(i, j), max(i, j)
        return self.d + len(self.pairs) + self._triple_pos[(i, j)]

    @property
    def _pair_pos(self):
        return _positions(self.pairs)

    @property
    def _triple_pos(self):
        return _positions(self.triples)

    def subsets(self) -> list[tuple[int, ...]]:
        """The index set whose joint inclusion each coordinate records."""
        out = [(i,) for i in range(self.d)]
        out += list(self.pairs)
        out += [tuple(sorted((self.pivot, i, j))) for i, j in self.triples]
        return out

    def labels(self) -> list[tuple[str, tuple[int, ...]]]:
        out = [("marginal", (i,)) for i in range(self.d)]
        out += [("pair", p) for p in self.pairs]
        out += [("triple", (self.pivot, i, j)) for i, j in self.triples]
        return out


@lru_cache(maxsize=None)
def _positions(items):
    return {p: k for k, p in enumerate(items)}


@lru_cache(maxsize=None)
def layout(d: int, pivot: int = 0) -> MomentLayout:
    if d < 2:
        raise DimensionMismatch("moment vectors need d >= 2")
    if not 0 <= pivot < d:
        raise ValidationError(f"pivot {pivot} outside [0, {d})")
    pairs = tuple(itertools.combinations(range(d), 2))
    others = [i for i in range(d) if i != pivot]
    triples = tuple(itertools.combinations(others, 2))
    return MomentLayout(d, pivot, pairs, triples)


def moment_size(d: int) -> int:
    return d * d - d + 1


@dataclass(frozen=True)
class MomentVector:
    d: int
    pivot: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (moment_size(self.d),):
            raise DimensionMismatch(f"moment vector of length {v.shape} for d={self.d}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def layout(self) -> MomentLayout:
        return layout(self.d, self.pivot)

    @property
    def marginals(self) -> np.ndarray:
        return self.values[: self.d]

    def pair(self, i: int, j: int) -> float:
        return float(self.values[self.layout.pair_index(i, j)])

    def triple(self, i: int, j: int) -> float:
        return float(self.values[self.layout.triple_index(i, j)])

    def with_values(self, values) -> MomentVector:
        return MomentVector(self.d, self.pivot, values)

    def check_consistency(self, tol: float = CONSISTENCY_TOL) -> None:
        """Raise if entries leave [0, 1] or a joint probability exceeds a sub-event's."""
        v = self.values
        if np.any(v < -tol) or np.any(v > 1 + tol):
            raise ValidationError("moment entries must lie in [0, 1]")
        lay = self.layout
        m = self.marginals
        for i, j in lay.pairs:
            if self.pair(i, j) > min(m[i], m[j]) + tol:
                raise ValidationError(f"pair ({i}, {j}) exceeds its marginals")
        p = self.pivot
        for i, j in lay.triples:
            bound = min(self.pair(p, i), self.pair(p, j), self.pair(i, j))
            if self.triple(i, j) > bound + tol:
                raise ValidationError(f"triple ({p}, {i}, {j}) exceeds its pairs")


def write_moments_csv(path, pi: MomentVector) -> None:
    """One labelled row per entry: kind, 1-based indices joined by ';', value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "indices", "value"])
    for (kind, idx), value in zip(pi.layout.labels(), pi.values):
        w.writerow([kind, ";".join(str(i + 1) for i in idx), "%.17g" % value])
    Path(path).write_text(buf.getvalue())


def read_moments_csv(path) -> MomentVector:
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    marg = [r for r in rows if r["kind"] == "marginal"]
    d = len(marg)
    trip = [r for r in rows if r["kind"] == "triple"]
    if trip:
        first = [int(x) - 1 for x in trip[0]["indices"].split(";")]
        # triples are labelled with the pivot first
        pivot = first[0]
    else:
        pivot = 0
    return MomentVector(d, pivot, np.array([float(r["value"]) for r in rows]))
