"""Exact DPP probabilities by enumeration, and low-order minor bookkeeping.

Everything here is exact up to floating point and refuses to run past
``ENUM_LIMIT`` items. These routines are the brute-force oracles the sampler,
estimator and bounds are checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AssumptionViolated, RefuseLargeD, ValidationError
from .estimator import recover_from_moments
from .kernel import (
    ENUM_LIMIT,
    ZERO_TOL,
    all_subsets,
    as_matrix,
    principal_minor,
    validate_ensemble,
    validate_kernel,
)
from .moments import MomentVector, layout

_CHUNK = 1 << 14


def _mask(s: Sequence[int]) -> int:
    m = 0
    for i in s:
        m |= 1 << i
    return m


def _members(mask: int, d: int) -> tuple[int, ...]:
    return tuple(i for i in range(d) if mask >> i & 1)


def pmf_sigma(S, s: Sequence[int]) -> float:
    """``det Sigma_s / det(I + Sigma)``."""
    S = validate_ensemble(S)
    return principal_minor(S.matrix, s) / _ensemble_normaliser(S)


def _ensemble_normaliser(S) -> float:
    # LEnsemble is frozen and hashable only by identity; cache on the instance
    cached = S.__dict__.get("_normaliser")
    if cached is None:
        cached = float(np.prod(1.0 + S.eigenvalues))
        object.__setattr__(S, "_normaliser", cached)
    return cached


def pmf_k(K, s: Sequence[int]) -> float:
    """``det(I_s K + I_sbar (I - K))``: rows in ``s`` from K, the rest from I - K."""
    K = validate_kernel(K)
    a = K.matrix
    rows = np.zeros(K.d, dtype=bool)
    rows[list(s)] = True
    M = np.where(rows[:, None], a, np.eye(K.d) - a)
    return float(np.linalg.det(M))


def inclusion_prob(K, s: Sequence[int]) -> float:
    """``P[s subset of S] = det K_s``."""
    K = validate_kernel(K)
    return principal_minor(K.matrix, s)


@dataclass(frozen=True)
class ExactDistribution:
    """Full pmf table; ``probs[mask]`` is the probability of the subset with bit i set for item i."""

    d: int
    probs: np.ndarray

    def prob(self, s: Sequence[int]) -> float:
        return float(self.probs[_mask(s)])

    def items(self):
        """(subset, probability) pairs in lexicographic subset order."""
        for s in sorted(all_subsets(self.d)):
            yield s, float(self.probs[_mask(s)])

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "probs": [{"s": [i + 1 for i in s], "p": p} for s, p in self.items()],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> ExactDistribution:
        d = int(obj["d"])
        probs = np.zeros(1 << d)
        for rec in obj["probs"]:
            probs[_mask([i - 1 for i in rec["s"]])] = rec["p"]
        return cls(d, probs)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def read(cls, path) -> ExactDistribution:
        return cls.from_dict(json.loads(Path(path).read_text()))


def enumerate_distribution(K, enum_limit: int = ENUM_LIMIT) -> ExactDistribution:
    K = validate_kernel(K)
    d = K.d
    if d > enum_limit:
        raise RefuseLargeD(d, enum_limit)
    a = K.matrix
    ia = np.eye(d) - a
    n = 1 << d
    bits = (np.arange(n)[:, None] >> np.arange(d)[None, :]) & 1
    probs = np.empty(n)
    for start in range(0, n, _CHUNK):
        b = bits[start:start + _CHUNK].astype(bool)
        M = np.where(b[:, :, None], a[None], ia[None])
        probs[start:start + _CHUNK] = np.linalg.det(M)
    if probs.min() < -1e-12:
        raise ValidationError(f"negative probability {probs.min():.3g}; kernel numerically invalid")
    probs = np.clip(probs, 0.0, None)
    probs.setflags(write=False)
    return ExactDistribution(d, probs)


def exact_moment_vector(K, pivot: int = 0) -> MomentVector:
    K = validate_kernel(K)
    lay = layout(K.d, pivot)
    vals = [inclusion_prob(K, s) for s in lay.subsets()]
    return MomentVector(K.d, pivot, np.array(vals))


def exact_moment_covariance(K, pivot: int = 0) -> np.ndarray:
    """Per-observation covariance of the indicator products.

    ``E[g_h g_l]`` is the inclusion probability of the union of the two index
    sets, so the covariance is exact.
    """
    K = validate_kernel(K)
    subsets = layout(K.d, pivot).subsets()
    pi = np.array([inclusion_prob(K, s) for s in subsets])
    m = len(subsets)
    C = np.empty((m, m))
    cache: dict[tuple[int, ...], float] = {}
    for h in range(m):
        for l in range(h, m):
            u = tuple(sorted(set(subsets[h]) | set(subsets[l])))
            if u not in cache:
                cache[u] = inclusion_prob(K, u)
            C[h, l] = C[l, h] = cache[u] - pi[h] * pi[l]
    return C


@dataclass(frozen=True)
class MinorTable:
    pivot: int
    order1: np.ndarray
    order2: dict
    order3_pivot: dict

    @property
    def d(self) -> int:
        return self.order1.size

    def as_moments(self) -> MomentVector:
        lay = layout(self.d, self.pivot)
        vals = list(self.order1)
        vals += [self.order2[p] for p in lay.pairs]
        vals += [self.order3_pivot[t] for t in lay.triples]
        return MomentVector(self.d, self.pivot, np.array(vals))


def minor_table(K, pivot: int = 0) -> MinorTable:
    K = validate_kernel(K)
    a = K.matrix
    lay = layout(K.d, pivot)
    o2 = {(i, j): principal_minor(a, (i, j)) for i, j in lay.pairs}
    o3 = {(i, j): principal_minor(a, (pivot, i, j)) for i, j in lay.triples}
    return MinorTable(pivot, np.diag(a).copy(), o2, o3)


def order3_expansion(K, p: int, i: int, j: int) -> float:
    """Closed-form 3x3 principal minor on ``{p, i, j}`` of a symmetric matrix."""
    a = np.asarray(K, dtype=float)
    return (
        a[p, p] * a[i, i] * a[j, j]
        + 2 * a[p, i] * a[i, j] * a[p, j]
        - a[p, p] * a[i, j] ** 2
        - a[i, i] * a[p, j] ** 2
        - a[j, j] * a[p, i] ** 2
    )


@dataclass(frozen=True)
class ReconstructionReport:
    reconstructed: np.ndarray
    max_deviation: float
    n_subsets: int
    exhaustive: bool
    # deviation on the first four items, None when d < 4
    order4_deviation: float | None
    regime: str

    def passed(self, tol: float = 1e-10) -> bool:
        return self.max_deviation <= tol

    def to_dict(self) -> dict:
        return {
            "reconstructed": self.reconstructed.tolist(),
            "max_deviation": self.max_deviation,
            "n_subsets": self.n_subsets,
            "exhaustive": self.exhaustive,
            "order4_deviation": self.order4_deviation,
            "regime": self.regime,
        }


def verify_minor_reconstruction(
    K,
    pivot: int = 0,
    regime: str = "strict",
    zero_tol: float = ZERO_TOL,
    n_random: int = 500,
    seed: int = 0,
    enum_limit: int = ENUM_LIMIT,
) -> ReconstructionReport:
    """Rebuild a kernel from its order-1, order-2 and pivot-anchored order-3 minors, then
    compare every principal minor of the rebuilt matrix with the original.

    Exhaustive for d <= 6, ``n_random`` random nonempty subsets beyond.
    """
    K = validate_kernel(K)
    a = K.matrix
    d = K.d
    if d > enum_limit:
        raise RefuseLargeD(d, enum_limit)
    if regime == "strict":
        if np.any(np.abs(a) <= zero_tol):
            i, j = np.argwhere(np.abs(a) <= zero_tol)[0]
            raise AssumptionViolated(f"entry ({i}, {j}) is zero; strict reconstruction needs all entries nonzero")
    elif np.any(np.abs(np.delete(a[pivot], pivot)) <= zero_tol):
        raise AssumptionViolated(f"pivot row {pivot} has a zero entry")
    rec = np.asarray(recover_from_moments(minor_table(K, pivot).as_moments(), regime).kernel)
    if d <= 6:
        subsets = list(all_subsets(d, nonempty=True))
        exhaustive = True
    else:
        rng = np.random.Generator(np.random.Philox(key=seed))
        subsets = []
        for _ in range(n_random):
            mask = 0
            while mask == 0:
                mask = int(rng.integers(1, 1 << d))
            subsets.append(_members(mask, d))
        exhaustive = False
    dev = max(abs(principal_minor(rec, s) - principal_minor(a, s)) for s in subsets)
    o4 = None
    if d >= 4:
        s4 = (0, 1, 2, 3)
        o4 = abs(principal_minor(rec, s4) - principal_minor(a, s4))
        dev = max(dev, o4)
    rec.setflags(write=False)
    return ReconstructionReport(rec, float(dev), len(subsets), exhaustive, o4, regime)


def minors_equal(A, B, tol: float = 1e-12) -> bool:
    """Exhaustive comparison of every principal minor (small d only)."""
    A = as_matrix(A)
    B = as_matrix(B)
    return all(abs(principal_minor(A, s) - principal_minor(B, s)) <= tol for s in all_subsets(A.shape[0]))

