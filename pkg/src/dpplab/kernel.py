"""Kernel matrices, their validation, the L-ensemble duality and sign-flip algebra.

Indices are 0-based throughout the Python API. The CLI and on-disk formats that
name ground-set elements use 1-based labels.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    NotSymmetric,
    NumericalSingularity,
    RefuseLargeD,
    SpectrumOutOfRange,
    ValidationError,
    ZeroInPivotRow,
)

EIG_TOL = 1e-10
SYM_TOL = 1e-9
ZERO_TOL = 1e-12
ENUM_LIMIT = 20


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CorrelationKernel:
    """Validated correlation kernel: symmetric, spectrum inside (0, 1).

    Build through :func:`validate_kernel`; the stored matrix is read-only.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


@dataclass(frozen=True)
class LEnsemble:
    matrix: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


@dataclass(frozen=True)
class SignPattern:
    """Diagonal of a +/-1 matrix D; canonical patterns have ``signs[0] == +1``."""

    signs: tuple[int, ...]

    def __post_init__(self):
        if any(s not in (-1, 1) for s in self.signs):
            raise ValidationError(f"sign pattern entries must be +1 or -1, got {self.signs}")

    @classmethod
    def identity(cls, d: int) -> SignPattern:
        return cls((1,) * d)

    @property
    def d(self) -> int:
        return len(self.signs)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.signs, dtype=float)

    @property
    def is_canonical(self) -> bool:
        return self.signs[0] == 1

    def canonical(self) -> SignPattern:
        return self if self.is_canonical else SignPattern(tuple(-s for s in self.signs))


def as_matrix(M) -> np.ndarray:
    a = np.asarray(M, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix has non-finite entries")
    return a


def symmetrize(M, sym_tol: float = SYM_TOL) -> np.ndarray:
    a = as_matrix(M)
    scale = max(1.0, float(np.max(np.abs(a))))
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > sym_tol * scale:
        raise NotSymmetric(f"matrix asymmetric by {asym:.3g} (tolerance {sym_tol * scale:.3g})")
    return (a + a.T) / 2


def validate_kernel(M, eig_tol: float = EIG_TOL, sym_tol: float = SYM_TOL) -> CorrelationKernel:
    if isinstance(M, CorrelationKernel):
        return M
    a = symmetrize(M, sym_tol)
    if a.shape[0] < 1:
        raise DimensionMismatch("empty kernel")
    eig = np.linalg.eigvalsh(a)
    if eig[0] <= eig_tol:
        raise SpectrumOutOfRange(eig[0])
    if eig[-1] >= 1 - eig_tol:
        raise SpectrumOutOfRange(eig[-1])
    diag = np.diag(a)
    if np.any(diag <= 0) or np.any(diag >= 1):
        raise SpectrumOutOfRange(diag[(diag <= 0) | (diag >= 1)][0], "diagonal entry outside (0, 1)")
    return CorrelationKernel(_frozen(a), _frozen(eig))


def validate_ensemble(M, eig_tol: float = EIG_TOL, sym_tol: float = SYM_TOL) -> LEnsemble:
    if isinstance(M, LEnsemble):
        return M
    a = symmetrize(M, sym_tol)
    eig = np.linalg.eigvalsh(a)
    if eig[0] <= eig_tol:
        raise SpectrumOutOfRange(eig[0], f"L-ensemble eigenvalue {eig[0]!r} is not positive")
    return LEnsemble(_frozen(a), _frozen(eig))


def k_to_sigma(K) -> LEnsemble:
    """L-ensemble ``K (I - K)^{-1}``."""
    K = validate_kernel(K)
    a = K.matrix
    eye = np.eye(K.d)
    if np.linalg.cond(eye - a) > 1e14:
        raise NumericalSingularity("I - K is numerically singular")
    # K and (I-K)^{-1} commute, so solving from the right keeps the product symmetric up to roundoff
    S = np.linalg.solve(eye - a, a)
    return validate_ensemble((S + S.T) / 2)


def sigma_to_k(S) -> CorrelationKernel:
    """Correlation kernel ``Sigma (I + Sigma)^{-1}``."""
    S = validate_ensemble(S)
    a = S.matrix
    K = np.linalg.solve(np.eye(S.d) + a, a)
    return validate_kernel((K + K.T) / 2)


def _as_pattern(D, d: int) -> SignPattern:
    if not isinstance(D, SignPattern):
        D = SignPattern(tuple(int(s) for s in D))
    if D.d != d:
        raise DimensionMismatch(f"sign pattern of length {D.d} for a {d}x{d} matrix")
    return D


def conjugate(M, D) -> np.ndarray:
    """Entrywise ``M_ij * s_i * s_j`` for any square matrix (no validation of M)."""
    a = as_matrix(M)
    s = _as_pattern(D, a.shape[0]).vector
    return a * np.outer(s, s)


def d_conjugate(K, D) -> CorrelationKernel:
    K = validate_kernel(K)
    return validate_kernel(conjugate(K.matrix, D))


def pivot_sign_pattern(M, pivot: int = 0, zero_tol: float = ZERO_TOL) -> SignPattern:
    """Pattern that makes row ``pivot`` of ``D M D`` positive, with ``signs[pivot] = +1``.

    The result is normalised to ``signs[0] = +1``; sign patterns are only
    defined up to a global flip.
    """
    a = as_matrix(M)
    row = a[pivot]
    signs = []
    for j, v in enumerate(row):
        if j == pivot:
            signs.append(1)
        elif abs(v) <= zero_tol:
            raise ZeroInPivotRow(j)
        else:
            signs.append(1 if v > 0 else -1)
    return SignPattern(tuple(signs)).canonical()


def canonicalize(K, pivot: int = 0, zero_tol: float = ZERO_TOL) -> tuple[CorrelationKernel, SignPattern]:
    K = validate_kernel(K)
    D = pivot_sign_pattern(K.matrix, pivot, zero_tol)
    return validate_kernel(conjugate(K.matrix, D)), D


def canonical_patterns(d: int) -> Iterator[SignPattern]:
    """All 2^(d-1) patterns with first sign +1, in lexicographic order (+1 before -1)."""
    for tail in itertools.product((1, -1), repeat=d - 1):
        yield SignPattern((1,) + tail)


def identified_set(K, enum_limit: int = ENUM_LIMIT) -> list[CorrelationKernel]:
    K = validate_kernel(K)
    if K.d > enum_limit:
        raise RefuseLargeD(K.d, enum_limit)
    return [validate_kernel(conjugate(K.matrix, D)) for D in canonical_patterns(K.d)]


def principal_minor(M, s: Sequence[int]) -> float:
    """Determinant of the principal submatrix on ``s``; 1 for the empty set."""
    a = np.asarray(M, dtype=float)
    idx = sorted(s)
    if not idx:
        return 1.0
    if len(idx) == 1:
        return float(a[idx[0], idx[0]])
    return float(np.linalg.det(a[np.ix_(idx, idx)]))


def all_subsets(d: int, nonempty: bool = False) -> Iterator[tuple[int, ...]]:
    start = 1 if nonempty else 0
    for r in range(start, d + 1):
        yield from itertools.combinations(range(d), r)


# --- matrix files ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def write_matrix(path, M, fmt: str | None = None) -> None:
    a = np.asarray(M, dtype=float)
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    if fmt == "json":
        # floats are emitted by json with shortest round-trip repr
        path.write_text(json.dumps({"d": a.shape[0], "entries": a.tolist()}) + "\n")
    elif fmt == "csv":
        path.write_text("".join(",".join(_fmt(x) for x in row) + "\n" for row in a))
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


def read_matrix(path) -> np.ndarray:
    """Read a square matrix from CSV (no header) or ``{"d": n, "entries": [...]}`` JSON."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
            a = np.array(obj["entries"], dtype=float)
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed matrix JSON ({exc})") from exc
        if "d" in obj and a.shape != (obj["d"], obj["d"]):
            raise ValidationError(f"{path}: declared d={obj['d']} but entries have shape {a.shape}")
        return as_matrix(a)
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if len({len(r) for r in rows}) > 1:
        raise ValidationError(f"{path}: ragged rows")
    try:
        return as_matrix(np.array(rows, dtype=float))
    except DimensionMismatch as exc:
        raise ValidationError(f"{path}: {exc}") from exc
