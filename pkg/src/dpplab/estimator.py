"""Closed-form moment estimator of the correlation kernel.

The estimate is assembled entry by entry from low-order inclusion frequencies:

* diagonal: marginal frequency of each item;
* magnitude of ``K_ij``: square root of ``-Cov(X_i, X_j)``;
* signs: positive along the pivot row, and for every other pair the sign of
  ``2 K_pi K_pj K_ij`` isolated from the 3x3 principal minor on
  ``{pivot, i, j}``.

Two regimes are supported. ``strict`` assumes every true entry is nonzero and
raises on a negative covariance argument. ``robust`` only needs the pivot row
to be fully nonzero; it clips the argument at zero and gives clipped pairs a
zero sign.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import (
    AmbiguousSign,
    DerivativeGuard,
    DimensionMismatch,
    EmptySample,
    NegativeCovArgument,
    RefuseLargeD,
    ValidationError,
    ZeroSignArgument,
)
from .kernel import ENUM_LIMIT, ZERO_TOL, canonical_patterns, conjugate
from .moments import MomentVector, layout

Regime = Literal["strict", "robust"]

FD_STEP = 1e-6
DERIV_GUARD = 1e-3
PROJECTION_EPS = 1e-6


@dataclass(frozen=True)
class SignDiagnostic:
    i: int
    j: int
    amplitude: float
    # None along the pivot row, where the sign is fixed rather than estimated
    argument: float | None
    sign: int


@dataclass(frozen=True)
class EstimatedKernel:
    """Point estimate of the pivot-positive representative.

    Not a :class:`~dpplab.kernel.CorrelationKernel`: finite-sample estimates
    may have eigenvalues outside (0, 1). See :func:`project_to_valid`.
    """

    kernel: np.ndarray
    pivot: int
    regime: str
    sign_diagnostics: tuple[SignDiagnostic, ...] = ()
    clip_events: tuple[tuple[int, int], ...] = ()

    @property
    def d(self) -> int:
        return self.kernel.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.kernel, dtype=dtype)

    def to_dict(self) -> dict:
        """JSON-ready dict; element indices are 1-based."""
        return {
            "d": self.d,
            "pivot": self.pivot + 1,
            "regime": self.regime,
            "kernel": self.kernel.tolist(),
            "sign_diagnostics": [
                {
                    "i": s.i + 1,
                    "j": s.j + 1,
                    "amplitude": s.amplitude,
                    "argument": s.argument,
                    "sign": s.sign,
                }
                for s in self.sign_diagnostics
            ],
            "clip_events": [[i + 1, j + 1] for i, j in self.clip_events],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> EstimatedKernel:
        diags = tuple(
            SignDiagnostic(s["i"] - 1, s["j"] - 1, s["amplitude"], s["argument"], s["sign"])
            for s in obj.get("sign_diagnostics", [])
        )
        clips = tuple((i - 1, j - 1) for i, j in obj.get("clip_events", []))
        K = np.array(obj["kernel"], dtype=float)
        K.setflags(write=False)
        return cls(K, obj["pivot"] - 1, obj["regime"], diags, clips)


def _sgn(x: float) -> int:
    return 1 if x > 0 else (-1 if x < 0 else 0)


def _recover(values: np.ndarray, d: int, pivot: int, robust: bool, diagnostics: bool = True):
    """Core of the closed form; returns (K, diagnostics, clips)."""
    lay = layout(d, pivot)
    m = values[:d]
    K = np.diag(m).astype(float)
    amp = np.zeros((d, d))
    diags = []
    clips = []
    npairs = len(lay.pairs)
    for k, (i, j) in enumerate(lay.pairs):
        arg = m[i] * m[j] - values[d + k]
        if arg < 0:
            if not robust:
                raise NegativeCovArgument(i, j, arg)
            clips.append((i, j))
            arg = 0.0
        amp[i, j] = amp[j, i] = math.sqrt(arg)
    p = pivot
    for j in range(d):
        if j == p:
            continue
        a = amp[p, j]
        s = 1 if a > 0 else 0
        K[p, j] = K[j, p] = s * a
        if diagnostics:
            diags.append(SignDiagnostic(min(p, j), max(p, j), a, None, s))
    for k, (i, j) in enumerate(lay.triples):
        a = amp[i, j]
        if a == 0:
            s, arg = 0, None
        else:
            t = values[d + npairs + k]
            arg = (
                t
                - m[p] * m[i] * m[j]
                + m[p] * a * a
                + m[i] * amp[p, j] ** 2
                + m[j] * amp[p, i] ** 2
            )
            s = _sgn(arg)
            if s == 0 and not robust:
                raise ZeroSignArgument(i, j)
        K[i, j] = K[j, i] = s * a
        if diagnostics:
            diags.append(SignDiagnostic(i, j, a, None if arg is None else float(arg), s))
    diags.sort(key=lambda s: (s.i, s.j))
    return K, tuple(diags), tuple(clips)


def recover_from_moments(pi: MomentVector, regime: Regime = "strict") -> EstimatedKernel:
    """Strict-regime recovery (``regime="robust"`` dispatches to :func:`recover_robust`)."""
    if regime not in ("strict", "robust"):
        raise ValueError(f"unknown regime {regime!r}")
    K, diags, clips = _recover(pi.values, pi.d, pi.pivot, robust=regime == "robust")
    K.setflags(write=False)
    return EstimatedKernel(K, pi.pivot, regime, diags, clips)


def recover_robust(pi: MomentVector) -> EstimatedKernel:
    return recover_from_moments(pi, "robust")


def recover_matrix(values: np.ndarray, d: int, pivot: int, robust: bool = False) -> np.ndarray:
    """Bare moment-to-kernel map, without diagnostics (used for derivatives and probes)."""
    return _recover(np.asarray(values, dtype=float), d, pivot, robust, diagnostics=False)[0]


# --- sample moments -------------------------------------------------------------

def check_sample(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise DimensionMismatch(f"sample must be a T x d matrix, got shape {X.shape}")
    if X.shape[0] == 0:
        raise EmptySample("sample has no rows")
    if X.dtype != np.uint8 and not np.all((X == 0) | (X == 1)):
        raise ValidationError("sample entries must be 0 or 1")
    return X


def indicator_products(X, pivot: int = 0) -> np.ndarray:
    """T x (d^2-d+1) matrix of the indicator products whose means form the moment vector."""
    X = check_sample(X).astype(float)
    lay = layout(X.shape[1], pivot)
    cols = [X]
    if lay.pairs:
        a, b = map(list, zip(*lay.pairs))
        cols.append(X[:, a] * X[:, b])
    if lay.triples:
        a, b = map(list, zip(*lay.triples))
        cols.append(X[:, [pivot]] * X[:, a] * X[:, b])
    return np.hstack(cols)


def sample_moments(X, pivot: int = 0, weights=None) -> MomentVector:
    """Frequencies with divisor T, or a weighted average when ``weights`` is given."""
    X = check_sample(X)
    T, d = X.shape
    lay = layout(d, pivot)
    Xf = X.astype(float)
    if weights is None:
        w = None
        first = Xf.sum(axis=0)
        second = Xf.T @ Xf
        third = (Xf * Xf[:, [pivot]]).T @ Xf
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (T,):
            raise DimensionMismatch("weights must have one entry per row")
        Xw = Xf * w[:, None]
        first = Xw.sum(axis=0)
        second = Xw.T @ Xf
        third = (Xw * Xf[:, [pivot]]).T @ Xf
    vals = np.empty(lay.size)
    vals[:d] = first
    for k, (i, j) in enumerate(lay.pairs):
        vals[d + k] = second[i, j]
    off = d + len(lay.pairs)
    for k, (i, j) in enumerate(lay.triples):
        vals[off + k] = third[i, j]
    if w is None:
        # counts are exact integers in float64, so a single division keeps entries exact ratios
        vals = vals / T
    return MomentVector(d, pivot, vals)


def select_pivot(X) -> int:
    """Row maximising the smallest absolute pairwise covariance; lowest index on ties."""
    X = check_sample(X).astype(float)
    T = X.shape[0]
    m = X.mean(axis=0)
    cov = X.T @ X / T - np.outer(m, m)
    A = np.abs(cov)
    np.fill_diagonal(A, np.inf)
    score = A.min(axis=1)
    return int(np.flatnonzero(score == score.max())[0])


def estimate(X, pivot: int | str = 0, regime: Regime = "strict", weights=None) -> EstimatedKernel:
    if pivot == "auto":
        pivot = select_pivot(X)
    return recover_from_moments(sample_moments(X, int(pivot), weights), regime)


def estimated_identified_set(est, enum_limit: int = ENUM_LIMIT) -> list[np.ndarray]:
    K = np.asarray(est, dtype=float)
    d = K.shape[0]
    if d > enum_limit:
        raise RefuseLargeD(d, enum_limit)
    return [conjugate(K, D) for D in canonical_patterns(d)]


def d_similarity_between(A, B, tol: float = 1e-10, pivot: int = 0, sign_tol: float = ZERO_TOL):
    """Sign pattern ``D`` with ``|D A D - B|_inf <= tol``, or ``None`` when there is none.

    Signs are propagated along the pivot row, so the pivot-row products
    ``A_pj * B_pj`` must exceed ``sign_tol`` in magnitude.
    """
    from .kernel import SignPattern

    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise DimensionMismatch(f"shapes {A.shape} and {B.shape} differ")
    d = A.shape[0]
    signs = [1] * d
    for j in range(d):
        if j == pivot:
            continue
        prod = A[pivot, j] * B[pivot, j]
        if abs(prod) <= sign_tol:
            raise AmbiguousSign(f"pivot-row product at column {j} is {prod:.3g}, within tolerance of zero")
        signs[j] = 1 if prod > 0 else -1
    D = SignPattern(tuple(signs)).canonical()
    if np.max(np.abs(conjugate(A, D) - B)) <= tol:
        return D
    return None


def project_to_valid(est, eps: float = PROJECTION_EPS) -> np.ndarray:
    """Nearest-spectrum valid kernel: eigenvalues clamped into ``[eps, 1 - eps]``."""
    K = np.asarray(est, dtype=float)
    w, V = np.linalg.eigh((K + K.T) / 2)
    w = np.clip(w, eps, 1 - eps)
    P = (V * w) @ V.T
    return (P + P.T) / 2


# --- delta-method asymptotics ---------------------------------------------------

def vech_indices(d: int) -> list[tuple[int, int]]:
    """Column-major lower triangle: (0,0), (1,0), ..., (d-1,0), (1,1), ..."""
    return [(i, j) for j in range(d) for i in range(j, d)]


def vech(M) -> np.ndarray:
    M = np.asarray(M)
    return np.array([M[i, j] for i, j in vech_indices(M.shape[0])])


@dataclass(frozen=True)
class AsymptoticCovariance:
    """Limit covariance of ``sqrt(T) * (vech(K_hat) - vech(K))``."""

    d: int
    T: int
    matrix: np.ndarray
    jacobian: np.ndarray = field(repr=False)

    @property
    def ordering(self) -> list[tuple[int, int]]:
        return vech_indices(self.d)

    def finite_sample(self) -> np.ndarray:
        return self.matrix / self.T

    def standard_errors(self) -> np.ndarray:
        """d x d matrix of standard errors of the entries at sample size T."""
        se = np.sqrt(np.clip(np.diag(self.matrix), 0, None) / self.T)
        out = np.zeros((self.d, self.d))
        for s, (i, j) in zip(se, self.ordering):
            out[i, j] = out[j, i] = s
        return out

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "ordering": [[i + 1, j + 1] for i, j in self.ordering],
            "matrix": self.matrix.tolist(),
        }


def moment_jacobian(pi: MomentVector, fd_step: float = FD_STEP, deriv_guard: float = DERIV_GUARD) -> np.ndarray:
    """Central-difference Jacobian of vech(k(pi)) with respect to pi."""
    base = recover_matrix(pi.values, pi.d, pi.pivot)
    off = base[~np.eye(pi.d, dtype=bool)]
    if np.any(np.abs(off) < deriv_guard):
        raise DerivativeGuard(
            f"smallest off-diagonal amplitude {np.min(np.abs(off)):.3g} below guard {deriv_guard}"
        )
    idx = vech_indices(pi.d)
    rows, cols = zip(*idx)
    J = np.empty((len(idx), pi.values.size))
    for h, v in enumerate(pi.values):
        step = fd_step * max(abs(v), 1e-4)
        up = pi.values.copy()
        dn = pi.values.copy()
        up[h] += step
        dn[h] -= step
        Kp = recover_matrix(up, pi.d, pi.pivot)
        Km = recover_matrix(dn, pi.d, pi.pivot)
        J[:, h] = (Kp[rows, cols] - Km[rows, cols]) / (2 * step)
    return J


def delta_method_covariance(pi: MomentVector, moment_cov, T: int = 1, **kw) -> AsymptoticCovariance:
    """``J Cov(g) J'`` for per-observation moment covariance ``moment_cov``."""
    J = moment_jacobian(pi, **kw)
    C = J @ np.asarray(moment_cov, dtype=float) @ J.T
    C = (C + C.T) / 2
    C.setflags(write=False)
    return AsymptoticCovariance(pi.d, int(T), C, J)


def sample_moment_covariance(X, pivot: int = 0) -> np.ndarray:
    """Per-observation covariance of the indicator products, divisor T."""
    G = indicator_products(X, pivot)
    g = G.mean(axis=0)
    return G.T @ G / G.shape[0] - np.outer(g, g)


def asymptotic_covariance(X, pivot: int = 0, fd_step: float = FD_STEP, deriv_guard: float = DERIV_GUARD) -> AsymptoticCovariance:
    """Delta-method covariance of the strict estimate computed from the sample ``X``.

    The second moments of the indicator products are not functions of the
    moment vector alone, so the raw sample is required.
    """
    X = check_sample(X)
    pi = sample_moments(X, pivot)
    if np.any(pi.marginals[:, None] * pi.marginals[None, :] - _pair_matrix(pi) < 0):
        raise DerivativeGuard("a covariance argument is negative; clipping would be active")
    return delta_method_covariance(
        pi, sample_moment_covariance(X, pivot), T=X.shape[0], fd_step=fd_step, deriv_guard=deriv_guard
    )


def _pair_matrix(pi: MomentVector) -> np.ndarray:
    P = np.diag(pi.marginals ** 2)
    for i, j in pi.layout.pairs:
        P[i, j] = P[j, i] = pi.pair(i, j)
    return P


def to_json(est: EstimatedKernel, **extra) -> str:
    obj = est.to_dict()
    obj.update(extra)
    return json.dumps(obj, indent=2, sort_keys=False)
