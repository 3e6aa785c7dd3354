"""Parametric kernel families and two-step moment fitting.

A fit takes the unconstrained estimate and solves

    min_theta  r(theta)' Omega r(theta),   r = vech(K_hat) - vech(K(theta))

by Nelder-Mead with multi-start. ``fit_case2`` additionally minimises over
the 2^(d-1) sign patterns D applied to ``K_hat``, for families that are not
closed under sign flips.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import FitError, NoAdmissibleStart, RefuseLargeD, ValidationError
from .estimator import vech
from .kernel import EIG_TOL, ENUM_LIMIT, SignPattern, canonical_patterns, conjugate

N_RESTARTS = 8
MAX_ITER = 2000
XATOL = 1e-8
TIE_TOL = 1e-12


@dataclass(frozen=True)
class ParametricFamily:
    name: str
    d: int
    param_names: tuple[str, ...]
    map: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    bounds: tuple[tuple[float, float], ...]
    d_closure: bool
    # moment-style starting value computed from a target matrix
    initial_guess: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    extra_admissible: Callable[[np.ndarray], bool] | None = field(default=None, repr=False)

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    def __call__(self, theta) -> np.ndarray:
        return self.map(np.asarray(theta, dtype=float))

    def in_box(self, theta) -> bool:
        return all(lo < t < hi for t, (lo, hi) in zip(theta, self.bounds))

    def admissible(self, theta, eig_tol: float = EIG_TOL) -> bool:
        theta = np.asarray(theta, dtype=float)
        if not self.in_box(theta):
            return False
        if self.extra_admissible is not None and not self.extra_admissible(theta):
            return False
        eig = np.linalg.eigvalsh(self(theta))
        return bool(eig[0] > eig_tol and eig[-1] < 1 - eig_tol)


def family_equicovariance(d: int) -> ParametricFamily:
    """``sigma^2 (1 - rho) I + sigma^2 rho ee'`` with theta = (sigma, rho)."""
    if d < 3:
        raise ValidationError("the equicovariance family needs d >= 3")
    eye = np.eye(d)
    ones = np.ones((d, d))

    def kmap(theta):
        s, r = theta
        return s * s * (1 - r) * eye + s * s * r * ones

    def guess(M):
        s2 = float(np.mean(np.diag(M)))
        off = float(np.mean(M[~np.eye(d, dtype=bool)]))
        return np.array([np.sqrt(s2), off / s2 if s2 > 0 else 0.0])

    return ParametricFamily(
        "equicovariance", d, ("sigma", "rho"), kmap,
        ((0.0, 1.0), (-1.0 / (d - 1), 1.0)),
        d_closure=False, initial_guess=guess,
    )


def equicovariance_eigenvalues(sigma: float, rho: float, d: int) -> np.ndarray:
    """Ascending spectrum: sigma^2 (1 - rho) with multiplicity d - 1 and sigma^2 (1 + (d - 1) rho)."""
    a = sigma**2 * (1 - rho)
    b = sigma**2 * (1 + (d - 1) * rho)
    return np.sort(np.array([a] * (d - 1) + [b]))


def family_toeplitz(d: int) -> ParametricFamily:
    """``K_ij = a_|i-j|`` with theta = (a_0, ..., a_{d-1})."""
    if d < 2:
        raise ValidationError("the Toeplitz family needs d >= 2")
    lag = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))

    def kmap(theta):
        return np.asarray(theta)[lag]

    def guess(M):
        return np.array([np.mean(np.diag(M, k)) for k in range(d)])

    bounds = ((0.0, 1.0),) + ((-1.0, 1.0),) * (d - 1)
    return ParametricFamily(
        "toeplitz", d, tuple(f"a{k}" for k in range(d)), kmap, bounds,
        d_closure=False, initial_guess=guess,
    )


def family_full(d: int) -> ParametricFamily:
    """Saturated family: theta is vech(K) itself (column-major lower triangle)."""
    from .estimator import vech_indices

    idx = vech_indices(d)
    rows, cols = map(np.array, zip(*idx))
    names = tuple(f"k{i + 1}{j + 1}" for i, j in idx)

    def kmap(theta):
        M = np.zeros((d, d))
        M[rows, cols] = theta
        M[cols, rows] = theta
        return M

    bounds = tuple((0.0, 1.0) if i == j else (-1.0, 1.0) for i, j in idx)
    return ParametricFamily("full", d, names, kmap, bounds, d_closure=True, initial_guess=vech)


FAMILIES: dict[str, Callable[[int], ParametricFamily]] = {
    "equicovariance": family_equicovariance,
    "toeplitz": family_toeplitz,
    "full": family_full,
}


def register_family(name: str, factory: Callable[[int], ParametricFamily]) -> None:
    FAMILIES[name] = factory


def get_family(name: str, d: int) -> ParametricFamily:
    try:
        return FAMILIES[name](d)
    except KeyError:
        raise ValidationError(f"unknown family {name!r}; known: {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class FitResult:
    family: str
    theta_hat: np.ndarray
    K_of_theta_hat: np.ndarray
    objective_value: float
    D_hat: SignPattern | None
    iterations: int
    restarts: int
    converged: bool

    def to_dict(self, param_names: Sequence[str] | None = None) -> dict:
        out = {
            "family": self.family,
            "theta_hat": self.theta_hat.tolist(),
            "K_of_theta_hat": self.K_of_theta_hat.tolist(),
            "objective_value": self.objective_value,
            "D_hat": list(self.D_hat.signs) if self.D_hat is not None else None,
            "iterations": self.iterations,
            "restarts": self.restarts,
            "converged": self.converged,
        }
        if param_names is not None:
            out["param_names"] = list(param_names)
        return out


def _starts(family: ParametricFamily, target: np.ndarray, n: int, seed: int) -> list[np.ndarray]:
    out = []
    if family.initial_guess is not None:
        g = np.asarray(family.initial_guess(target), dtype=float)
        if family.admissible(g):
            out.append(g)
    lo = np.array([b[0] for b in family.bounds])
    hi = np.array([b[1] for b in family.bounds])
    halton = qmc.Halton(d=family.param_dim, scramble=True, seed=seed)
    for _ in range(64):
        for pt in halton.random(n):
            theta = lo + (hi - lo) * pt
            if family.admissible(theta):
                out.append(theta)
            if len(out) >= n:
                return out
    if not out:
        raise NoAdmissibleStart(f"no admissible start found for family {family.name!r}")
    return out


def _objective(family: ParametricFamily, target_vech: np.ndarray, W: np.ndarray):
    def f(theta):
        if not family.admissible(theta):
            return np.inf
        r = target_vech - vech(family(theta))
        return float(r @ W @ r)
    return f


def fit_case1(
    K_hat,
    family: ParametricFamily,
    Omega=None,
    n_restarts: int = N_RESTARTS,
    max_iter: int = MAX_ITER,
    xatol: float = XATOL,
    seed: int = 0,
) -> FitResult:
    """Weighted least squares of vech(K(theta)) on vech(K_hat) over admissible theta."""
    K_hat = np.asarray(K_hat, dtype=float)
    if K_hat.shape != (family.d, family.d):
        raise ValidationError(f"K_hat shape {K_hat.shape} does not match family dimension {family.d}")
    m = family.d * (family.d + 1) // 2
    W = np.eye(m) if Omega is None else np.asarray(Omega, dtype=float)
    if W.shape != (m, m):
        raise ValidationError(f"Omega must be {m} x {m}")
    f = _objective(family, vech(K_hat), W)
    best = None
    total_iter = 0
    for x0 in _starts(family, K_hat, n_restarts, seed):
        x, fx, it, ok = x0, f(x0), 0, False
        # restarting from the optimum rebuilds a fresh simplex and guards against collapse
        for _ in range(3):
            res = minimize(
                f, x, method="Nelder-Mead",
                options={"maxiter": max_iter, "xatol": xatol, "fatol": 1e-18, "adaptive": family.param_dim > 3},
            )
            it += res.nit
            if res.fun > fx:
                break
            moved = np.max(np.abs(res.x - x))
            x, fx, ok = res.x, float(res.fun), bool(res.success)
            if moved <= xatol:
                break
        total_iter += it
        key = (fx, tuple(x))
        if best is None or fx < best[0][0] - TIE_TOL or (abs(fx - best[0][0]) <= TIE_TOL and key[1] < best[0][1]):
            best = (key, x, fx, ok)
    _, x, fx, ok = best
    if not np.isfinite(fx):
        raise FitError(f"optimiser never reached an admissible point for family {family.name!r}")
    return FitResult(family.name, np.asarray(x), family(x), fx, None, total_iter, n_restarts, ok)


def fit_case2(
    K_hat,
    family: ParametricFamily,
    Omega=None,
    enum_limit: int = ENUM_LIMIT,
    **kw,
) -> FitResult:
    """Joint minimisation over sign patterns D (applied to K_hat) and theta.

    Ties within ``TIE_TOL`` go to the earlier pattern in
    :func:`~dpplab.kernel.canonical_patterns` order, identity first.
    """
    K_hat = np.asarray(K_hat, dtype=float)
    d = K_hat.shape[0]
    if d > enum_limit:
        raise RefuseLargeD(d, enum_limit)
    best = None
    total_iter = 0
    for D in canonical_patterns(d):
        W = Omega
        if Omega is not None:
            # vech(D K D) = S vech(K) with S = diag(vech(D D')), so its weight becomes S Omega S
            s = vech(np.outer(D.vector, D.vector))
            W = np.asarray(Omega, dtype=float) * np.outer(s, s)
        r = fit_case1(conjugate(K_hat, D), family, W, **kw)
        total_iter += r.iterations
        if best is None or r.objective_value < best.objective_value - TIE_TOL:
            best = FitResult(r.family, r.theta_hat, r.K_of_theta_hat, r.objective_value, D,
                             r.iterations, r.restarts, r.converged)
    return FitResult(best.family, best.theta_hat, best.K_of_theta_hat, best.objective_value,
                     best.D_hat, total_iter, best.restarts, best.converged)


def fit(K_hat, family: ParametricFamily, case: int | str = "auto", Omega=None, **kw) -> FitResult:
    if case == "auto":
        case = 1 if family.d_closure else 2
    if int(case) == 1:
        return fit_case1(K_hat, family, Omega, **kw)
    if int(case) == 2:
        return fit_case2(K_hat, family, Omega, **kw)
    raise ValidationError(f"case must be 1, 2 or 'auto', got {case!r}")


def constrained_identified_set(
    family: ParametricFamily,
    theta0,
    tol: float = 1e-10,
    theta_tol: float = 1e-6,
    enum_limit: int = ENUM_LIMIT,
    **kw,
) -> list[np.ndarray]:
    """Parameters whose kernels are sign-flip conjugates of ``K(theta0)``.

    One exact-target fit per sign pattern; a fit counts when its objective is
    at most ``tol``. Solutions closer than ``theta_tol`` are merged.
    """
    d = family.d
    if d > enum_limit:
        raise RefuseLargeD(d, enum_limit)
    K0 = family(theta0)
    out: list[np.ndarray] = []
    for D in canonical_patterns(d):
        r = fit_case1(conjugate(K0, D), family, **kw)
        if r.objective_value <= tol and not any(np.max(np.abs(r.theta_hat - t)) <= theta_tol for t in out):
            out.append(r.theta_hat)
    return out
