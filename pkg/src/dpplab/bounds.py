"""Deviation bounds for the moment estimator.

The chain is: if every coordinate of the moment vector is within ``eta`` of
the truth then the recovered kernel is within ``epsilon`` entrywise, so
``P[error > epsilon]`` is bounded by a union of per-coordinate Bernoulli tail
bounds at radius ``eta``.

``eta`` is found numerically and certified by random probing: the returned
value has been checked on a fixed set of perturbation directions, which is a
verification budget rather than a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import (
    BoundError,
    EstimationError,
    InvalidEta,
    NonPositiveEta,
    RefuseLargeD,
    TTooSmall,
)
from .estimator import DERIV_GUARD, FD_STEP, moment_jacobian, recover_matrix
from .kernel import ENUM_LIMIT, canonical_patterns, conjugate
from .moments import MomentVector

N_PROBES = 512
MIN_ETA = 1e-12
Exponent = Literal["printed", "textbook"]


def rho(K, Kp, enum_limit: int = ENUM_LIMIT) -> float:
    """``min_D |D K D - K'|_inf`` over the 2^(d-1) canonical sign patterns."""
    K = np.asarray(K, dtype=float)
    Kp = np.asarray(Kp, dtype=float)
    d = K.shape[0]
    if d > enum_limit:
        raise RefuseLargeD(d, enum_limit)
    return min(float(np.max(np.abs(conjugate(K, D) - Kp))) for D in canonical_patterns(d))


# --- modulus of continuity --------------------------------------------------------

@dataclass(frozen=True)
class EtaCertificate:
    n_probes: int
    max_deviation: float
    lipschitz: float | None
    halvings: int = 0


@dataclass(frozen=True)
class EtaResult:
    eta: float
    epsilon: float
    method: str
    certificate: EtaCertificate

    def to_dict(self) -> dict:
        c = self.certificate
        return {
            "eta": self.eta,
            "epsilon": self.epsilon,
            "method": self.method,
            "n_probes": c.n_probes,
            "max_deviation": c.max_deviation,
            "lipschitz": c.lipschitz,
            "halvings": c.halvings,
        }


def probe_directions(m: int, n: int, seed: int, jacobian=None) -> np.ndarray:
    """Unit sup-norm directions: Rademacher corners, scaled uniforms, and the
    corners aligned with each row of ``jacobian`` (worst cases of the linearisation)."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x70726F6265], dtype=np.uint64)))
    half = n // 2
    corners = np.where(rng.random((half, m)) < 0.5, -1.0, 1.0)
    u = rng.random((n - half, m)) * 2 - 1
    u /= np.max(np.abs(u), axis=1, keepdims=True)
    dirs = [corners, u]
    if jacobian is not None:
        s = np.sign(jacobian)
        s[s == 0] = 1.0
        dirs += [s, -s]
    return np.vstack(dirs)


def max_deviation(pi0: MomentVector, eta: float, directions: np.ndarray) -> float:
    """Largest ``|k(pi0 + eta u) - k(pi0)|_inf`` over the directions (inf where k fails)."""
    base = recover_matrix(pi0.values, pi0.d, pi0.pivot)
    worst = 0.0
    for u in directions:
        v = np.clip(pi0.values + eta * u, 0.0, 1.0)
        try:
            K = recover_matrix(v, pi0.d, pi0.pivot)
        except EstimationError:
            return math.inf
        worst = max(worst, float(np.max(np.abs(K - base))))
    return worst


def eta_modulus(
    pi0: MomentVector,
    epsilon: float,
    method: Literal["lipschitz", "bisection"] = "lipschitz",
    n_probes: int = N_PROBES,
    seed: int = 0,
    fd_step: float = FD_STEP,
    deriv_guard: float = DERIV_GUARD,
) -> EtaResult:
    """Radius on the moment vector that keeps the recovered kernel within ``epsilon``."""
    if epsilon <= 0:
        raise BoundError("epsilon must be positive")
    J = moment_jacobian(pi0, fd_step, deriv_guard)
    dirs = probe_directions(pi0.values.size, n_probes, seed, J)
    if method == "lipschitz":
        L = float(np.max(np.sum(np.abs(J), axis=1)))
        eta = epsilon / L
        halvings = 0
        dev = max_deviation(pi0, eta, dirs)
        while dev > epsilon:
            eta /= 2
            halvings += 1
            if eta < MIN_ETA:
                raise NonPositiveEta(f"eta collapsed below {MIN_ETA} for epsilon={epsilon}")
            dev = max_deviation(pi0, eta, dirs)
        return EtaResult(eta, epsilon, method, EtaCertificate(len(dirs), dev, L, halvings))
    if method == "bisection":
        lo, hi = 0.0, 1.0
        dev_lo = 0.0
        dev_hi = max_deviation(pi0, hi, dirs)
        if dev_hi <= epsilon:
            return EtaResult(hi, epsilon, method, EtaCertificate(len(dirs), dev_hi, None))
        for _ in range(60):
            mid = (lo + hi) / 2
            dev = max_deviation(pi0, mid, dirs)
            if dev <= epsilon:
                lo, dev_lo = mid, dev
            else:
                hi = mid
            if lo > 0 and hi - lo <= 1e-4 * lo:
                break
        if lo < MIN_ETA:
            raise NonPositiveEta(f"bisection found no positive eta for epsilon={epsilon}")
        return EtaResult(lo, epsilon, method, EtaCertificate(len(dirs), dev_lo, None))
    raise ValueError(f"unknown eta method {method!r}")


def probe_eta(pi0: MomentVector, eta: float, n: int = 10_000, seed: int = 12345) -> float:
    """Out-of-sample check: max deviation over ``n`` fresh directions at radius ``eta``."""
    return max_deviation(pi0, eta, probe_directions(pi0.values.size, n, seed))


# --- tail bounds ------------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    pi0: MomentVector
    epsilon: float
    eta: float
    T: int


@dataclass(frozen=True)
class BoundValue:
    raw: float
    coefficients: np.ndarray = field(repr=False)

    @property
    def clamped(self) -> float:
        return min(1.0, self.raw)


def _check_eta(eta: float) -> None:
    if not 0 < eta < 1:
        raise InvalidEta(f"eta must lie in (0, 1), got {eta!r}")


def _bern_kl(a: float, b: float) -> float:
    """KL(Bernoulli(a) || Bernoulli(b)) with 0 log 0 = 0."""
    out = 0.0
    if a > 0:
        out += a * math.log(a / b)
    if a < 1:
        out += (1 - a) * math.log((1 - a) / (1 - b))
    return out


def ld_coefficients(pi0: MomentVector, eta: float, exponent: Exponent = "printed") -> np.ndarray:
    """Per-coordinate exponent coefficient; ``inf`` marks coordinates contributing 0.

    ``printed`` is ``eta ln(eta/pi) + (1 - eta) ln((1 - eta)/(1 - pi))``.
    ``textbook`` is ``min KL(Bern(pi +/- eta) || Bern(pi))`` over the sides that
    stay inside [0, 1]; it is offered for comparison only.
    """
    _check_eta(eta)
    out = np.empty(pi0.values.size)
    for h, p in enumerate(pi0.values):
        if p <= 0.0 or p >= 1.0:
            out[h] = math.inf
        elif exponent == "printed":
            out[h] = _bern_kl(eta, p)
        elif exponent == "textbook":
            sides = [_bern_kl(q, p) for q in (p + eta, p - eta) if 0.0 <= q <= 1.0]
            out[h] = min(sides) if sides else math.inf
        else:
            raise ValueError(f"unknown exponent {exponent!r}")
    return out


def ld_bound(inputs: BoundInputs, exponent: Exponent = "printed") -> BoundValue:
    """``2 sum_h exp(-c_h T)``; degenerate coordinates (pi in {0, 1}) contribute 0."""
    c = ld_coefficients(inputs.pi0, inputs.eta, exponent)
    finite = np.isfinite(c)
    raw = float(2.0 * np.sum(np.exp(-c[finite] * inputs.T)))
    return BoundValue(raw, c)


def hoeffding_bound(inputs: BoundInputs) -> BoundValue:
    """``2 (d^2 - d + 1) exp(-2 eta^2 T)``."""
    _check_eta(inputs.eta)
    m = inputs.pi0.values.size
    c = np.full(m, 2.0 * inputs.eta**2)
    return BoundValue(float(2.0 * m * math.exp(-2.0 * inputs.eta**2 * inputs.T)), c)


def kl_exceeds_eta_sq(pi0: MomentVector, eta: float) -> np.ndarray:
    """Coordinatewise check that the printed coefficient is at least ``eta^2``."""
    return ld_coefficients(pi0, eta) >= eta**2


def sample_complexity(
    pi0: MomentVector,
    epsilon: float,
    delta: float,
    which: Literal["ld", "hoeffding"] = "ld",
    eta: float | None = None,
    eta_method: str = "lipschitz",
    exponent: Exponent = "printed",
) -> int:
    """Smallest T with bound(T) <= delta (exponential search, then bisection)."""
    if delta <= 0:
        raise BoundError("delta must be positive")
    if delta >= 1:
        return 1
    if eta is None:
        eta = eta_modulus(pi0, epsilon, eta_method).eta

    def bound(T: int) -> float:
        inp = BoundInputs(pi0, epsilon, eta, T)
        return ld_bound(inp, exponent).raw if which == "ld" else hoeffding_bound(inp).raw

    if which not in ("ld", "hoeffding"):
        raise ValueError(f"unknown bound {which!r}")
    if bound(1) <= delta:
        return 1
    hi = 2
    while bound(hi) > delta:
        hi *= 2
        if hi > 1 << 62:
            raise BoundError("bound does not fall below delta (a zero exponent coefficient?)")
    lo = hi // 2  # bound(lo) > delta
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if bound(mid) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def lil_radius(pi_h: float, T: float) -> float:
    """Law-of-iterated-logarithm envelope ``sqrt(pi (1 - pi)) sqrt(2 ln ln T / T)``."""
    if T < 3:
        raise TTooSmall(f"T={T} too small: ln ln T must be positive")
    if pi_h <= 0.0 or pi_h >= 1.0:
        return 0.0
    return math.sqrt(pi_h * (1 - pi_h)) * math.sqrt(2 * math.log(math.log(T)) / T)


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    eta: EtaResult
    T: int
    ld: BoundValue
    hoeffding: BoundValue
    T_star_ld: int | None
    T_star_hoeffding: int | None
    delta: float | None

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "eta": self.eta.eta,
            "method": self.eta.method,
            "T": self.T,
            "ld_bound_raw": self.ld.raw,
            "ld_bound": self.ld.clamped,
            "hoeffding_raw": self.hoeffding.raw,
            "hoeffding": self.hoeffding.clamped,
            "T_star_ld": self.T_star_ld,
            "T_star_hoeffding": self.T_star_hoeffding,
            "certificate": self.eta.to_dict(),
        }


def bound_report(
    pi0: MomentVector,
    epsilon: float,
    T: int,
    delta: float | None = None,
    eta_method: str = "lipschitz",
    exponent: Exponent = "printed",
) -> BoundReport:
    eta = eta_modulus(pi0, epsilon, eta_method)
    inp = BoundInputs(pi0, epsilon, eta.eta, T)
    t_ld = t_h = None
    if delta is not None:
        t_ld = sample_complexity(pi0, epsilon, delta, "ld", eta=eta.eta, exponent=exponent)
        t_h = sample_complexity(pi0, epsilon, delta, "hoeffding", eta=eta.eta)
    return BoundReport(epsilon, eta, T, ld_bound(inp, exponent), hoeffding_bound(inp), t_ld, t_h, delta)

