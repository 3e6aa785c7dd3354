"""Seeded Monte Carlo recipes checking the estimator's large-sample behaviour.

Each recipe takes an :class:`ExperimentSpec` and returns an
:class:`ExperimentReport` holding raw per-replication records, aggregates
recomputed from them, and threshold verdicts. Replication ``r`` at grid
position ``t`` draws from stream ``(t << 32) | r`` of the experiment seed, so
reports are reproducible and independent of execution order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .bounds import (
    BoundInputs,
    eta_modulus,
    hoeffding_bound,
    kl_exceeds_eta_sq,
    ld_bound,
    rho,
    sample_complexity,
)
from .constrained import get_family
from .errors import AmbiguousSign, EstimationError, ValidationError
from .estimator import (
    asymptotic_covariance,
    d_similarity_between,
    delta_method_covariance,
    estimate,
    recover_from_moments,
    vech,
    vech_indices,
)
from .exact import enumerate_distribution, exact_moment_covariance, exact_moment_vector
from .kernel import canonicalize, validate_kernel
from .sampler import GENERATOR, SeedSpec, sample_dpp, sample_from_exact

RECIPES = ("consistency", "normality", "bound_validation", "pivot_invariance", "robust_clip")

DEFAULT_THRESHOLDS: dict[str, dict[str, float]] = {
    "consistency": {"sign_rate": 0.99, "min_abs_entry": 0.1},
    "normality": {"mean_abs": 0.1, "var_low": 0.85, "var_high": 1.15, "cov_rel": 0.15},
    "bound_validation": {"delta": 0.05},
    "pivot_invariance": {"success_rate": 0.95, "min_T": 10_000, "tol_scale": 10.0},
    "robust_clip": {"clip_low": 0.45, "clip_high": 0.55, "exact_tol": 0.0},
}

_SPEC_KEYS = {
    "name", "recipe", "truth", "T_grid", "n_reps", "pivot", "regime", "seed",
    "sampler", "thresholds", "epsilon", "pivots", "zero_entry", "threads", "outputs",
}


@dataclass
class ExperimentSpec:
    name: str
    recipe: str
    truth: Any
    T_grid: list[int]
    n_reps: int
    pivot: int = 0
    regime: str = "strict"
    seed: int = 0
    sampler: str = "spectral"
    thresholds: dict[str, float] = field(default_factory=dict)
    epsilon: float | None = None
    pivots: list[int] = field(default_factory=lambda: [0, 1])
    # 0-based pair whose true entry is zero (robust_clip)
    zero_entry: tuple[int, int] | None = None
    threads: int = 1
    outputs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValidationError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        if self.n_reps < 1:
            raise ValidationError("n_reps must be at least 1")
        if not self.T_grid or any(b <= a for a, b in zip(self.T_grid, self.T_grid[1:])):
            raise ValidationError("T_grid must be non-empty and strictly increasing")
        if self.regime not in ("strict", "robust"):
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.sampler not in ("spectral", "table"):
            raise ValidationError(f"unknown sampler {self.sampler!r}")
        merged = dict(DEFAULT_THRESHOLDS[self.recipe])
        merged.update(self.thresholds)
        self.thresholds = merged
        if self.zero_entry is not None:
            self.zero_entry = tuple(self.zero_entry)

    def kernel(self) -> np.ndarray:
        return truth_matrix(self.truth)

    @classmethod
    def from_dict(cls, obj: dict) -> ExperimentSpec:
        unknown = set(obj) - _SPEC_KEYS
        if unknown:
            raise ValidationError(f"unknown experiment spec keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        return cls.from_dict(load_config(path))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["truth"] = self.truth.tolist() if isinstance(self.truth, np.ndarray) else self.truth
        return out


def load_config(path) -> dict:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(path.read_text())
    return json.loads(path.read_text())


def truth_matrix(truth) -> np.ndarray:
    """A kernel from a nested list, ``{"family": name, "theta": [...]}`` or ``{"kernel_file": path}``."""
    if isinstance(truth, dict):
        if "family" in truth:
            theta = np.asarray(truth["theta"], dtype=float)
            fam = get_family(truth["family"], int(truth["d"]))
            return validate_kernel(fam(theta)).matrix
        if "kernel_file" in truth:
            from .kernel import read_matrix

            return validate_kernel(read_matrix(truth["kernel_file"])).matrix
        raise ValidationError("truth dict needs 'family' or 'kernel_file'")
    return validate_kernel(np.asarray(truth, dtype=float)).matrix


@dataclass
class ExperimentReport:
    name: str
    recipe: str
    records: list[dict]
    aggregates: dict
    verdicts: dict[str, dict]
    environment: dict

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())

    def to_dict(self, include_records: bool = False) -> dict:
        out = {
            "name": self.name,
            "recipe": self.recipe,
            "passed": self.passed,
            "verdicts": self.verdicts,
            "aggregates": self.aggregates,
            "environment": self.environment,
        }
        if include_records:
            out["records"] = self.records
        return out

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / f"{self.name}.json"
        raw = out_dir / f"{self.name}.jsonl"
        report.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")
        raw.write_text("".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in self.records))
        return report, raw


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def _verdict(value, passed: bool, threshold=None) -> dict:
    return {"value": value, "threshold": threshold, "passed": bool(passed)}


def _env(spec: ExperimentSpec) -> dict:
    return {"version": __version__, "seed": spec.seed, "generator": GENERATOR, "sampler": spec.sampler}


def _stream(t_index: int, rep: int) -> int:
    return (t_index << 32) | rep


def _run_reps(spec: ExperimentSpec, fn: Callable[[int, int, int, np.ndarray], dict]) -> list[dict]:
    """Call ``fn(t_index, T, rep, X)`` for every grid point and replication, in a fixed order."""
    K = spec.kernel()
    table = enumerate_distribution(K) if spec.sampler == "table" else None

    def one(job):
        t_index, T, rep = job
        seed = SeedSpec(spec.seed, _stream(t_index, rep))
        X = sample_from_exact(table, T, seed) if table is not None else sample_dpp(K, T, seed)
        rec = fn(t_index, T, rep, X)
        rec.update({"T": T, "rep": rep})
        return rec

    jobs = [(ti, T, r) for ti, T in enumerate(spec.T_grid) for r in range(spec.n_reps)]
    if spec.threads > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(j) for j in jobs]
    return sorted(records, key=lambda r: (r["T"], r["rep"]))


def _by_T(records: list[dict], T: int) -> list[dict]:
    return [r for r in records if r["T"] == T]


# --- recipes ------------------------------------------------------------------------

def run_consistency(spec: ExperimentSpec) -> ExperimentReport:
    K = spec.kernel()
    target, _ = canonicalize(K, spec.pivot)
    target = target.matrix
    min_abs = spec.thresholds["min_abs_entry"]
    checked = np.abs(target) >= min_abs
    np.fill_diagonal(checked, False)

    def rep(ti, T, r, X):
        try:
            est = estimate(X, spec.pivot, spec.regime)
        except EstimationError as exc:
            return {"failed": True, "error": type(exc).__name__, "max_abs_error": None,
                    "rho": None, "signs_correct": False, "clip_count": 0}
        Kh = np.asarray(est.kernel)
        return {
            "failed": False,
            "error": None,
            "max_abs_error": float(np.max(np.abs(Kh - target))),
            "rho": rho(K, Kh),
            "signs_correct": bool(np.all(np.sign(Kh[checked]) == np.sign(target[checked]))),
            "clip_count": len(est.clip_events),
        }

    records = _run_reps(spec, rep)
    agg = {}
    medians = []
    for T in spec.T_grid:
        rs = _by_T(records, T)
        errs = [r["max_abs_error"] for r in rs if not r["failed"]]
        med = float(np.median(errs)) if errs else math.inf
        medians.append(med)
        agg[str(T)] = {
            "median_max_abs_error": med,
            "q90_max_abs_error": float(np.quantile(errs, 0.9)) if errs else math.inf,
            "sign_rate": float(np.mean([r["signs_correct"] for r in rs])),
            "negative_argument_rate": float(np.mean([r["failed"] or r["clip_count"] > 0 for r in rs])),
        }
    last = agg[str(spec.T_grid[-1])]
    verdicts = {
        "median_error_strictly_decreasing": _verdict(medians, all(b < a for a, b in zip(medians, medians[1:]))),
        "sign_rate_at_largest_T": _verdict(last["sign_rate"], last["sign_rate"] >= spec.thresholds["sign_rate"],
                                           spec.thresholds["sign_rate"]),
    }
    return ExperimentReport(spec.name, spec.recipe, records, agg, verdicts, _env(spec))


def run_normality(spec: ExperimentSpec) -> ExperimentReport:
    """Studentised errors against per-sample delta-method standard errors, and Monte Carlo
    covariance against the exact limit covariance.

    Covariance agreement is scored entrywise as ``|C_mc - C| / sqrt(C_ii C_jj)``,
    i.e. relative error on the diagonal and correlation-scale error off it;
    several limit covariances are exactly zero.
    """
    K = spec.kernel()
    T = spec.T_grid[0]
    target = canonicalize(K, spec.pivot)[0].matrix
    idx = vech_indices(K.shape[0])
    t_vech = vech(target)

    def rep(ti, T_, r, X):
        try:
            est = estimate(X, spec.pivot, "strict")
            cov = asymptotic_covariance(X, spec.pivot)
        except EstimationError as exc:
            return {"failed": True, "error": type(exc).__name__, "vech": None, "z": None}
        v = vech(est.kernel)
        se = np.sqrt(np.diag(cov.matrix) / T_)
        return {"failed": False, "error": None, "vech": v.tolist(), "z": ((v - t_vech) / se).tolist()}

    run_spec = spec if len(spec.T_grid) == 1 else _replace(spec, T_grid=[T])
    records = _run_reps(run_spec, rep)
    ok = [r for r in records if not r["failed"]]
    Z = np.array([r["z"] for r in ok])
    V = np.array([r["vech"] for r in ok])
    limit = delta_method_covariance(exact_moment_vector(K, spec.pivot), exact_moment_covariance(K, spec.pivot), T)
    C = limit.matrix
    C_mc = np.cov(V, rowvar=False, ddof=1) * T
    scale = np.sqrt(np.outer(np.diag(C), np.diag(C)))
    rel = np.abs(C_mc - C) / scale
    means = Z.mean(axis=0)
    variances = Z.var(axis=0, ddof=1)
    th = spec.thresholds
    agg = {
        "T": T,
        "n_ok": len(ok),
        "n_failed": len(records) - len(ok),
        "entries": [[i + 1, j + 1] for i, j in idx],
        "z_mean": means.tolist(),
        "z_var": variances.tolist(),
        "limit_cov": C.tolist(),
        "mc_cov": C_mc.tolist(),
        "cov_scaled_error": rel.tolist(),
        # plain relative error, undefined where the limit covariance is zero
        "cov_relative_error": np.where(
            np.abs(C) > 1e-12, np.abs(C_mc - C) / np.where(np.abs(C) > 1e-12, np.abs(C), 1.0), np.nan
        ).tolist(),
    }
    verdicts = {
        "z_mean_window": _verdict(means.tolist(), bool(np.all(np.abs(means) <= th["mean_abs"])), th["mean_abs"]),
        "z_var_window": _verdict(
            variances.tolist(),
            bool(np.all((variances >= th["var_low"]) & (variances <= th["var_high"]))),
            [th["var_low"], th["var_high"]],
        ),
        "covariance_match": _verdict(float(rel.max()), bool(rel.max() < th["cov_rel"]), th["cov_rel"]),
    }
    return ExperimentReport(spec.name, spec.recipe, records, agg, verdicts, _env(spec))


def run_bound_validation(spec: ExperimentSpec, epsilon: float | None = None) -> ExperimentReport:
    K = spec.kernel()
    eps = epsilon if epsilon is not None else spec.epsilon
    if eps is None:
        raise ValidationError("bound validation needs epsilon")
    pi0 = exact_moment_vector(K, spec.pivot)
    eta = eta_modulus(pi0, eps)

    def rep(ti, T, r, X):
        try:
            Kh = np.asarray(estimate(X, spec.pivot, "strict").kernel)
        except EstimationError as exc:
            # no estimate: counted as an exceedance
            return {"failed": True, "error": type(exc).__name__, "rho": None, "exceeds": True}
        d = rho(K, Kh)
        return {"failed": False, "error": None, "rho": d, "exceeds": d > eps}

    records = _run_reps(spec, rep)
    precondition = bool(np.all(kl_exceeds_eta_sq(pi0, eta.eta)))
    agg = {"epsilon": eps, "eta": eta.to_dict(), "kl_ge_eta_sq_all": precondition}
    valid, ordered = [], []
    for T in spec.T_grid:
        rs = _by_T(records, T)
        tail = float(np.mean([r["exceeds"] for r in rs]))
        inp = BoundInputs(pi0, eps, eta.eta, T)
        ld = ld_bound(inp)
        hf = hoeffding_bound(inp)
        agg[str(T)] = {
            "empirical_tail": tail,
            "ld_bound_raw": ld.raw,
            "ld_bound": ld.clamped,
            "hoeffding_raw": hf.raw,
            "hoeffding": hf.clamped,
        }
        valid.append(tail <= ld.raw)
        if precondition:
            ordered.append(ld.raw <= hf.raw)
    delta = spec.thresholds["delta"]
    t_ld = sample_complexity(pi0, eps, delta, "ld", eta=eta.eta)
    t_h = sample_complexity(pi0, eps, delta, "hoeffding", eta=eta.eta)
    agg.update({"delta": delta, "T_star_ld": t_ld, "T_star_hoeffding": t_h})
    verdicts = {
        "empirical_tail_le_ld_bound": _verdict([agg[str(T)]["empirical_tail"] for T in spec.T_grid], all(valid)),
        "ld_le_hoeffding_where_precondition": _verdict(precondition, all(ordered)),
        "T_star_ld_le_hoeffding": _verdict([t_ld, t_h], t_ld <= t_h),
    }
    return ExperimentReport(spec.name, spec.recipe, records, agg, verdicts, _env(spec))


def run_pivot_invariance(spec: ExperimentSpec) -> ExperimentReport:
    pivots = list(spec.pivots)
    if len(pivots) < 2:
        raise ValidationError("pivot invariance needs at least two pivots")

    def rep(ti, T, r, X):
        tol = spec.thresholds["tol_scale"] / math.sqrt(T)
        try:
            ests = [np.asarray(estimate(X, p, spec.regime).kernel) for p in pivots]
        except EstimationError as exc:
            return {"similar": False, "error": type(exc).__name__, "patterns": None}
        patterns = []
        for E in ests[1:]:
            try:
                D = d_similarity_between(ests[0], E, tol, pivot=pivots[0])
            except AmbiguousSign:
                D = None
            patterns.append(None if D is None else list(D.signs))
        return {"similar": all(p is not None for p in patterns), "error": None, "patterns": patterns}

    records = _run_reps(spec, rep)
    agg = {str(T): {"success_rate": float(np.mean([r["similar"] for r in _by_T(records, T)]))} for T in spec.T_grid}
    th = spec.thresholds
    checked = [T for T in spec.T_grid if T >= th["min_T"]]
    rates = [agg[str(T)]["success_rate"] for T in checked]
    verdicts = {
        "success_rate": _verdict(rates, bool(checked) and min(rates) >= th["success_rate"], th["success_rate"]),
    }
    return ExperimentReport(spec.name, spec.recipe, records, agg, verdicts, _env(spec))


def run_robust_clip(spec: ExperimentSpec) -> ExperimentReport:
    K = spec.kernel()
    if spec.zero_entry is None:
        raise ValidationError("robust_clip needs zero_entry")
    i, j = sorted(spec.zero_entry)
    if K[i, j] != 0:
        raise ValidationError(f"true entry ({i}, {j}) is {K[i, j]}, not zero")

    def rep(ti, T, r, X):
        est = estimate(X, spec.pivot, "robust")
        return {"clipped": (i, j) in est.clip_events, "value": float(est.kernel[i, j])}

    records = _run_reps(spec, rep)
    exact = recover_from_moments(exact_moment_vector(K, spec.pivot), "robust")
    exact_err = float(np.max(np.abs(np.asarray(exact.kernel) - canonicalize_robust(K, spec.pivot))))
    th = spec.thresholds
    agg = {}
    freqs = []
    for T in spec.T_grid:
        f = float(np.mean([r["clipped"] for r in _by_T(records, T)]))
        freqs.append(f)
        agg[str(T)] = {"clip_frequency": f}
    agg["exact_recovery_error"] = exact_err
    agg["exact_zero_value"] = float(exact.kernel[i, j])
    verdicts = {
        "clip_frequency_window": _verdict(
            freqs, all(th["clip_low"] <= f <= th["clip_high"] for f in freqs), [th["clip_low"], th["clip_high"]]
        ),
        "exact_zero_recovered": _verdict(agg["exact_zero_value"], agg["exact_zero_value"] == 0.0, 0.0),
        "exact_recovery": _verdict(exact_err, exact_err <= max(th["exact_tol"], 1e-12)),
    }
    return ExperimentReport(spec.name, spec.recipe, records, agg, verdicts, _env(spec))


def canonicalize_robust(K, pivot: int = 0) -> np.ndarray:
    """Pivot-positive representative when only the pivot row is guaranteed nonzero."""
    from .kernel import conjugate, pivot_sign_pattern

    return conjugate(K, pivot_sign_pattern(K, pivot))


def _replace(spec: ExperimentSpec, **kw) -> ExperimentSpec:
    d = spec.to_dict()
    d.update(kw)
    return ExperimentSpec.from_dict(d)


def run(spec: ExperimentSpec) -> ExperimentReport:
    return {
        "consistency": run_consistency,
        "normality": run_normality,
        "bound_validation": run_bound_validation,
        "pivot_invariance": run_pivot_invariance,
        "robust_clip": run_robust_clip,
    }[spec.recipe](spec)


# --- built-in recipes ---------------------------------------------------------------

RUNNING_EXAMPLE = [[0.5, 0.2, 0.2], [0.2, 0.5, 0.2], [0.2, 0.2, 0.5]]
MIXED_D4 = [
    [0.5, 0.2, 0.2, 0.2],
    [0.2, 0.5, -0.15, 0.15],
    [0.2, -0.15, 0.5, 0.2],
    [0.2, 0.15, 0.2, 0.5],
]
ZERO_D4 = [
    [0.5, 0.2, 0.2, 0.2],
    [0.2, 0.5, 0.15, 0.0],
    [0.2, 0.15, 0.5, 0.15],
    [0.2, 0.0, 0.15, 0.5],
]


def builtin_specs() -> dict[str, ExperimentSpec]:
    return {
        "consistency-d4": ExperimentSpec(
            "consistency-d4", "consistency", MIXED_D4, [1_000, 10_000, 100_000], 100, regime="robust", seed=11,
        ),
        "normality-d3": ExperimentSpec("normality-d3", "normality", RUNNING_EXAMPLE, [50_000], 2000, seed=12),
        "bounds-d3": ExperimentSpec(
            "bounds-d3", "bound_validation", RUNNING_EXAMPLE, [1_000, 10_000], 2000, seed=13, epsilon=0.1,
        ),
        "pivot-d4": ExperimentSpec("pivot-d4", "pivot_invariance", MIXED_D4, [10_000, 100_000], 200, seed=14),
        "robust-d4": ExperimentSpec(
            "robust-d4", "robust_clip", ZERO_D4, [100_000], 2000, regime="robust", seed=15, zero_entry=(1, 3),
        ),
    }
