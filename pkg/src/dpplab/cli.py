"""``dpplab`` command line: simulate, estimate, fit, bound, oracle, experiment.

Every subcommand prints exactly one JSON document on stdout; logs go to
stderr. Settings come from built-in defaults, then ``--config`` (TOML or
JSON), then explicit flags. Element indices on the command line and in files
are 1-based.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import bound_report
from .constrained import fit, get_family
from .errors import DppError, EstimationError, ExperimentFailed, NumericalSingularity, ValidationError
from .estimator import EstimatedKernel, asymptotic_covariance, estimate, project_to_valid, select_pivot
from .exact import exact_moment_vector, verify_minor_reconstruction
from .experiments import ExperimentSpec, builtin_specs, canonicalize_robust, load_config, run
from .kernel import canonicalize, read_matrix, validate_kernel, write_matrix
from .sampler import GENERATOR, read_sample, sample_dpp_with_stats, sample_from_exact, write_sample

log = logging.getLogger("dpplab")

ORACLE_TOL = 1e-10

DEFAULTS = {
    "simulate": {"T": 1000, "seed": 0, "format": None, "sampler": "spectral", "header": True},
    "estimate": {"pivot": "1", "regime": "strict", "covariance": False, "project": False, "format": "json"},
    "fit": {"pivot": "1", "regime": "strict", "case": "auto", "omega": "identity", "seed": 0,
            "theta_bounds": None, "restarts": 8},
    "bound": {"pivot": "1", "T": 1000, "delta": None, "eta_method": "lipschitz", "exponent": "printed"},
    "oracle": {"pivot": "1", "regime": "strict", "seed": 0},
    "experiment": {"spec": None, "name": None, "seed": None, "threads": None, "sampler": None},
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON file of settings; flags override it")
    p.add_argument("--out", help="output path (directory for experiment)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpplab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dpplab {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("simulate", help="draw an i.i.d. sample from a kernel", argument_default=S)
    _common(p)
    p.add_argument("--kernel", help="kernel matrix file (CSV or JSON)")
    p.add_argument("--T", type=int, help="number of observations")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["csv", "bin"])
    p.add_argument("--sampler", choices=["spectral", "table"])
    p.add_argument("--no-header", dest="header", action="store_false")

    p = sub.add_parser("estimate", help="moment estimate of the kernel from a sample", argument_default=S)
    _common(p)
    p.add_argument("--data", help="sample file (CSV or binary)")
    p.add_argument("--pivot", help="1-based pivot row or 'auto'")
    p.add_argument("--regime", choices=["strict", "robust"])
    p.add_argument("--covariance", action="store_true", help="include the delta-method covariance")
    p.add_argument("--project", action="store_true", help="include the nearest valid kernel")
    p.add_argument("--format", choices=["json", "csv"])

    p = sub.add_parser("fit", help="fit a parametric family to an estimate", argument_default=S)
    _common(p)
    p.add_argument("--kernel", help="estimate JSON or matrix file to fit")
    p.add_argument("--data", help="sample file; estimated first (required for --omega efficient)")
    p.add_argument("--family")
    p.add_argument("--case", choices=["1", "2", "auto"])
    p.add_argument("--omega", choices=["identity", "efficient"])
    p.add_argument("--pivot")
    p.add_argument("--regime", choices=["strict", "robust"])
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--theta-bounds", dest="theta_bounds", type=json.loads,
                   help='JSON list of [lo, hi] pairs, e.g. "[[0, 1], [-0.5, 1]]"')

    p = sub.add_parser("bound", help="deviation bounds and sample complexity for a true kernel",
                       argument_default=S)
    _common(p)
    p.add_argument("--kernel", help="true kernel file")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--pivot")
    p.add_argument("--eta-method", dest="eta_method", choices=["lipschitz", "bisection"])
    p.add_argument("--exponent", choices=["printed", "textbook"])

    p = sub.add_parser("oracle", help="exact-recovery and minor-reconstruction checks", argument_default=S)
    _common(p)
    p.add_argument("--kernel")
    p.add_argument("--pivot")
    p.add_argument("--regime", choices=["strict", "robust"])
    p.add_argument("--seed", type=int)

    p = sub.add_parser("experiment", help="run a Monte Carlo recipe", argument_default=S)
    _common(p)
    p.add_argument("--spec", help="experiment spec file (TOML or JSON)")
    p.add_argument("--name", help="built-in spec: " + ", ".join(builtin_specs()))
    p.add_argument("--seed", type=int)
    p.add_argument("--sampler", choices=["spectral", "table"])
    p.add_argument("--threads", type=int, help="worker threads (default: $DPPLAB_THREADS or 1)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    cmd = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    cfg = dict(DEFAULTS[cmd])
    cfg.update({"out": None, "kernel": None, "data": None})
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = load_config(config_path)
        except OSError as exc:
            raise ValidationError(f"{config_path}: {exc.strerror}") from exc
        except ValueError as exc:
            raise ValidationError(f"{config_path}: {exc}") from exc
        known = set(_dests(cmd))
        unknown = set(loaded) - known
        if unknown:
            raise ValidationError(f"{config_path}: unknown keys {sorted(unknown)} for '{cmd}'")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


def _dests(cmd: str) -> list[str]:
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[cmd]
    return [a.dest for a in sub._actions if a.dest not in ("help", "config")]


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _pivot(value, d: int) -> int | str:
    if str(value) == "auto":
        return "auto"
    try:
        p = int(value)
    except ValueError:
        raise ValidationError(f"pivot must be a 1-based integer or 'auto', got {value!r}") from None
    if not 1 <= p <= d:
        raise ValidationError(f"pivot {p} out of range 1..{d}")
    return p - 1


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_kernel_like(path) -> np.ndarray:
    """A matrix file, or an estimate JSON (its ``kernel`` field)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if isinstance(obj, dict) and "kernel" in obj:
            return EstimatedKernel.from_dict(obj).kernel
    return read_matrix(path)


# --- subcommands --------------------------------------------------------------------

def cmd_simulate(cfg: dict) -> dict:
    _require(cfg, "kernel", "out")
    K = validate_kernel(read_matrix(cfg["kernel"]))
    if cfg["sampler"] == "table":
        from .exact import enumerate_distribution

        X = sample_from_exact(enumerate_distribution(K), cfg["T"], cfg["seed"])
        clamps = 0
    else:
        X, stats = sample_dpp_with_stats(K, cfg["T"], cfg["seed"])
        clamps = stats.clamp_events
    write_sample(cfg["out"], X, cfg["format"], header=cfg["header"])
    log.info("wrote %d x %d sample to %s", X.shape[0], X.shape[1], cfg["out"])
    return {"d": K.d, "T": int(X.shape[0]), "seed": cfg["seed"], "generator": GENERATOR,
            "sampler": cfg["sampler"], "clamp_events": clamps, "out": str(cfg["out"])}


def cmd_estimate(cfg: dict) -> dict:
    _require(cfg, "data")
    X = read_sample(cfg["data"])
    pivot = _pivot(cfg["pivot"], X.shape[1])
    if pivot == "auto":
        pivot = select_pivot(X)
        log.info("auto pivot: %d", pivot + 1)
    est = estimate(X, pivot, cfg["regime"])
    doc = est.to_dict()
    doc["T"] = int(X.shape[0])
    if cfg["covariance"]:
        doc["asymptotic_covariance"] = asymptotic_covariance(X, pivot).to_dict()
    if cfg["project"]:
        doc["projected_kernel"] = project_to_valid(est).tolist()
    if cfg["out"]:
        if cfg["format"] == "csv":
            write_matrix(cfg["out"], est.kernel, "csv")
        else:
            _write_json(cfg["out"], doc)
    return doc


def cmd_fit(cfg: dict) -> dict:
    _require(cfg, "family")
    if cfg["data"] is None and cfg["kernel"] is None:
        raise ValidationError("fit needs --kernel or --data")
    X = None
    if cfg["data"] is not None:
        X = read_sample(cfg["data"])
        pivot = _pivot(cfg["pivot"], X.shape[1])
        if pivot == "auto":
            pivot = select_pivot(X)
        K_hat = estimate(X, pivot, cfg["regime"]).kernel
    else:
        K_hat = _load_kernel_like(cfg["kernel"])
    d = K_hat.shape[0]
    family = get_family(cfg["family"], d)
    if cfg["theta_bounds"] is not None:
        tb = tuple(tuple(float(v) for v in b) for b in cfg["theta_bounds"])
        if len(tb) != family.param_dim or any(len(b) != 2 or b[0] >= b[1] for b in tb):
            raise ValidationError(f"theta_bounds needs {family.param_dim} increasing [lo, hi] pairs")
        family = dataclasses.replace(family, bounds=tb)
    Omega = None
    if cfg["omega"] == "efficient":
        if X is None:
            raise ValidationError("--omega efficient needs --data (the weight is estimated from the sample)")
        C = asymptotic_covariance(X, pivot).matrix
        try:
            Omega = np.linalg.inv(C)
        except np.linalg.LinAlgError as exc:
            raise NumericalSingularity("asymptotic covariance is singular; use --omega identity") from exc
    case = cfg["case"] if cfg["case"] == "auto" else int(cfg["case"])
    res = fit(K_hat, family, case, Omega, n_restarts=cfg["restarts"], seed=cfg["seed"])
    doc = res.to_dict(family.param_names)
    doc["omega"] = cfg["omega"]
    if cfg["out"]:
        _write_json(cfg["out"], doc)
    return doc


def cmd_bound(cfg: dict) -> dict:
    _require(cfg, "kernel", "epsilon")
    K = validate_kernel(read_matrix(cfg["kernel"]))
    pivot = _pivot(cfg["pivot"], K.d)
    if pivot == "auto":
        raise ValidationError("bound needs an explicit pivot")
    pi0 = exact_moment_vector(K, pivot)
    try:
        rep = bound_report(pi0, cfg["epsilon"], cfg["T"], cfg["delta"], cfg["eta_method"], cfg["exponent"])
    except EstimationError as exc:
        # failures of the truth's own recovery map are bound failures here
        exc.exit_code = 5
        raise
    doc = rep.to_dict()
    if cfg["out"]:
        _write_json(cfg["out"], doc)
    return doc


def cmd_oracle(cfg: dict) -> dict:
    _require(cfg, "kernel")
    K = validate_kernel(read_matrix(cfg["kernel"]))
    pivot = _pivot(cfg["pivot"], K.d)
    if pivot == "auto":
        raise ValidationError("oracle needs an explicit pivot")
    regime = cfg["regime"]
    rec = verify_minor_reconstruction(K, pivot, regime, seed=cfg["seed"])
    from .estimator import recover_from_moments

    K_rec = np.asarray(recover_from_moments(exact_moment_vector(K, pivot), regime).kernel)
    target = canonicalize(K, pivot)[0].matrix if regime == "strict" else canonicalize_robust(K, pivot)
    recovery_dev = float(np.max(np.abs(K_rec - target)))
    passed = rec.max_deviation <= ORACLE_TOL and recovery_dev <= ORACLE_TOL
    doc = {
        "d": K.d,
        "pivot": pivot + 1,
        "regime": regime,
        "tolerance": ORACLE_TOL,
        "recovery_max_deviation": recovery_dev,
        "minor_max_deviation": rec.max_deviation,
        "order4_deviation": rec.order4_deviation,
        "n_subsets": rec.n_subsets,
        "exhaustive": rec.exhaustive,
        "passed": passed,
    }
    if cfg["out"]:
        _write_json(cfg["out"], doc)
    if not passed:
        _emit(doc)
        raise DppError(f"oracle deviations exceed {ORACLE_TOL}")
    return doc


def cmd_experiment(cfg: dict) -> dict:
    if (cfg["spec"] is None) == (cfg["name"] is None):
        raise ValidationError("experiment needs exactly one of --spec or --name")
    if cfg["spec"] is not None:
        spec = ExperimentSpec.load(cfg["spec"])
    else:
        specs = builtin_specs()
        if cfg["name"] not in specs:
            raise ValidationError(f"unknown built-in spec {cfg['name']!r}; known: {sorted(specs)}")
        spec = specs[cfg["name"]]
    threads = cfg["threads"] or int(os.environ.get("DPPLAB_THREADS", "0") or 0) or spec.threads
    overrides = {"threads": threads}
    if cfg["seed"] is not None:
        overrides["seed"] = cfg["seed"]
    if cfg["sampler"] is not None:
        overrides["sampler"] = cfg["sampler"]
    spec = dataclasses.replace(spec, **overrides)
    log.info("running %s (%s), %d reps x %s", spec.name, spec.recipe, spec.n_reps, spec.T_grid)
    report = run(spec)
    doc = report.to_dict()
    if cfg["out"]:
        paths = report.write(cfg["out"])
        doc["files"] = [str(p) for p in paths]
    if not report.passed:
        failed = sorted(k for k, v in report.verdicts.items() if not v["passed"])
        _emit(doc)
        raise ExperimentFailed(f"failed verdicts: {', '.join(failed)}")
    return doc


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "fit": cmd_fit,
    "bound": cmd_bound,
    "oracle": cmd_oracle,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.WARNING - 10 * min(args.verbose, 2))
    try:
        cfg = resolve(args)
        doc = COMMANDS[args.command](cfg)
    except DppError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if getattr(exc, "pair", None) is not None:
            i, j = exc.pair
            hint = "; rerun with --regime robust" if type(exc).__name__ == "NegativeCovArgument" else ""
            log.error("offending pair (1-based): %d,%d%s", i + 1, j + 1, hint)
        return exc.exit_code
    except OSError as exc:
        log.error("%s: %s", exc.filename or "", exc.strerror or exc)
        return 2
    _emit(doc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
