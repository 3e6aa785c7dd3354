import json

import numpy as np
import pytest

from conftest import RUNNING
from dpplab.errors import ValidationError
from dpplab.experiments import (
    MIXED_D4,
    ZERO_D4,
    ExperimentSpec,
    builtin_specs,
    run,
    truth_matrix,
)


def small(recipe, truth=RUNNING, **kw):
    base = dict(name=f"t-{recipe}", recipe=recipe, truth=truth, T_grid=[500, 5000], n_reps=6, seed=3)
    base.update(kw)
    return ExperimentSpec.from_dict(base)


def test_spec_validation():
    with pytest.raises(ValidationError):
        small("consistency", T_grid=[5000, 500])
    with pytest.raises(ValidationError):
        small("consistency", n_reps=0)
    with pytest.raises(ValidationError):
        small("nope")
    with pytest.raises(ValidationError, match="unknown"):
        ExperimentSpec.from_dict({"name": "x", "recipe": "consistency", "truth": RUNNING,
                                  "T_grid": [10], "n_reps": 1, "colour": "red"})


def test_thresholds_are_data():
    s = small("consistency", thresholds={"sign_rate": 0.5})
    assert s.thresholds == {"sign_rate": 0.5, "min_abs_entry": 0.1}


def test_truth_forms(tmp_path):
    fam = truth_matrix({"family": "equicovariance", "d": 3, "theta": [0.5 ** 0.5, 0.2]})
    np.testing.assert_allclose(fam, 0.4 * np.eye(3) + 0.1, atol=1e-15)
    from dpplab.kernel import write_matrix

    write_matrix(tmp_path / "k.csv", RUNNING)
    assert np.array_equal(truth_matrix({"kernel_file": str(tmp_path / "k.csv")}), RUNNING)


def test_load_toml_and_json(tmp_path):
    toml = tmp_path / "s.toml"
    toml.write_text(
        'name = "c"\nrecipe = "consistency"\ntruth = [[0.5, 0.2, 0.2], [0.2, 0.5, 0.2], [0.2, 0.2, 0.5]]\n'
        "T_grid = [100, 1000]\nn_reps = 2\n[thresholds]\nsign_rate = 0.9\n"
    )
    s = ExperimentSpec.load(toml)
    assert s.thresholds["sign_rate"] == 0.9
    js = tmp_path / "s.json"
    js.write_text(json.dumps(s.to_dict()))
    assert ExperimentSpec.load(js) == s


def test_consistency_report_structure():
    rep = run(small("consistency", regime="robust"))
    assert len(rep.records) == 12
    assert {"median_error_strictly_decreasing", "sign_rate_at_largest_T"} == set(rep.verdicts)
    # aggregates are recomputable from the raw records
    errs = [r["max_abs_error"] for r in rep.records if r["T"] == 5000]
    assert rep.aggregates["5000"]["median_max_abs_error"] == np.median(errs)
    assert rep.environment["seed"] == 3


def test_strict_failures_are_recorded():
    rep = run(small("consistency", truth=ZERO_D4, T_grid=[200], n_reps=20))
    assert any(r["failed"] for r in rep.records)
    assert rep.aggregates["200"]["negative_argument_rate"] > 0


def test_determinism_and_thread_independence(tmp_path):
    a = run(small("consistency", regime="robust"))
    b = run(small("consistency", regime="robust", threads=3))
    pa, ra = a.write(tmp_path / "a")
    pb, rb = b.write(tmp_path / "b")
    assert ra.read_bytes() == rb.read_bytes()
    assert pa.read_bytes() == pb.read_bytes()


def test_seed_changes_records():
    a = run(small("consistency", regime="robust"))
    b = run(small("consistency", regime="robust", seed=4))
    assert a.records != b.records


def test_table_sampler_option():
    rep = run(small("consistency", regime="robust", sampler="table"))
    assert rep.environment["sampler"] == "table"


def test_normality_small():
    rep = run(small("normality", T_grid=[20_000], n_reps=40))
    assert set(rep.verdicts) == {"z_mean_window", "z_var_window", "covariance_match"}
    assert rep.aggregates["n_ok"] == 40
    assert len(rep.aggregates["limit_cov"]) == 6


def test_bound_validation_small():
    rep = run(small("bound_validation", epsilon=0.1, n_reps=10))
    assert rep.verdicts["T_star_ld_le_hoeffding"]["passed"]
    agg = rep.aggregates["500"]
    assert agg["ld_bound"] == min(1.0, agg["ld_bound_raw"])
    with pytest.raises(ValidationError):
        run(small("bound_validation"))


def test_pivot_invariance_small():
    rep = run(small("pivot_invariance", truth=MIXED_D4, T_grid=[10_000], n_reps=10))
    assert rep.aggregates["10000"]["success_rate"] >= 0.9


def test_robust_clip_small():
    rep = run(small("robust_clip", truth=ZERO_D4, T_grid=[10_000], n_reps=40, zero_entry=[1, 3]))
    assert rep.verdicts["exact_zero_recovered"]["passed"]
    assert 0 < rep.aggregates["10000"]["clip_frequency"] < 1
    with pytest.raises(ValidationError):
        run(small("robust_clip", truth=ZERO_D4, zero_entry=[0, 1]))


def test_builtins_cover_all_recipes():
    assert {s.recipe for s in builtin_specs().values()} == {
        "consistency", "normality", "bound_validation", "pivot_invariance", "robust_clip",
    }
