import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import RUNNING, random_kernel
from dpplab.errors import AssumptionViolated, RefuseLargeD
from dpplab.exact import (
    ExactDistribution,
    enumerate_distribution,
    exact_moment_covariance,
    exact_moment_vector,
    inclusion_prob,
    minor_table,
    minors_equal,
    order3_expansion,
    pmf_k,
    pmf_sigma,
    verify_minor_reconstruction,
)
from dpplab.kernel import SignPattern, all_subsets, conjugate, k_to_sigma, principal_minor
from dpplab.moments import moment_size

K2 = np.array([[0.5, 0.25], [0.25, 0.5]])


def test_pmf_sigma_examples():
    assert pmf_sigma(np.eye(2), (0, 1)) == pytest.approx(0.25, abs=1e-15)
    S = [[5 / 3, 4 / 3], [4 / 3, 5 / 3]]
    assert pmf_sigma(S, ()) == pytest.approx(0.1875, abs=1e-15)


def test_pmf_k_examples():
    assert pmf_k(K2, (0,)) == pytest.approx(0.3125, abs=1e-15)
    assert pmf_k(K2, (0, 1)) == pytest.approx(0.1875, abs=1e-15)


def test_pmf_forms_agree_d6(rng):
    K = random_kernel(6, rng)
    S = k_to_sigma(K)
    for s in all_subsets(6):
        assert pmf_k(K, s) == pytest.approx(pmf_sigma(S, s), abs=1e-12)


def test_pmf_sigma_sums_to_one(rng):
    A = rng.normal(size=(5, 5))
    S = A @ A.T + np.eye(5)
    assert sum(pmf_sigma(S, s) for s in all_subsets(5)) == pytest.approx(1.0, abs=1e-12)


def test_inclusion_examples():
    assert inclusion_prob(RUNNING, (2,)) == 0.5
    assert inclusion_prob(K2, (0, 1)) == pytest.approx(0.1875, abs=1e-15)
    assert inclusion_prob(K2, ()) == 1.0


def test_inclusion_is_superset_sum(rng):
    K = random_kernel(5, rng)
    dist = enumerate_distribution(K)
    for s in all_subsets(5):
        total = sum(p for t, p in dist.items() if set(s) <= set(t))
        assert inclusion_prob(K, s) == pytest.approx(total, abs=1e-12)


def test_independent_case_is_uniform():
    dist = enumerate_distribution(0.5 * np.eye(2))
    np.testing.assert_allclose(dist.probs, 0.25, atol=1e-15)


def test_enumeration_properties(rng):
    K = random_kernel(5, rng)
    dist = enumerate_distribution(K)
    assert dist.probs.min() >= 0
    assert dist.probs.sum() == pytest.approx(1.0, abs=1e-12)
    for i in range(5):
        assert sum(p for s, p in dist.items() if i in s) == pytest.approx(K[i, i], abs=1e-12)
    for i in range(5):
        for j in range(i + 1, 5):
            assert inclusion_prob(K, (i, j)) <= K[i, i] * K[j, j] + 1e-15


def test_enumeration_refuses_large_d():
    with pytest.raises(RefuseLargeD):
        enumerate_distribution(0.5 * np.eye(4), enum_limit=3)


def test_distribution_json_round_trip(tmp_path, rng):
    dist = enumerate_distribution(random_kernel(3, rng))
    path = tmp_path / "p.json"
    dist.write(path)
    back = ExactDistribution.read(path)
    assert np.array_equal(back.probs, dist.probs)
    subsets = [rec["s"] for rec in dist.to_dict()["probs"]]
    assert subsets == sorted(subsets) and subsets[0] == [] and [1, 2, 3] in subsets


def test_moment_vector_length_and_values():
    assert moment_size(4) == 13
    assert exact_moment_vector(0.5 * np.eye(4)).values.size == 13
    pi = exact_moment_vector(0.5 * np.eye(3))
    np.testing.assert_allclose(pi.values[3:6], 0.25)
    assert exact_moment_vector(RUNNING).values[-1] == pytest.approx(0.081, abs=1e-15)


def test_minor_table(rng):
    K = random_kernel(5, rng)
    t = minor_table(K, pivot=0)
    for (i, j), v in t.order2.items():
        assert v == pytest.approx(K[i, i] * K[j, j] - K[i, j] ** 2, abs=1e-12)
    for (i, j), v in t.order3_pivot.items():
        assert order3_expansion(K, 0, i, j) == pytest.approx(v, abs=1e-12)
    D = SignPattern((1, -1, 1, -1, -1))
    t2 = minor_table(conjugate(K, D))
    np.testing.assert_allclose(t2.as_moments().values, t.as_moments().values, atol=1e-12)


def test_reconstruction_equicovariance_d4():
    K = 0.4 * np.eye(4) + 0.1
    rep = verify_minor_reconstruction(K)
    assert rep.exhaustive and rep.n_subsets == 15
    assert rep.max_deviation < 1e-10
    assert rep.order4_deviation < 1e-10


def test_reconstruction_mixed_signs_d5(rng):
    K = random_kernel(5, rng, min_abs=1e-2)
    rep = verify_minor_reconstruction(K)
    assert rep.passed()
    assert minors_equal(rep.reconstructed, K, tol=1e-10)


def test_reconstruction_sampled_beyond_d6(rng):
    K = random_kernel(8, rng, min_abs=1e-3)
    rep = verify_minor_reconstruction(K, seed=3)
    assert not rep.exhaustive and rep.n_subsets == 500
    assert rep.passed()


def test_reconstruction_strict_needs_nonzero_entries():
    K = RUNNING.copy()
    K[1, 2] = K[2, 1] = 0.0
    with pytest.raises(AssumptionViolated):
        verify_minor_reconstruction(K)
    assert verify_minor_reconstruction(K, regime="robust").passed()


def test_moment_covariance_matches_enumeration(rng):
    K = random_kernel(3, rng)
    dist = enumerate_distribution(K)
    from dpplab.moments import layout

    subs = layout(3, 0).subsets()
    G = np.array([[float(set(s) <= set(t)) for s in subs] for t, _ in dist.items()])
    p = np.array([p for _, p in dist.items()])
    mean = p @ G
    C = (G * p[:, None]).T @ G - np.outer(mean, mean)
    np.testing.assert_allclose(exact_moment_covariance(K), C, atol=1e-14)


def test_pair_covariance_is_negative(rng):
    K = random_kernel(4, rng)
    C = exact_moment_covariance(K)
    for i in range(4):
        for j in range(i + 1, 4):
            assert C[i, j] == pytest.approx(-K[i, j] ** 2, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_property_pmf_forms(d, seed):
    K = random_kernel(d, np.random.default_rng(seed))
    dist = enumerate_distribution(K)
    S = k_to_sigma(K)
    assert abs(dist.probs.sum() - 1) <= 1e-12
    for s in all_subsets(d):
        assert abs(pmf_sigma(S, s) - dist.prob(s)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 6), st.integers(0, 2**32 - 1))
def test_property_minor_determination(d, seed):
    K = random_kernel(d, np.random.default_rng(seed), min_abs=1e-3)
    rep = verify_minor_reconstruction(K)
    assert rep.max_deviation <= 1e-10
    for s in all_subsets(d):
        assert abs(principal_minor(rep.reconstructed, s) - principal_minor(K, s)) <= 1e-10
