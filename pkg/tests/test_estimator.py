import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import RUNNING, random_kernel, random_signs
from dpplab.errors import (
    AmbiguousSign,
    DerivativeGuard,
    EmptySample,
    NegativeCovArgument,
    ZeroSignArgument,
)
from dpplab.estimator import (
    EstimatedKernel,
    asymptotic_covariance,
    d_similarity_between,
    delta_method_covariance,
    estimate,
    estimated_identified_set,
    moment_jacobian,
    project_to_valid,
    recover_from_moments,
    recover_robust,
    sample_moments,
    select_pivot,
    vech,
    vech_indices,
)
from dpplab.exact import enumerate_distribution, exact_moment_covariance, exact_moment_vector
from dpplab.kernel import SignPattern, canonicalize, conjugate
from dpplab.moments import MomentVector, layout
from dpplab.sampler import sample_dpp


def _all_subsets_matrix(d):
    codes = np.arange(1 << d)
    return ((codes[:, None] >> np.arange(d)) & 1).astype(np.uint8)


def test_single_row_moments():
    pi = sample_moments(np.array([[1, 0, 1, 0]], dtype=np.uint8))
    np.testing.assert_array_equal(pi.marginals, [1, 0, 1, 0])
    assert pi.pair(0, 2) == 1
    for i, j in layout(4).pairs:
        if 1 in (i, j) or 3 in (i, j):
            assert pi.pair(i, j) == 0


def test_weighted_table_gives_exact_moments(rng):
    K = random_kernel(4, rng)
    dist = enumerate_distribution(K)
    pi = sample_moments(_all_subsets_matrix(4), 0, weights=dist.probs)
    np.testing.assert_allclose(pi.values, exact_moment_vector(K).values, atol=1e-15)


def test_sample_moments_within_5se():
    K = 0.3 * np.eye(4) + 0.1 * np.ones((4, 4))
    X = sample_dpp(K, 100_000, 21)
    pi = sample_moments(X)
    exact = exact_moment_vector(K).values
    se = np.sqrt(exact * (1 - exact) / X.shape[0])
    assert np.all(np.abs(pi.values - exact) <= 5 * se)


def test_empty_sample():
    with pytest.raises(EmptySample):
        sample_moments(np.zeros((0, 3), dtype=np.uint8))


@pytest.mark.parametrize("d", range(3, 9))
def test_oracle_exactness(d, rng):
    K = random_kernel(d, rng, min_abs=1e-3)
    K = conjugate(K, SignPattern(tuple(random_signs(d, rng).astype(int))))
    est = recover_from_moments(exact_moment_vector(K))
    np.testing.assert_allclose(est.kernel, canonicalize(K)[0].matrix, atol=1e-10)


def test_running_example_flipped():
    K = conjugate(RUNNING, SignPattern((1, -1, 1)))
    est = recover_from_moments(exact_moment_vector(K))
    np.testing.assert_allclose(est.kernel, RUNNING, atol=1e-14)
    assert all(s.sign == 1 for s in est.sign_diagnostics)
    assert len(est.sign_diagnostics) == 3


def test_independent_pair_gives_zero_amplitude():
    est = recover_from_moments(exact_moment_vector(0.5 * np.eye(3)))
    assert np.array_equal(est.kernel, 0.5 * np.eye(3))


def test_strict_negative_argument_names_pair():
    pi = exact_moment_vector(RUNNING)
    v = pi.values.copy()
    v[layout(3).pair_index(1, 2)] = 0.253
    with pytest.raises(NegativeCovArgument) as info:
        recover_from_moments(pi.with_values(v))
    assert info.value.pair == (1, 2)
    assert "robust" in str(info.value)


def test_robust_clip_rule():
    pi = exact_moment_vector(RUNNING)
    v = pi.values.copy()
    v[layout(3).pair_index(1, 2)] = 0.253
    est = recover_robust(pi.with_values(v))
    assert est.kernel[1, 2] == 0 and est.clip_events == ((1, 2),)
    diag = next(s for s in est.sign_diagnostics if (s.i, s.j) == (1, 2))
    assert diag.sign == 0 and diag.amplitude == 0


def test_robust_exact_zero_entry():
    K = np.array([
        [0.5, 0.2, 0.2, 0.2],
        [0.2, 0.5, 0.15, 0.0],
        [0.2, 0.15, 0.5, 0.15],
        [0.2, 0.0, 0.15, 0.5],
    ])
    est = recover_robust(exact_moment_vector(K))
    np.testing.assert_allclose(est.kernel, K, atol=1e-14)
    assert est.kernel[1, 3] == 0.0


def test_robust_equals_strict_without_clipping(rng):
    K = random_kernel(5, rng, min_abs=1e-2)
    pi = exact_moment_vector(K)
    assert np.array_equal(recover_robust(pi).kernel, recover_from_moments(pi).kernel)


def test_zero_sign_argument():
    # a tie in the sign argument is an error only in the strict regime
    K = RUNNING.copy()
    pi = exact_moment_vector(K)
    v = pi.values.copy()
    m = pi.marginals
    a2 = m[1] * m[2] - pi.pair(1, 2)
    v[-1] = m[0] * m[1] * m[2] - m[0] * a2 - m[1] * (m[0] * m[2] - pi.pair(0, 2)) - m[2] * (m[0] * m[1] - pi.pair(0, 1))
    with pytest.raises(ZeroSignArgument):
        recover_from_moments(pi.with_values(v))
    assert recover_robust(pi.with_values(v)).kernel[1, 2] == 0


def test_estimate_accuracy():
    K = 0.35 * np.eye(4) + 0.15 * np.ones((4, 4))
    est = estimate(sample_dpp(K, 100_000, 5))
    assert np.max(np.abs(est.kernel - K)) < 0.02
    assert np.all(np.delete(est.kernel[0], 0) >= 0)


def test_pivots_give_d_similar_estimates():
    K = conjugate(RUNNING, SignPattern((1, -1, 1)))
    X = sample_dpp(K, 100_000, 6)
    a = estimate(X, 0).kernel
    b = estimate(X, 1).kernel
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=0)
    assert d_similarity_between(a, b, tol=1e-12) is not None


def test_auto_pivot_picks_full_row():
    # only row 2 (index 1) is free of zeros
    K = np.array([[0.5, 0.2, 0.0], [0.2, 0.5, 0.2], [0.0, 0.2, 0.5]])
    assert select_pivot(sample_dpp(K, 50_000, 3)) == 1
    assert estimate(sample_dpp(K, 50_000, 3), "auto", "robust").pivot == 1


def test_estimated_identified_set():
    est = recover_from_moments(exact_moment_vector(RUNNING))
    S = estimated_identified_set(est)
    assert len(S) == 4
    assert np.array_equal(S[0], RUNNING)


def test_d_similarity_examples(rng):
    A = random_kernel(4, rng, min_abs=1e-2)
    D = SignPattern((1, -1, -1, 1))
    assert d_similarity_between(A, conjugate(A, D)) == D
    B = A.copy()
    B[2, 3] += 1e-9
    B[3, 2] += 1e-9
    assert d_similarity_between(A, B, tol=1e-10) is None
    Z = A.copy()
    Z[0, 1] = Z[1, 0] = 0.0
    with pytest.raises(AmbiguousSign):
        d_similarity_between(A, Z)


def test_projection_is_valid():
    est = EstimatedKernel(np.array([[0.5, 0.6], [0.6, 0.5]]), 0, "strict")
    P = project_to_valid(est)
    w = np.linalg.eigvalsh(P)
    assert w.min() >= 1e-6 - 1e-15 and w.max() <= 1 - 1e-6 + 1e-15


def test_json_round_trip():
    est = recover_from_moments(exact_moment_vector(RUNNING, 1))
    d = est.to_dict()
    assert d["pivot"] == 2
    back = EstimatedKernel.from_dict(d)
    assert np.array_equal(back.kernel, est.kernel) and back.sign_diagnostics == est.sign_diagnostics


def test_vech_ordering():
    assert vech_indices(3) == [(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2)]
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(vech(M), [0, 3, 6, 4, 7, 8])


def test_jacobian_of_marginals_is_identity():
    J = moment_jacobian(exact_moment_vector(RUNNING))
    diag_rows = [k for k, (i, j) in enumerate(vech_indices(3)) if i == j]
    np.testing.assert_allclose(J[diag_rows, :3], np.eye(3), atol=1e-8)
    np.testing.assert_allclose(J[diag_rows, 3:], 0, atol=1e-8)


def test_jacobian_against_complex_step_free_oracle():
    # |K_ij| = sqrt(m_i m_j - p_ij): d|K_ij|/dp_ij = -1 / (2 |K_ij|)
    J = moment_jacobian(exact_moment_vector(RUNNING))
    row = vech_indices(3).index((1, 0))
    assert J[row, layout(3).pair_index(0, 1)] == pytest.approx(-1 / (2 * 0.2), rel=1e-6)


def test_limit_covariance_marginal_block_and_psd():
    C = delta_method_covariance(exact_moment_vector(RUNNING), exact_moment_covariance(RUNNING), T=1).matrix
    for k, (i, j) in enumerate(vech_indices(3)):
        if i == j:
            assert C[k, k] == pytest.approx(0.25, abs=1e-8)
    assert np.linalg.eigvalsh(C).min() >= -1e-8
    np.testing.assert_array_equal(C, C.T)


def test_marginal_variance_vs_monte_carlo():
    T = 100_000
    ests = np.array([estimate(sample_dpp(RUNNING, T, (31, r))).kernel[0, 0] for r in range(300)])
    # Bernoulli variance K_ii (1 - K_ii) / T; 300 reps gives about 8% relative precision
    assert ests.var(ddof=1) * T == pytest.approx(0.25, rel=0.25)


def test_sample_covariance_close_to_limit():
    X = sample_dpp(RUNNING, 100_000, 8)
    cov = asymptotic_covariance(X)
    limit = delta_method_covariance(exact_moment_vector(RUNNING), exact_moment_covariance(RUNNING)).matrix
    assert np.max(np.abs(cov.matrix - limit)) < 0.03
    assert cov.standard_errors().shape == (3, 3)


def test_derivative_guard():
    K = RUNNING.copy()
    K[1, 2] = K[2, 1] = 1e-4
    with pytest.raises(DerivativeGuard):
        moment_jacobian(exact_moment_vector(K))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 7), st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_property_oracle_exactness(d, seed, pivot):
    rng = np.random.default_rng(seed)
    pivot = pivot % d
    K = random_kernel(d, rng, min_abs=1e-3)
    est = recover_from_moments(exact_moment_vector(K, pivot))
    assert np.max(np.abs(est.kernel - canonicalize(K, pivot)[0].matrix)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_property_estimate_invariants(d, seed):
    K = random_kernel(d, np.random.default_rng(seed))
    est = estimate(sample_dpp(K, 200, seed), 0, "robust")
    M = est.kernel
    assert np.array_equal(M, M.T)
    assert np.all(np.delete(M[0], 0) >= 0)
    assert np.all((np.diag(M) >= 0) & (np.diag(M) <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 6), st.integers(0, 2**32 - 1))
def test_property_weighted_exact_recovery(d, seed):
    K = random_kernel(d, np.random.default_rng(seed), min_abs=1e-3)
    dist = enumerate_distribution(K)
    pi = sample_moments(_all_subsets_matrix(d), 0, weights=dist.probs)
    assert isinstance(pi, MomentVector)
    est = recover_from_moments(pi)
    assert np.max(np.abs(est.kernel - canonicalize(K)[0].matrix)) <= 1e-8
