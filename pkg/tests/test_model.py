import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_sequence
from cornermark.model import (CdhmmParams, MarkingBinGrid, PreparedSequence, TransitionWeights,
                              assign_zones, assignment_cost, emission_loglik, emission_mean,
                              forward_backward, infer_sequence, log_transition_matrices,
                              sequence_loglik, transition_matrix, viterbi)
from cornermark.synthgen import enumerate_posterior


def params_k(K, beta=None, gamma_o=0.8, sigma2=2.0, goal=(-11.0, 0.0), rng=None):
    rng = rng or np.random.default_rng(0)
    return CdhmmParams(
        "T1", "inswing", K, rng.uniform(-10, -1, (K, 2)), np.tile(np.eye(2), (K, 1, 1)),
        MarkingBinGrid.default(gamma_o, sigma2), beta or TransitionWeights.zeros(),
        np.full(K + 1, 1 / (K + 1)), goal=np.array(goal))


def test_zero_weights_give_symmetric_kernel():
    K = 4
    A = transition_matrix(params_k(K), np.ones((K, 8)), np.ones(6))
    np.testing.assert_allclose(np.diag(A)[:K], 0.5, atol=1e-15)
    off = A[:K, :K][~np.eye(K, dtype=bool)]
    np.testing.assert_allclose(off, 0.5 / (K - 1), atol=1e-15)
    assert np.all(A[:K, K] == 0.0)
    np.testing.assert_allclose(A[K], [0.5 / K] * K + [0.5], atol=1e-15)


def test_persistence_per_second():
    eta = math.log(0.99 / 0.01)
    beta = TransitionWeights([eta] + [0] * 7, [0] * 6, [0] * 8)
    A = transition_matrix(params_k(3, beta), np.ones((3, 8)), np.ones(6))
    assert A[0, 0] == pytest.approx(0.99, abs=1e-12)
    assert A[0, 0] ** 25 == pytest.approx(0.7778, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), arrays(float, 22, elements=st.floats(-20, 20)), st.integers(0, 2 ** 32 - 1))
def test_rows_are_distributions(K, flat, seed):
    rng = np.random.default_rng(seed)
    beta = TransitionWeights.from_flat(flat)
    Xm = rng.normal(0, 3, (5, K, 8))
    Xs = rng.normal(0, 3, (5, K, 8))
    Xz = rng.normal(0, 3, (5, 6))
    A = np.exp(log_transition_matrices(beta, Xm, Xz, Xs))
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(A[:, :K, K] == 0.0)


def test_emission_examples():
    p = params_k(2, sigma2=0.7)
    O = np.array([3.0, 2.0])
    mu = emission_mean(p, O)
    seq = make_sequence(np.array([[mu, [0.0, 0.0]]]), np.array([[O, [-2.0, 1.0]]]))
    ll = emission_loglik(p, seq, 0, 0, 0, np.array([0, 1]))
    assert ll == pytest.approx(-math.log(2 * math.pi * 0.7), abs=1e-12)

    tight = params_k(2, gamma_o=1.0)
    np.testing.assert_array_equal(emission_mean(tight, O), O)
    shifted = params_k(2, gamma_o=0.8, goal=(0.0, -11.0))
    np.testing.assert_allclose(emission_mean(shifted, [10.0, 10.0]), [8.0, 5.8], atol=1e-12)


def test_prepared_emissions_match_pointwise_density(rng):
    p = params_k(3, sigma2=1.3, rng=rng)
    seq = make_sequence(rng.normal(-5, 3, (4, 3, 2)), rng.normal(-5, 3, (4, 3, 2)))
    prep = PreparedSequence(seq, p.standardizer)
    a = prep.assignment(p)
    lb = prep.log_emissions(p, a)
    for t, j, n in itertools.product(range(4), range(3), range(4)):
        assert lb[j, t, n] == pytest.approx(emission_loglik(p, seq, t, j, n, a), abs=1e-10)


def brute_force_cost(D, Z):
    K = len(D)
    return min(sum(np.linalg.norm(D[j] - Z[perm[j]]) for j in range(K))
               for perm in itertools.permutations(range(K)))


def test_assignment_examples():
    Z = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]])
    np.testing.assert_array_equal(assign_zones(Z, Z), [0, 1, 2])
    assert assignment_cost(Z, Z, assign_zones(Z, Z)) == 0.0
    # greedy takes d0 -> z0 (cost 1) and is then forced into d1 -> z1 (cost 10)
    D = np.array([[0.0, 0.0], [1.0, 0.0]])
    Z = np.array([[1.0, 0.0], [-9.0, 0.0]])
    z = assign_zones(D, Z)
    np.testing.assert_array_equal(z, [1, 0])
    assert assignment_cost(D, Z, z) == pytest.approx(9.0)


def test_assignment_matches_brute_force(rng):
    for _ in range(100):
        K = int(rng.integers(1, 7))
        D, Z = rng.normal(0, 5, (K, 2)), rng.normal(0, 5, (K, 2))
        z = assign_zones(D, Z)
        assert sorted(z) == list(range(K))
        assert assignment_cost(D, Z, z) == pytest.approx(brute_force_cost(D, Z), abs=1e-9)


def test_model_posteriors_match_enumeration(tiny_truth, tiny_synth):
    ds, _ = tiny_synth
    for seq in ds:
        inf = infer_sequence(tiny_truth, seq)
        for j, post in enumerate(inf.posteriors):
            ll, gamma, xi = enumerate_posterior(tiny_truth, seq, j)
            assert abs(post.loglik - ll) < 1e-9
            np.testing.assert_allclose(post.gamma, gamma, atol=1e-9)
            np.testing.assert_allclose(post.xi, xi, atol=1e-9)


def test_sequence_loglik_is_sum_over_defenders(small_truth, small_synth):
    ds, _ = small_synth
    seq = ds[0]
    singles = [forward_backward(small_truth, seq, j).loglik for j in range(seq.n_defenders)]
    assert sequence_loglik(small_truth, seq) == pytest.approx(sum(singles), abs=1e-12)


def test_true_parameters_beat_perturbed(small_truth):
    from cornermark.synthgen import ScenarioSpec, generate_dataset
    ds, _ = generate_dataset(ScenarioSpec(small_truth, T=15, n_sequences=50, seed=99))
    bent = small_truth.replace(zone_means=small_truth.zone_means + 1.0,
                               grid=small_truth.grid.with_values(small_truth.grid.gamma_o * 0.8,
                                                                 small_truth.grid.sigma2))
    assert sum(map(lambda s: sequence_loglik(small_truth, s), ds)) > \
        sum(map(lambda s: sequence_loglik(bent, s), ds))


def test_decoded_paths_never_enter_zonal_from_man(small_truth, small_synth):
    ds, _ = small_synth
    K = small_truth.K
    for seq in ds:
        for j in range(K):
            path = viterbi(small_truth, seq, j)
            assert not np.any((path[:-1] < K) & (path[1:] == K))


def test_incompatible_sequence_rejected(small_truth):
    seq = make_sequence(np.zeros((3, 2, 2)), np.ones((3, 2, 2)))
    with pytest.raises(ValueError, match="model expects 3"):
        infer_sequence(small_truth, seq)


def test_grid_neighbourhood_is_chebyshev():
    g = MarkingBinGrid.default()
    nx, ny = g.shape
    nb = g.neighbourhood(1)
    centre = (nx // 2) * ny + ny // 2
    assert len(nb[centre]) == 9
    assert len(nb[0]) == 4
    assert all(b in nb[b] for b in range(g.n_bins))
