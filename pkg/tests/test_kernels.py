"""Forward-backward and Viterbi against brute-force path enumeration."""

import itertools
import os
import subprocess
import sys

import numpy as np
import pytest

from cornermark import _kernels_py
from cornermark.errors import EmissionUnderflowError
from cornermark.synthgen import enumerate_hmm

try:
    from cornermark import _kernels
except ImportError:  # extension not built
    _kernels = None

BACKENDS = [pytest.param(_kernels_py, id="python"),
            pytest.param(_kernels, id="compiled",
                         marks=pytest.mark.skipif(_kernels is None, reason="extension not built"))]


def random_instance(rng, T, N, sparse=False):
    log_pi = np.log(rng.dirichlet(np.ones(N)))
    A = rng.dirichlet(np.ones(N), size=(max(T - 1, 0), N))
    if sparse and N > 2:
        A[:, 0, N - 1] = 0.0        # a structural zero, like man -> zonal
        A /= A.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        log_A = np.log(A)
    log_B = rng.normal(-2.0, 1.5, (T, N))
    return log_pi, log_A, log_B


def best_path(log_pi, log_A, log_B):
    T, N = log_B.shape
    best, arg = -np.inf, None
    for path in itertools.product(range(N), repeat=T):
        s = log_pi[path[0]] + sum(log_B[t, path[t]] for t in range(T))
        s += sum(log_A[t, path[t], path[t + 1]] for t in range(T - 1))
        if s > best:
            best, arg = s, path
    return best, np.array(arg)


@pytest.mark.parametrize("impl", BACKENDS)
def test_forward_backward_matches_enumeration(impl, rng):
    for _ in range(60):
        T, N = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        inst = random_instance(rng, T, N, sparse=bool(rng.integers(2)))
        ll, gamma, xi, filt = impl.forward_backward(*inst)
        ll0, gamma0, xi0 = enumerate_hmm(*inst)
        assert abs(ll - ll0) < 1e-9
        np.testing.assert_allclose(gamma, gamma0, atol=1e-9, rtol=0)
        np.testing.assert_allclose(xi, xi0, atol=1e-9, rtol=0)
        np.testing.assert_allclose(filt.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS)
def test_viterbi_matches_enumeration(impl, rng):
    for _ in range(40):
        T, N = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        inst = random_instance(rng, T, N, sparse=True)
        path, score = impl.viterbi(*inst)
        best, _ = best_path(*inst)
        assert abs(score - best) < 1e-12 * max(1.0, abs(best))
        # the returned path attains the optimum
        lp, lA, lB = inst
        s = lp[path[0]] + lB[np.arange(T), path].sum() + sum(lA[t, path[t], path[t + 1]] for t in range(T - 1))
        assert abs(s - best) < 1e-9


@pytest.mark.parametrize("impl", BACKENDS)
def test_single_frame_is_normalised_prior_times_emission(impl):
    log_pi = np.log([0.2, 0.3, 0.5])
    log_B = np.log([[0.5, 0.1, 0.2]])
    ll, gamma, xi, _ = impl.forward_backward(log_pi, np.zeros((0, 3, 3)), log_B)
    w = np.array([0.2 * 0.5, 0.3 * 0.1, 0.5 * 0.2])
    np.testing.assert_allclose(gamma[0], w / w.sum(), atol=1e-15)
    assert abs(ll - np.log(w.sum())) < 1e-14
    assert xi.shape == (0, 3, 3)


@pytest.mark.parametrize("impl", BACKENDS)
def test_identity_transitions_uniform_emissions_keep_prior(impl):
    pi = np.array([0.1, 0.6, 0.3])
    with np.errstate(divide="ignore"):
        log_A = np.log(np.tile(np.eye(3), (6, 1, 1)))
    _, gamma, _, _ = impl.forward_backward(np.log(pi), log_A, np.zeros((7, 3)))
    np.testing.assert_allclose(gamma, np.tile(pi, (7, 1)), atol=1e-14)


@pytest.mark.parametrize("impl", BACKENDS)
def test_dominant_emissions_drive_viterbi(impl, rng):
    T, N = 30, 4
    truth = rng.integers(0, N, T)
    log_B = np.full((T, N), -50.0)
    log_B[np.arange(T), truth] = 0.0
    log_A = np.log(np.tile(np.full((N, N), 0.01) + np.eye(N) * 0.96, (T - 1, 1, 1)))
    path, _ = impl.viterbi(np.log(np.full(N, 0.25)), log_A, log_B)
    np.testing.assert_array_equal(path, truth)


@pytest.mark.parametrize("impl", BACKENDS)
def test_underflow_reports_frame(impl):
    log_B = np.zeros((4, 2))
    log_B[2] = -np.inf
    with pytest.raises(EmissionUnderflowError) as err:
        impl.forward_backward(np.log([0.5, 0.5]), np.log(np.full((3, 2, 2), 0.5)), log_B)
    assert err.value.frame == 2


@pytest.mark.skipif(_kernels is None, reason="extension not built")
def test_backends_agree_on_large_instances(rng):
    for T, N in ((75, 11), (150, 11), (40, 3)):
        inst = random_instance(rng, T, N, sparse=True)
        a = _kernels_py.forward_backward(*inst)
        b = _kernels.forward_backward(*inst)
        assert abs(a[0] - b[0]) < 1e-9 * abs(a[0])
        for x, y in zip(a[1:], b[1:]):
            np.testing.assert_allclose(x, y, atol=1e-10)
        np.testing.assert_array_equal(_kernels_py.viterbi(*inst)[0], _kernels.viterbi(*inst)[0])


def test_scaled_recursion_cross_check(rng):
    for _ in range(20):
        inst = random_instance(rng, int(rng.integers(2, 30)), int(rng.integers(2, 6)))
        a = _kernels_py.forward_backward(*inst)
        b = _kernels_py.forward_backward_scaled(*inst)
        assert abs(a[0] - b[0]) < 1e-9
        np.testing.assert_allclose(a[1], b[1], atol=1e-10)


@pytest.mark.parametrize("impl", BACKENDS)
def test_logistic_q_value_and_gradient(impl, rng):
    X = rng.normal(size=(500, 5))
    a = rng.uniform(0, 1, 500)
    b = a + rng.uniform(0, 1, 500)
    beta = rng.normal(size=5)
    q, g = impl.logistic_q(X, a, b, beta)
    eta = X @ beta
    assert abs(q - np.sum(a * eta - b * np.logaddexp(0, eta))) < 1e-9
    np.testing.assert_allclose(g, ((a - b / (1 + np.exp(-eta))) @ X), atol=1e-8)


def test_environment_switch_selects_fallback():
    env = dict(os.environ, CORNERMARK_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from cornermark import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
