"""Pure numpy implementation of the HMM inference kernels.

Used when the compiled extension is unavailable, and as its reference.
All inputs are log-probabilities: ``log_pi`` ``(N,)``, ``log_A`` ``(T-1, N, N)``
with ``log_A[t, i, n] = log P(s_{t+1}=n | s_t=i)``, ``log_B`` ``(T, N)``.
"""

import numpy as np
from scipy.special import logsumexp

from .errors import EmissionUnderflowError

BACKEND = "python"


def forward_backward(log_pi, log_A, log_B):
    """Smoothed and filtered posteriors under a time-inhomogeneous HMM.

    Returns ``(loglik, gamma, xi, filtered)`` with shapes ``()``, ``(T, N)``,
    ``(T-1, N, N)`` and ``(T, N)``.
    """
    log_pi = np.asarray(log_pi, float)
    log_A = np.asarray(log_A, float)
    log_B = np.asarray(log_B, float)
    T, N = log_B.shape
    alpha = np.empty((T, N))
    alpha[0] = log_pi + log_B[0]
    norm = np.empty(T)
    norm[0] = logsumexp(alpha[0])
    if norm[0] == -np.inf:
        raise EmissionUnderflowError(0)
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + log_A[t - 1], axis=0) + log_B[t]
        norm[t] = logsumexp(alpha[t])
        if norm[t] == -np.inf:
            raise EmissionUnderflowError(t)
    loglik = float(norm[-1])

    beta = np.zeros((T, N))
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(log_A[t] + (log_B[t + 1] + beta[t + 1])[None, :], axis=1)

    with np.errstate(invalid="ignore"):
        gamma = np.exp(alpha + beta - loglik)
        xi = np.exp(alpha[:-1, :, None] + log_A + (log_B[1:] + beta[1:])[:, None, :] - loglik)
    gamma = np.nan_to_num(gamma, nan=0.0)
    xi = np.nan_to_num(xi, nan=0.0)
    filtered = np.exp(alpha - norm[:, None])
    return loglik, gamma, xi, filtered


def forward_backward_scaled(log_pi, log_A, log_B):
    """Linear-space forward-backward with per-step scaling (cross-check path)."""
    log_B = np.asarray(log_B, float)
    T, N = log_B.shape
    A = np.exp(np.asarray(log_A, float))
    shift = log_B.max(axis=1)
    if np.any(shift == -np.inf):
        raise EmissionUnderflowError(int(np.flatnonzero(shift == -np.inf)[0]))
    B = np.exp(log_B - shift[:, None])
    alpha = np.empty((T, N))
    c = np.empty(T)
    a = np.exp(np.asarray(log_pi, float)) * B[0]
    for t in range(T):
        if t > 0:
            a = (alpha[t - 1] @ A[t - 1]) * B[t]
        c[t] = a.sum()
        if c[t] <= 0:
            raise EmissionUnderflowError(t)
        alpha[t] = a / c[t]
    beta = np.ones((T, N))
    for t in range(T - 2, -1, -1):
        beta[t] = (A[t] @ (B[t + 1] * beta[t + 1])) / c[t + 1]
    gamma = alpha * beta
    xi = alpha[:-1, :, None] * A * (B[1:] * beta[1:])[:, None, :] / c[1:, None, None]
    loglik = float(np.sum(np.log(c)) + shift.sum())
    return loglik, gamma, xi, alpha.copy()


def viterbi(log_pi, log_A, log_B):
    """Most probable state path; ties go to the lower state index.

    Returns ``(path, log_score)``.
    """
    log_B = np.asarray(log_B, float)
    log_A = np.asarray(log_A, float)
    T, N = log_B.shape
    delta = np.asarray(log_pi, float) + log_B[0]
    if np.all(delta == -np.inf):
        raise EmissionUnderflowError(0)
    back = np.zeros((T, N), dtype=np.intp)
    for t in range(1, T):
        cand = delta[:, None] + log_A[t - 1]
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(N)] + log_B[t]
        if np.all(delta == -np.inf):
            raise EmissionUnderflowError(t)
    path = np.empty(T, dtype=np.intp)
    path[-1] = int(np.argmax(delta))
    score = float(delta[path[-1]])
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score


def logistic_q(X, a, b, beta):
    """``sum a*log(sig(eta)) + (b-a)*log(1-sig(eta))`` and its gradient, ``eta = X @ beta``."""
    X = np.asarray(X, float)
    eta = X @ np.asarray(beta, float)
    e = np.exp(-np.abs(eta))
    softplus = np.maximum(eta, 0.0) + np.log1p(e)
    sig = np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(a @ eta - b @ softplus), (a - b * sig) @ X
