"""Covariate-dependent HMM for one defending team and delivery type.

States ``0..K-1`` mean "man-marking attacker k" (attackers in roster order),
state ``K`` is the zonal state. Each modelled defender is an independent
chain; the only coupling is the zone assignment made at the first frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import log_expit

from . import kernels
from .covariates import (MAN_DIM, ZONAL_DIM, StandardizationStats, apply_standardizer,
                         man_features, zonal_features)
from .errors import EmissionUnderflowError
from .tracking import DEFAULT_PITCH, CornerSequence

LOG_2PI = float(np.log(2 * np.pi))
VAR_FLOOR = 1e-4
BIN_SIZE = 3.0


@dataclass(frozen=True)
class StateSpace:
    K: int

    @property
    def N(self) -> int:
        return self.K + 1

    @property
    def zonal(self) -> int:
        return self.K

    def label(self, n: int) -> str:
        return "zonal" if n == self.K else f"mark:{n}"


@dataclass(frozen=True)
class ZonalGaussian:
    mean: np.ndarray
    cov: np.ndarray


def floor_covariance(cov: np.ndarray, floor: float = VAR_FLOOR) -> np.ndarray:
    """Symmetrise and clip eigenvalues from below."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(cov)
    if np.all(w >= floor):
        return cov
    w = np.maximum(w, floor)
    return np.einsum("...ij,...j,...kj->...ik", v, w, v)


@dataclass(frozen=True, eq=False)
class MarkingBinGrid:
    """Per-bin marking tightness on a fixed 3 m grid.

    Bin ``(ix, iy)`` covers ``origin + bin_size * [ix, ix+1) x [iy, iy+1)``.
    Points outside the grid belong to the nearest bin. ``gamma_o`` and
    ``sigma2`` have shape ``(nx, ny)``; ``gamma_g`` is ``1 - gamma_o``.
    """

    origin: np.ndarray
    bin_size: float
    gamma_o: np.ndarray
    sigma2: np.ndarray

    @classmethod
    def default(cls, gamma_o: float = 0.8, sigma2: float = 2.0, pitch=DEFAULT_PITCH) -> "MarkingBinGrid":
        # x from the goal line 30 m out, y over [-21, 21] so edges sit on 3 m multiples
        origin = np.array([pitch.goal_line_x, -21.0])
        shape = (10, 14)
        return cls(origin, BIN_SIZE, np.full(shape, float(gamma_o)), np.full(shape, float(sigma2)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.gamma_o.shape

    @property
    def n_bins(self) -> int:
        return self.gamma_o.size

    @property
    def gamma_g(self) -> np.ndarray:
        return 1.0 - self.gamma_o

    def bin_index(self, points) -> np.ndarray:
        """Flat bin index of each point (nearest bin when outside the grid)."""
        pts = np.asarray(points, float)
        rel = np.floor((pts - self.origin) / self.bin_size).astype(np.intp)
        nx, ny = self.shape
        ix = np.clip(rel[..., 0], 0, nx - 1)
        iy = np.clip(rel[..., 1], 0, ny - 1)
        return ix * ny + iy

    def neighbourhood(self, hops: int) -> list[np.ndarray]:
        """Flat indices of bins within ``hops`` (Chebyshev) of each bin."""
        nx, ny = self.shape
        out = []
        for ix in range(nx):
            for iy in range(ny):
                xs = np.arange(max(0, ix - hops), min(nx, ix + hops + 1))
                ys = np.arange(max(0, iy - hops), min(ny, iy + hops + 1))
                out.append((xs[:, None] * ny + ys[None, :]).ravel())
        return out

    def with_values(self, gamma_o, sigma2) -> "MarkingBinGrid":
        return replace(self, gamma_o=np.asarray(gamma_o, float).reshape(self.shape),
                       sigma2=np.asarray(sigma2, float).reshape(self.shape))


@dataclass(frozen=True, eq=False)
class TransitionWeights:
    m: np.ndarray
    z: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for name, dim in (("m", MAN_DIM), ("z", ZONAL_DIM), ("s", MAN_DIM)):
            arr = np.asarray(getattr(self, name), float)
            if arr.shape != (dim,):
                raise ValueError(f"beta_{name} must have length {dim}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"beta_{name} must be finite")
            object.__setattr__(self, name, arr)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.m, self.z, self.s])

    @classmethod
    def from_flat(cls, x) -> "TransitionWeights":
        x = np.asarray(x, float)
        return cls(x[:MAN_DIM], x[MAN_DIM:MAN_DIM + ZONAL_DIM], x[MAN_DIM + ZONAL_DIM:])

    @classmethod
    def zeros(cls) -> "TransitionWeights":
        return cls(np.zeros(MAN_DIM), np.zeros(ZONAL_DIM), np.zeros(MAN_DIM))


@dataclass(frozen=True, eq=False)
class CdhmmParams:
    team_id: str
    delivery_type: str
    K: int
    zone_means: np.ndarray
    zone_covs: np.ndarray
    grid: MarkingBinGrid
    beta: TransitionWeights
    pi: np.ndarray
    goal: np.ndarray = field(default_factory=lambda: DEFAULT_PITCH.goal_center)
    standardizer: StandardizationStats = field(default_factory=StandardizationStats.identity)
    assignment_metric: str = "euclidean"

    def __post_init__(self):
        zm = np.asarray(self.zone_means, float)
        zc = np.asarray(self.zone_covs, float)
        pi = np.asarray(self.pi, float)
        if zm.shape != (self.K, 2) or zc.shape != (self.K, 2, 2):
            raise ValueError(f"expected {self.K} zones")
        if pi.shape != (self.K + 1,) or np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9:
            raise ValueError("pi must be a probability vector of length K+1")
        if self.assignment_metric not in ("euclidean", "l1"):
            raise ValueError("assignment_metric must be 'euclidean' or 'l1'")
        object.__setattr__(self, "zone_means", zm)
        object.__setattr__(self, "zone_covs", zc)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "goal", np.asarray(self.goal, float))

    @property
    def states(self) -> StateSpace:
        return StateSpace(self.K)

    @property
    def N(self) -> int:
        return self.K + 1

    @property
    def zones(self) -> list[ZonalGaussian]:
        return [ZonalGaussian(m, c) for m, c in zip(self.zone_means, self.zone_covs)]

    def replace(self, **changes) -> "CdhmmParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Inference output for one defender in one sequence."""

    gamma: np.ndarray
    xi: np.ndarray
    path: np.ndarray | None
    loglik: float
    filtered: np.ndarray


# ------------------------------------------------------------------ assignment

def assign_zones(defender_positions, zone_means, metric: str = "euclidean") -> np.ndarray:
    """Optimal one-to-one defender-to-zone assignment.

    Returns ``z`` with ``z[j]`` the zone of defender ``j``.
    """
    dp = np.asarray(defender_positions, float)
    zm = np.asarray(zone_means, float)
    if dp.shape[0] != zm.shape[0]:
        raise ValueError(f"{dp.shape[0]} defenders cannot be matched to {zm.shape[0]} zones")
    diff = dp[:, None, :] - zm[None, :, :]
    if metric == "euclidean":
        cost = np.linalg.norm(diff, axis=-1)
    elif metric == "l1":
        cost = np.abs(diff).sum(axis=-1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(rows), dtype=np.intp)
    out[rows] = cols
    return out


def assignment_cost(defender_positions, zone_means, assignment, metric: str = "euclidean") -> float:
    diff = np.asarray(defender_positions, float) - np.asarray(zone_means, float)[assignment]
    if metric == "l1":
        return float(np.abs(diff).sum())
    return float(np.linalg.norm(diff, axis=-1).sum())


# ---------------------------------------------------------------- transitions

def _log_softmax_excluding_self(s: np.ndarray) -> np.ndarray:
    """``out[..., i, l] = s_l - logsumexp_{k != i} s_k`` with ``-inf`` on the diagonal."""
    K = s.shape[-1]
    masked = np.broadcast_to(s[..., None, :], s.shape + (K,)).copy()
    idx = np.arange(K)
    masked[..., idx, idx] = -np.inf
    m = masked.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(masked - m).sum(axis=-1, keepdims=True))
    return masked - lse


def log_transition_matrices(beta: TransitionWeights, Xm: np.ndarray, Xz: np.ndarray,
                            Xs: np.ndarray) -> np.ndarray:
    """Log transition matrices from standardised covariates.

    ``Xm``/``Xs`` have shape ``(..., K, 8)`` and ``Xz`` ``(..., 6)``; the result
    has shape ``(..., N, N)`` with rows indexed by the previous state.
    """
    K = Xm.shape[-2]
    eta_m = Xm @ beta.m
    eta_z = Xz @ beta.z
    s = Xs @ beta.s
    out = np.empty(eta_m.shape[:-1] + (K + 1, K + 1))
    if K > 1:
        out[..., :K, :K] = log_expit(-eta_m)[..., :, None] + _log_softmax_excluding_self(s)
    idx = np.arange(K)
    # with a single attacker there is nobody to switch to, so marking persists
    out[..., idx, idx] = log_expit(eta_m) if K > 1 else 0.0
    out[..., :K, K] = -np.inf
    s_max = s.max(axis=-1, keepdims=True)
    lse_all = s_max + np.log(np.exp(s - s_max).sum(axis=-1, keepdims=True))
    out[..., K, :K] = log_expit(-eta_z)[..., None] + s - lse_all
    out[..., K, K] = log_expit(eta_z)
    return out


def transition_matrix(params: CdhmmParams, man_cov, zonal_cov, switch_cov=None) -> np.ndarray:
    """Row-stochastic ``N x N`` matrix for one defender from standardised covariates."""
    man_cov = np.asarray(man_cov, float)
    switch_cov = man_cov if switch_cov is None else np.asarray(switch_cov, float)
    return np.exp(log_transition_matrices(params.beta, man_cov, np.asarray(zonal_cov, float), switch_cov))


# ------------------------------------------------------------------ sequences

class PreparedSequence:
    """Per-sequence arrays reused across EM iterations.

    Man-marking covariates depend only on the tracking data and the frozen
    standardiser, so they are computed once.
    """

    def __init__(self, seq: CornerSequence, standardizer: StandardizationStats,
                 grid: MarkingBinGrid | None = None):
        self.seq = seq
        self.standardizer = standardizer
        self.D = np.ascontiguousarray(seq.positions[:, seq.defenders, :])
        self.O = np.ascontiguousarray(seq.positions[:, seq.attackers, :])
        self.T = seq.n_frames
        self.J = self.D.shape[1]
        self.K = self.O.shape[1]
        raw = man_features(seq)[:-1] if self.T > 1 else np.empty((0, self.J, self.K, MAN_DIM))
        self.Xm = apply_standardizer(raw, standardizer, "man_mark")
        if (np.array_equal(standardizer.mean["switch"], standardizer.mean["man_mark"])
                and np.array_equal(standardizer.std["switch"], standardizer.std["man_mark"])):
            self.Xs = self.Xm
        else:
            self.Xs = apply_standardizer(raw, standardizer, "switch")
        self._bins_for: MarkingBinGrid | None = None
        self._bins: np.ndarray | None = None
        if grid is not None:
            self.attacker_bins(grid)

    def attacker_bins(self, grid: MarkingBinGrid) -> np.ndarray:
        """Flat bin index of every attacker at every frame, shape ``(T, K)``."""
        if self._bins is None or self._bins_for is None or self._bins_for.shape != grid.shape \
                or not np.array_equal(self._bins_for.origin, grid.origin) \
                or self._bins_for.bin_size != grid.bin_size:
            self._bins = grid.bin_index(self.O)
            self._bins_for = grid
        return self._bins

    def assignment(self, params: CdhmmParams) -> np.ndarray:
        return assign_zones(self.D[0], params.zone_means, params.assignment_metric)

    def zonal_covariates(self, params: CdhmmParams, assignment: np.ndarray) -> np.ndarray:
        if self.T < 2:
            return np.empty((0, self.J, ZONAL_DIM))
        raw = zonal_features(self.seq, params.zone_means[assignment], params.zone_covs[assignment])[:-1]
        return apply_standardizer(raw, params.standardizer, "zonal")

    def log_transitions(self, params: CdhmmParams, assignment: np.ndarray) -> np.ndarray:
        """Shape ``(J, T-1, N, N)``."""
        Xz = self.zonal_covariates(params, assignment)
        la = log_transition_matrices(params.beta, self.Xm, Xz, self.Xs)
        return np.ascontiguousarray(np.swapaxes(la, 0, 1))

    def log_emissions(self, params: CdhmmParams, assignment: np.ndarray) -> np.ndarray:
        """Shape ``(J, T, N)``."""
        grid = params.grid
        bins = self.attacker_bins(grid)
        g_o = grid.gamma_o.ravel()[bins][..., None]
        s2 = grid.sigma2.ravel()[bins]
        mu = g_o * self.O + (1.0 - g_o) * params.goal
        d2 = np.sum((self.D[:, :, None, :] - mu[:, None, :, :]) ** 2, axis=-1)
        man = -LOG_2PI - np.log(s2)[:, None, :] - 0.5 * d2 / s2[:, None, :]
        out = np.empty((self.J, self.T, self.K + 1))
        out[..., :self.K] = np.swapaxes(man, 0, 1)
        out[..., self.K] = zonal_logpdf(self.D, params.zone_means[assignment], params.zone_covs[assignment]).T
        return out


def zonal_logpdf(points: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Bivariate normal log-density; ``points`` ``(..., J, 2)`` against per-defender zones."""
    diff = points - means
    det = covs[..., 0, 0] * covs[..., 1, 1] - covs[..., 0, 1] * covs[..., 1, 0]
    inv = np.linalg.inv(covs)
    m2 = np.einsum("...ji,jik,...jk->...j", diff, inv, diff)
    return -LOG_2PI - 0.5 * np.log(det) - 0.5 * m2


def gaussian_logpdf(x, mean, cov) -> float:
    x, mean, cov = (np.asarray(a, float) for a in (x, mean, cov))
    d = x - mean
    return float(-LOG_2PI - 0.5 * np.log(np.linalg.det(cov)) - 0.5 * d @ np.linalg.solve(cov, d))


def emission_mean(params: CdhmmParams, attacker_position) -> np.ndarray:
    """Expected position of a defender man-marking an attacker at ``attacker_position``."""
    pos = np.asarray(attacker_position, float)
    b = params.grid.bin_index(pos)
    g_o = params.grid.gamma_o.ravel()[b]
    return g_o[..., None] * pos + (1.0 - g_o)[..., None] * params.goal


def emission_loglik(params: CdhmmParams, seq: CornerSequence, t: int, j: int, n: int,
                    assignment) -> float:
    """Log-density of defender ``j``'s position at frame ``t`` under state ``n``."""
    D = seq.positions[t, seq.defenders[j]]
    if n == params.K:
        z = int(np.asarray(assignment)[j])
        return gaussian_logpdf(D, params.zone_means[z], params.zone_covs[z])
    O = seq.positions[t, seq.attackers[n]]
    b = int(params.grid.bin_index(O))
    g_o = params.grid.gamma_o.ravel()[b]
    s2 = params.grid.sigma2.ravel()[b]
    mu = g_o * O + (1.0 - g_o) * params.goal
    return float(-LOG_2PI - np.log(s2) - 0.5 * np.sum((D - mu) ** 2) / s2)


def _check_compatible(params: CdhmmParams, seq: CornerSequence):
    if seq.n_attackers != params.K or seq.n_defenders != params.K:
        raise ValueError(f"sequence {seq.sequence_id} has J={seq.n_defenders}, K={seq.n_attackers}; "
                         f"model expects {params.K}")


@dataclass
class SequenceInference:
    assignment: np.ndarray
    posteriors: list[PosteriorSummary]

    @property
    def loglik(self) -> float:
        return float(sum(p.loglik for p in self.posteriors))


def infer_sequence(params: CdhmmParams, seq: CornerSequence | PreparedSequence,
                   paths: bool = True) -> SequenceInference:
    """Forward-backward (and optionally Viterbi) for every modelled defender."""
    prep = seq if isinstance(seq, PreparedSequence) else PreparedSequence(seq, params.standardizer)
    _check_compatible(params, prep.seq)
    assignment = prep.assignment(params)
    log_A = prep.log_transitions(params, assignment)
    log_B = prep.log_emissions(params, assignment)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    out = []
    for j in range(prep.J):
        try:
            ll, gamma, xi, filt = kernels.forward_backward(log_pi, log_A[j], log_B[j])
            path = kernels.viterbi(log_pi, log_A[j], log_B[j])[0] if paths else None
        except EmissionUnderflowError as exc:
            raise EmissionUnderflowError(exc.frame, f"sequence {prep.seq.sequence_id}, defender {j}") from None
        out.append(PosteriorSummary(gamma, xi, path, ll, filt))
    return SequenceInference(assignment, out)


def forward_backward(params: CdhmmParams, seq: CornerSequence, j: int,
                     assignment=None) -> PosteriorSummary:
    prep = PreparedSequence(seq, params.standardizer)
    _check_compatible(params, seq)
    if assignment is None:
        assignment = prep.assignment(params)
    assignment = np.asarray(assignment)
    log_A = prep.log_transitions(params, assignment)[j]
    log_B = prep.log_emissions(params, assignment)[j]
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    ll, gamma, xi, filt = kernels.forward_backward(log_pi, log_A, log_B)
    path = kernels.viterbi(log_pi, log_A, log_B)[0]
    return PosteriorSummary(gamma, xi, path, ll, filt)


def viterbi(params: CdhmmParams, seq: CornerSequence, j: int, assignment=None) -> np.ndarray:
    return forward_backward(params, seq, j, assignment).path


def sequence_loglik(params: CdhmmParams, seq: CornerSequence | PreparedSequence) -> float:
    return infer_sequence(params, seq, paths=False).loglik


def hmm_inputs(params: CdhmmParams, seq: CornerSequence, assignment=None):
    """``(assignment, log_pi, log_A, log_B)`` for all defenders of ``seq``."""
    prep = PreparedSequence(seq, params.standardizer)
    if assignment is None:
        assignment = prep.assignment(params)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    return assignment, log_pi, prep.log_transitions(params, assignment), prep.log_emissions(params, assignment)
