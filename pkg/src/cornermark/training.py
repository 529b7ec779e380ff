"""EM estimation of CDHMM parameters, batch training and model files."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .covariates import (MAN_DIM, ZONAL_DIM, StandardizationStats, fit_standardizer,
                         man_features, zonal_features)
from .model import (VAR_FLOOR, CdhmmParams, MarkingBinGrid, PreparedSequence,
                    TransitionWeights, assign_zones, floor_covariance, infer_sequence)
from .tracking import DEFAULT_PITCH, Dataset, PitchGeometry

log = logging.getLogger(__name__)

MODEL_SCHEMA = "cornermark.model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class EmConfig:
    iterations: int = 15
    batch_size: int = 10
    lambda_m: float = 100.0
    lambda_z: float = 100.0
    lambda_s: float = 1000.0
    inner_max_iter: int = 100
    seed: int = 0
    tol: float | None = None
    inverse_likelihood_weighting: bool = False
    zone_means_first_frame: bool = False
    neighbour_hops: int = 1
    gamma_o_bounds: tuple[float, float] = (0.0, 1.2)
    pi_smoothing: float = 1e-3
    beta_bound: float = 50.0
    init_sigma2: float = 2.0
    init_beta_std: float = 0.1
    assignment_metric: str = "euclidean"
    safeguard: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.lambda_m, self.lambda_z, self.lambda_s) < 0:
            raise ValueError("penalties must be non-negative")
        object.__setattr__(self, "gamma_o_bounds", tuple(self.gamma_o_bounds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_o_bounds"] = list(self.gamma_o_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EM config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def penalties(self) -> tuple[float, float, float]:
        return self.lambda_m, self.lambda_z, self.lambda_s


# --------------------------------------------------------------- statistics

@dataclass
class BetaStats:
    """Transition sufficient statistics, one row per (frame, defender).

    ``man_a[r, i] = xi(i, i)`` and ``man_b[r, i] = sum_l xi(i, l)`` for man
    states; ``zonal_a``/``zonal_b`` the same for the zonal state; ``switch_c[r, l]``
    is the switch mass into attacker ``l`` (from any other state), ``switch_w[r, i]``
    the switch mass out of man state ``i`` and ``switch_wN`` out of the zonal state.
    """

    Xm: np.ndarray
    Xz: np.ndarray
    Xs: np.ndarray
    man_a: np.ndarray
    man_b: np.ndarray
    zonal_a: np.ndarray
    zonal_b: np.ndarray
    switch_c: np.ndarray
    switch_w: np.ndarray
    switch_wN: np.ndarray

    @classmethod
    def empty(cls, K: int) -> "BetaStats":
        z = np.zeros
        return cls(z((0, K, MAN_DIM)), z((0, ZONAL_DIM)), z((0, K, MAN_DIM)), z((0, K)), z((0, K)),
                   z(0), z(0), z((0, K)), z((0, K)), z(0))

    @classmethod
    def from_posteriors(cls, Xm, Xz, Xs, xi) -> "BetaStats":
        """Reduce full expected transition counts.

        ``xi`` has shape ``(R, N, N)``; covariates are aligned row for row.
        """
        K = xi.shape[-1] - 1
        man = xi[:, :K, :K]
        diag = np.diagonal(man, axis1=1, axis2=2)
        off = man.sum(axis=2) - diag
        into = man.sum(axis=1) - diag + xi[:, K, :K]
        return cls(
            Xm=Xm, Xz=Xz, Xs=Xs,
            man_a=np.ascontiguousarray(diag), man_b=xi[:, :K, :].sum(axis=2),
            zonal_a=xi[:, K, K].copy(), zonal_b=xi[:, K, :].sum(axis=1),
            switch_c=into, switch_w=off, switch_wN=xi[:, K, :K].sum(axis=1),
        )

    @classmethod
    def concat(cls, parts: list["BetaStats"]) -> "BetaStats":
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))


@dataclass
class SufficientStats:
    K: int
    n_bins: int
    loglik: float = 0.0
    n_pairs: int = 0
    n_frames: int = 0
    pi_counts: np.ndarray = None  # type: ignore[assignment]
    # zone records, one per (sequence, defender)
    zone: np.ndarray = None  # type: ignore[assignment]
    pair_loglik: np.ndarray = None  # type: ignore[assignment]
    g0: np.ndarray = None  # type: ignore[assignment]
    g0D: np.ndarray = None  # type: ignore[assignment]
    gsum: np.ndarray = None  # type: ignore[assignment]
    gD: np.ndarray = None  # type: ignore[assignment]
    gDD: np.ndarray = None  # type: ignore[assignment]
    # marking regression sums per bin, relative to the goal centre
    bin_w: np.ndarray = None  # type: ignore[assignment]
    bin_oo: np.ndarray = None  # type: ignore[assignment]
    bin_od: np.ndarray = None  # type: ignore[assignment]
    bin_dd: np.ndarray = None  # type: ignore[assignment]
    beta_parts: list = field(default_factory=list)
    _beta: BetaStats | None = None

    def __post_init__(self):
        N, B = self.K + 1, self.n_bins
        defaults = {
            "pi_counts": np.zeros(N), "zone": np.zeros(0, np.intp), "pair_loglik": np.zeros(0),
            "g0": np.zeros(0), "g0D": np.zeros((0, 2)), "gsum": np.zeros(0), "gD": np.zeros((0, 2)),
            "gDD": np.zeros((0, 2, 2)), "bin_w": np.zeros(B), "bin_oo": np.zeros(B),
            "bin_od": np.zeros(B), "bin_dd": np.zeros(B),
        }
        for k, v in defaults.items():
            if getattr(self, k) is None:
                setattr(self, k, v)

    @property
    def beta(self) -> BetaStats:
        if self._beta is None:
            self._beta = BetaStats.concat(self.beta_parts) if self.beta_parts else BetaStats.empty(self.K)
        return self._beta

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        if (self.K, self.n_bins) != (other.K, other.n_bins):
            raise ValueError("cannot merge statistics of different shapes")
        cat = np.concatenate
        return SufficientStats(
            self.K, self.n_bins, self.loglik + other.loglik, self.n_pairs + other.n_pairs,
            self.n_frames + other.n_frames, self.pi_counts + other.pi_counts,
            cat([self.zone, other.zone]), cat([self.pair_loglik, other.pair_loglik]),
            cat([self.g0, other.g0]), cat([self.g0D, other.g0D]), cat([self.gsum, other.gsum]),
            cat([self.gD, other.gD]), cat([self.gDD, other.gDD]),
            self.bin_w + other.bin_w, self.bin_oo + other.bin_oo,
            self.bin_od + other.bin_od, self.bin_dd + other.bin_dd,
            self.beta_parts + other.beta_parts,
        )


def sequence_stats(params: CdhmmParams, prep: PreparedSequence) -> SufficientStats:
    """E-step contribution of one sequence (all of its modelled defenders)."""
    inf = infer_sequence(params, prep, paths=False)
    K, J, T = params.K, prep.J, prep.T
    st = SufficientStats(K, params.grid.n_bins)
    gamma = np.stack([p.gamma for p in inf.posteriors])          # (J, T, N)
    st.loglik = inf.loglik
    st.n_pairs = J
    st.n_frames = T
    st.pi_counts = gamma[:, 0, :].sum(axis=0)

    D = prep.D.transpose(1, 0, 2)                                 # (J, T, 2)
    gz = gamma[:, :, K]
    st.zone = inf.assignment.copy()
    st.pair_loglik = np.array([p.loglik for p in inf.posteriors])
    st.g0 = gz[:, 0].copy()
    st.g0D = gz[:, 0, None] * D[:, 0]
    st.gsum = gz.sum(axis=1)
    st.gD = np.einsum("jt,jtd->jd", gz, D)
    st.gDD = np.einsum("jt,jtd,jte->jde", gz, D, D)

    gm = gamma[:, :, :K]                                          # (J, T, K)
    Op = prep.O - params.goal                                     # (T, K, 2)
    Dp = prep.D - params.goal                                     # (T, J, 2)
    bins = prep.attacker_bins(params.grid).ravel()
    w_tk = gm.sum(axis=0)
    oo = np.sum(Op * Op, axis=-1)
    od = np.einsum("jtk,tkd,tjd->tk", gm, Op, Dp)
    dd = np.einsum("jtk,tj->tk", gm, np.sum(Dp * Dp, axis=-1))
    B = params.grid.n_bins
    st.bin_w = np.bincount(bins, (w_tk).ravel(), B)
    st.bin_oo = np.bincount(bins, (w_tk * oo).ravel(), B)
    st.bin_od = np.bincount(bins, od.ravel(), B)
    st.bin_dd = np.bincount(bins, dd.ravel(), B)

    if T > 1:
        xi = np.stack([p.xi for p in inf.posteriors])             # (J, T-1, N, N)
        xi = xi.transpose(1, 0, 2, 3).reshape(-1, K + 1, K + 1)   # rows ordered (t, j)
        Xz = prep.zonal_covariates(params, inf.assignment)
        st.beta_parts = [BetaStats.from_posteriors(
            prep.Xm.reshape(-1, K, MAN_DIM), Xz.reshape(-1, ZONAL_DIM),
            prep.Xs.reshape(-1, K, MAN_DIM), xi)]
    return st


def e_step(params: CdhmmParams, data) -> SufficientStats:
    """Accumulate posterior statistics over a dataset.

    ``data`` is a :class:`Dataset` or a list of :class:`PreparedSequence`.
    """
    preps = _prepare(data, params)
    total = SufficientStats(params.K, params.grid.n_bins)
    for prep in preps:
        total = total + sequence_stats(params, prep)
    return total


def _prepare(data, params: CdhmmParams) -> list[PreparedSequence]:
    if isinstance(data, Dataset):
        return [PreparedSequence(s, params.standardizer, params.grid) for s in data]
    return list(data)


# ----------------------------------------------------------------- M-steps

def _zone_weights(st: SufficientStats, mask: np.ndarray, inverse_likelihood: bool) -> np.ndarray:
    if not inverse_likelihood:
        return np.ones(int(mask.sum()))
    lw = -st.pair_loglik[mask]
    return np.exp(lw - lw.max())


def m_step_zones(st: SufficientStats, params: CdhmmParams, config: EmConfig = EmConfig()):
    """Closed-form zone means/covariances; returns ``(means, covs)``.

    Means pool zonal occupancy over all frames by default, which is the exact
    maximiser of the expected complete-data log-likelihood given the zone
    assignment. ``zone_means_first_frame`` restricts them to frame 0.
    """
    means = params.zone_means.copy()
    covs = params.zone_covs.copy()
    for z in range(params.K):
        mask = st.zone == z
        if not mask.any():
            log.warning("zone %d received no defenders; left unchanged", z)
            continue
        w = _zone_weights(st, mask, config.inverse_likelihood_weighting)
        if config.zone_means_first_frame:
            den = float(w @ st.g0[mask])
            num = w @ st.g0D[mask]
        else:
            den = float(w @ st.gsum[mask])
            num = w @ st.gD[mask]
        sw = float(w @ st.gsum[mask])
        if den <= 1e-300 or sw <= 1e-300:
            log.warning("zone %d has no occupancy mass; left unchanged", z)
            continue
        mu = num / den
        sx = w @ st.gD[mask]
        sxx = np.einsum("p,pde->de", w, st.gDD[mask])
        cov = (sxx - np.outer(mu, sx) - np.outer(sx, mu) + sw * np.outer(mu, mu)) / sw
        means[z] = mu
        covs[z] = floor_covariance(cov)
    return means, covs


def m_step_gamma(st: SufficientStats, grid: MarkingBinGrid, config: EmConfig = EmConfig()) -> MarkingBinGrid:
    """Constrained weighted least squares for marking tightness per bin.

    With the goal centre as origin the constrained mean is ``gamma_o * (O - G)``,
    so each bin solves a one-parameter regression pooled over its neighbours.
    """
    g_o = grid.gamma_o.ravel().copy()
    s2 = grid.sigma2.ravel().copy()
    lo, hi = config.gamma_o_bounds
    for b, nb in enumerate(grid.neighbourhood(config.neighbour_hops)):
        w = st.bin_w[nb].sum()
        oo = st.bin_oo[nb].sum()
        if w <= 1e-12 or oo <= 1e-300:
            continue
        od = st.bin_od[nb].sum()
        dd = st.bin_dd[nb].sum()
        g = min(max(od / oo, lo), hi)
        resid = max(dd - 2 * g * od + g * g * oo, 0.0)
        g_o[b] = g
        s2[b] = max(resid / (2 * w), VAR_FLOOR)
    return grid.with_values(g_o, s2)


def m_step_pi(st: SufficientStats, smoothing: float = 1e-3) -> np.ndarray:
    c = st.pi_counts + smoothing
    return c / c.sum()


# ------------------------------------------------ transition Q and gradient

def _q_logistic(beta, X, a, b):
    return kernels.logistic_q(X, a, b, beta)


def _lse(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _q_switch(beta_s, bs: BetaStats):
    """Switch part of Q and its gradient in O(rows * K)."""
    X = bs.Xs
    R, K = bs.switch_c.shape
    if R == 0:
        return 0.0, np.zeros_like(beta_s)
    s = X @ beta_s                                                # (R, K)
    rows = np.arange(R)
    am = np.argmax(s, axis=1)
    lse_all = _lse(s)
    p = np.exp(s - lse_all[:, None])
    s_wo = s.copy()
    s_wo[rows, am] = -np.inf
    lse_wo = _lse(s_wo)
    # log-normaliser of the softmax that excludes attacker i
    lse_ex = lse_all[:, None] + np.log1p(-np.minimum(p, 0.5))
    lse_ex[rows, am] = lse_wo
    w, c, wN = bs.switch_w, bs.switch_c, bs.switch_wN
    q = float(np.sum(c * s) - np.sum(w * lse_ex) - np.sum(wN * lse_all))

    r = w / (1.0 - np.minimum(p, 0.5))
    r[rows, am] = 0.0
    R_tot = r.sum(axis=1, keepdims=True)
    from_am = w[rows, am][:, None] * np.exp(s_wo - lse_wo[:, None])
    out_mass = p * (R_tot - r) + from_am
    out_mass[rows, am] = p[rows, am] * R_tot[:, 0]
    e = c - out_mass - wN[:, None] * p
    grad = np.einsum("rk,rkd->d", e, X)
    return q, grad


def q_transition_parts(beta: TransitionWeights, bs: BetaStats):
    """Unpenalised data terms of Q: ``{m, z, s} -> (value, gradient)``."""
    return {
        "m": _q_logistic(beta.m, bs.Xm.reshape(-1, MAN_DIM), bs.man_a.ravel(), bs.man_b.ravel()),
        "z": _q_logistic(beta.z, bs.Xz, bs.zonal_a, bs.zonal_b),
        "s": _q_switch(beta.s, bs),
    }


def q_transition(beta: TransitionWeights, stats, penalties=(100.0, 100.0, 1000.0)) -> float:
    """Penalised expected complete-data log-likelihood of the transition weights."""
    bs = stats.beta if isinstance(stats, SufficientStats) else stats
    parts = q_transition_parts(beta, bs)
    lm, lz, ls = penalties
    pen = 0.5 * (lm * beta.m @ beta.m + lz * beta.z @ beta.z + ls * beta.s @ beta.s)
    return parts["m"][0] + parts["z"][0] + parts["s"][0] - pen


def q_gradients(beta: TransitionWeights, stats, penalties=(100.0, 100.0, 1000.0)) -> TransitionWeights:
    bs = stats.beta if isinstance(stats, SufficientStats) else stats
    parts = q_transition_parts(beta, bs)
    lm, lz, ls = penalties
    return TransitionWeights(parts["m"][1] - lm * beta.m, parts["z"][1] - lz * beta.z,
                             parts["s"][1] - ls * beta.s)


ACTIVE_MASS = 1e-10


def _active_rows(bs: BetaStats) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose transition mass is non-negligible, for man and switch terms."""
    man = bs.man_b.ravel() > ACTIVE_MASS
    sw = (bs.switch_w.sum(axis=1) + bs.switch_wN + bs.switch_c.sum(axis=1)) > ACTIVE_MASS
    return man, sw


def m_step_beta(stats, beta: TransitionWeights, config: EmConfig = EmConfig()) -> TransitionWeights:
    """Maximise the penalised Q with L-BFGS-B, one block per transition type.

    The three blocks share no parameters, so optimising them separately is the
    same problem as the joint one. The search runs on rows carrying posterior
    mass; the exact Q decides whether the result is kept.
    """
    bs = stats.beta if isinstance(stats, SufficientStats) else stats
    lm, lz, ls = config.penalties
    man, sw = _active_rows(bs)
    X_m = bs.Xm.reshape(-1, MAN_DIM)
    a_m, b_m = bs.man_a.ravel(), bs.man_b.ravel()
    sub = BetaStats(bs.Xm, bs.Xz, bs.Xs[sw], bs.man_a, bs.man_b, bs.zonal_a, bs.zonal_b,
                    bs.switch_c[sw], bs.switch_w[sw], bs.switch_wN[sw])
    blocks = {
        "m": (lambda b: _q_logistic(b, X_m[man], a_m[man], b_m[man]),
              lambda b: _q_logistic(b, X_m, a_m, b_m), lm, beta.m),
        "z": (lambda b: _q_logistic(b, bs.Xz, bs.zonal_a, bs.zonal_b), None, lz, beta.z),
        "s": (lambda b: _q_switch(b, sub), lambda b: _q_switch(b, bs), ls, beta.s),
    }
    new = {}
    for name, (fn, exact, lam, b0) in blocks.items():
        def neg(b, fn=fn, lam=lam):
            q, g = fn(b)
            return -(q - 0.5 * lam * b @ b), -(g - lam * b)

        f0 = neg(b0)[0]
        ok = False
        try:
            res = minimize(neg, b0, jac=True, method="L-BFGS-B",
                           bounds=[(-config.beta_bound, config.beta_bound)] * len(b0),
                           options={"maxiter": config.inner_max_iter, "ftol": 1e-13, "gtol": 1e-9})
            ok = bool(np.all(np.isfinite(res.x)) and np.isfinite(res.fun) and res.fun <= f0)
            if ok and exact is not None:
                q_old = exact(b0)[0] - 0.5 * lam * b0 @ b0
                q_new = exact(res.x)[0] - 0.5 * lam * res.x @ res.x
                ok = q_new >= q_old
        except (ValueError, FloatingPointError) as exc:
            log.warning("beta_%s optimisation failed: %s", name, exc)
        new[name] = res.x if ok else b0
        if not ok:
            log.debug("beta_%s kept at previous value", name)
    return TransitionWeights(new["m"], new["z"], new["s"])


def penalty(beta: TransitionWeights, config: EmConfig) -> float:
    lm, lz, ls = config.penalties
    return 0.5 * (lm * beta.m @ beta.m + lz * beta.z @ beta.z + ls * beta.s @ beta.s)


def objective(stats: SufficientStats, params: CdhmmParams, config: EmConfig) -> float:
    """Penalised total observation log-likelihood."""
    return stats.loglik - penalty(params.beta, config)


# ---------------------------------------------------------------- EM driver

def initialize(seed: int, K: int, config: EmConfig = EmConfig(), team_id: str = "",
               delivery_type: str = "", pitch: PitchGeometry = DEFAULT_PITCH) -> CdhmmParams:
    """Random starting point for EM.

    Zone means are uniform over a box straddling the six-yard line (its full
    width, +-5 m in depth), zone covariances ``2 I``, every bin ``gamma_o = 0.8``,
    weights ``N(0, 0.1^2)`` and a uniform initial state distribution.
    """
    rng = np.random.default_rng(seed)
    half = pitch.six_yard_width / 2
    x = rng.uniform(pitch.six_yard_line_x - 5.0, pitch.six_yard_line_x + 5.0, K)
    y = rng.uniform(-half, half, K)
    beta = TransitionWeights.from_flat(rng.normal(0.0, config.init_beta_std, 2 * MAN_DIM + ZONAL_DIM))
    return CdhmmParams(
        team_id=team_id, delivery_type=delivery_type, K=K,
        zone_means=np.column_stack([x, y]), zone_covs=np.tile(2.0 * np.eye(2), (K, 1, 1)),
        grid=MarkingBinGrid.default(0.8, config.init_sigma2, pitch),
        beta=beta, pi=np.full(K + 1, 1.0 / (K + 1)), goal=pitch.goal_center,
        standardizer=StandardizationStats.identity(), assignment_metric=config.assignment_metric,
    )


def fit_dataset_standardizer(ds: Dataset, params: CdhmmParams) -> StandardizationStats:
    """Standardiser for a training set; zonal features use the current zones."""
    man_rows, zonal_rows = [], []
    for seq in ds:
        man_rows.append(man_features(seq).reshape(-1, MAN_DIM))
        z = assign_zones(seq.positions[0, seq.defenders], params.zone_means, params.assignment_metric)
        zonal_rows.append(zonal_features(seq, params.zone_means[z], params.zone_covs[z]).reshape(-1, ZONAL_DIM))
    return fit_standardizer(np.concatenate(man_rows), np.concatenate(zonal_rows))


@dataclass
class FitResult:
    params: CdhmmParams
    ll_trace: list[float]
    objective_trace: list[float]
    seed: int
    rejected_blocks: list[list[str]] = field(default_factory=list)

    @property
    def final_loglik(self) -> float:
        return self.ll_trace[-1]


def _group_keys(ds: Dataset) -> tuple[str, str, int]:
    if len(ds) == 0:
        raise ValueError("cannot fit a model to an empty dataset")
    s0 = ds[0]
    K = s0.n_attackers
    if K < 2:
        raise ValueError("training needs at least two attackers per sequence")
    for s in ds:
        if s.n_attackers != K or s.n_defenders != K:
            raise ValueError(f"sequence {s.sequence_id}: all sequences need J = K = {K}")
    return s0.defending_team_id, s0.delivery_type, K


def em_fit(ds: Dataset, config: EmConfig = EmConfig(), seed: int | None = None,
           init: CdhmmParams | None = None) -> FitResult:
    """Run EM for ``config.iterations`` iterations from a seeded initialisation.

    Every iteration proposes zones, marking grid, weights and initial
    distribution together. When ``config.safeguard`` is on and the proposal
    lowers the penalised log-likelihood, the blocks that are not exact
    maximisers of their expected complete-data term (zones, then the marking
    grid, then the smoothed initial distribution) are rolled back in turn;
    if even the weight-only step does not improve, the iteration is a no-op.
    """
    team, delivery, K = _group_keys(ds)
    seed = config.seed if seed is None else seed
    params = init if init is not None else initialize(seed, K, config, team, delivery)
    if init is None:
        params = params.replace(standardizer=fit_dataset_standardizer(ds, params))
    preps = [PreparedSequence(s, params.standardizer, params.grid) for s in ds]

    stats = e_step(params, preps)
    obj = objective(stats, params, config)
    ll_trace, obj_trace, rejected = [stats.loglik], [obj], []
    for it in range(config.iterations):
        means, covs = m_step_zones(stats, params, config)
        grid = m_step_gamma(stats, params.grid, config)
        beta = m_step_beta(stats, params.beta, config)
        pi = m_step_pi(stats, config.pi_smoothing)
        full = params.replace(zone_means=means, zone_covs=covs, grid=grid, beta=beta, pi=pi)
        candidates = [([], full)]
        if config.safeguard:
            no_zone = full.replace(zone_means=params.zone_means, zone_covs=params.zone_covs)
            candidates += [
                (["zones"], no_zone),
                (["zones", "grid"], no_zone.replace(grid=params.grid)),
                (["zones", "grid", "pi"], no_zone.replace(grid=params.grid, pi=params.pi)),
            ]
        accepted = None
        for dropped, cand in candidates:
            cand_stats = e_step(cand, preps)
            cand_obj = objective(cand_stats, cand, config)
            if not config.safeguard or cand_obj >= obj:
                accepted = (dropped, cand, cand_stats, cand_obj)
                break
        if accepted is None:
            dropped, cand, cand_stats, cand_obj = ["all"], params, stats, obj
        else:
            dropped, cand, cand_stats, cand_obj = accepted
        if dropped:
            log.info("iteration %d: rolled back %s", it + 1, ",".join(dropped))
        rejected.append(dropped)
        prev = obj
        params, stats, obj = cand, cand_stats, cand_obj
        ll_trace.append(stats.loglik)
        obj_trace.append(obj)
        log.debug("seed %d iteration %d: loglik %.6f objective %.6f", seed, it + 1, stats.loglik, obj)
        if config.tol is not None and abs(obj - prev) < config.tol:
            break
    return FitResult(params, ll_trace, obj_trace, seed, rejected)


@dataclass
class TrainedModelBundle:
    params: CdhmmParams
    seeds: list[int]
    final_logliks: list[float]
    ll_traces: list[list[float]]
    objective_traces: list[list[float]]
    config: EmConfig
    best_seed: int


def batch_train(ds: Dataset, config: EmConfig = EmConfig()) -> TrainedModelBundle:
    """Fit ``config.batch_size`` seeds and keep the highest-likelihood model."""
    results: list[FitResult] = []
    seeds = list(range(config.seed, config.seed + config.batch_size))
    for s in seeds:
        try:
            results.append(em_fit(ds, config, s))
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("seed %d failed: %s", s, exc)
    if not results:
        raise RuntimeError("every seed in the batch failed")
    best = max(results, key=lambda r: (r.final_loglik, -r.seed))
    return TrainedModelBundle(
        params=best.params, seeds=[r.seed for r in results],
        final_logliks=[r.final_loglik for r in results],
        ll_traces=[r.ll_trace for r in results],
        objective_traces=[r.objective_trace for r in results],
        config=config, best_seed=best.seed,
    )


# ------------------------------------------------------------ model files

class ModelFormatError(ValueError):
    pass


def params_to_dict(params: CdhmmParams, config: EmConfig | None = None,
                   ll_trace: list[float] | None = None) -> dict:
    g = params.grid
    return {
        "schema": MODEL_SCHEMA,
        "version": MODEL_VERSION,
        "team_id": params.team_id,
        "delivery_type": params.delivery_type,
        "K": params.K,
        "zones": [{"mean": m.tolist(), "cov": c.tolist()} for m, c in zip(params.zone_means, params.zone_covs)],
        "gamma_grid": {
            "origin": g.origin.tolist(), "bin_size": g.bin_size, "shape": list(g.shape),
            "cells": [{"gamma_o": float(a), "sigma2": float(b)}
                      for a, b in zip(g.gamma_o.ravel(), g.sigma2.ravel())],
        },
        "beta": {"m": params.beta.m.tolist(), "z": params.beta.z.tolist(), "s": params.beta.s.tolist()},
        "pi": params.pi.tolist(),
        "goal": params.goal.tolist(),
        "assignment_metric": params.assignment_metric,
        "standardizer": params.standardizer.to_dict(),
        "em_config": None if config is None else config.to_dict(),
        "ll_trace": [] if ll_trace is None else [float(v) for v in ll_trace],
    }


def params_from_dict(d: dict) -> CdhmmParams:
    if d.get("schema") != MODEL_SCHEMA:
        raise ModelFormatError("not a cornermark model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r} (expected {MODEL_VERSION})")
    try:
        gg = d["gamma_grid"]
        shape = tuple(gg["shape"])
        grid = MarkingBinGrid(
            np.array(gg["origin"], float), float(gg["bin_size"]),
            np.array([c["gamma_o"] for c in gg["cells"]], float).reshape(shape),
            np.array([c["sigma2"] for c in gg["cells"]], float).reshape(shape),
        )
        return CdhmmParams(
            team_id=d["team_id"], delivery_type=d["delivery_type"], K=int(d["K"]),
            zone_means=np.array([z["mean"] for z in d["zones"]], float).reshape(-1, 2),
            zone_covs=np.array([z["cov"] for z in d["zones"]], float).reshape(-1, 2, 2),
            grid=grid,
            beta=TransitionWeights(d["beta"]["m"], d["beta"]["z"], d["beta"]["s"]),
            pi=np.array(d["pi"], float), goal=np.array(d["goal"], float),
            standardizer=StandardizationStats.from_dict(d["standardizer"]),
            assignment_metric=d.get("assignment_metric", "euclidean"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc


def dumps_model(params: CdhmmParams, config: EmConfig | None = None,
                ll_trace: list[float] | None = None) -> str:
    return json.dumps(params_to_dict(params, config, ll_trace), indent=1) + "\n"


def save_model(params: CdhmmParams, path: str | Path, config: EmConfig | None = None,
               ll_trace: list[float] | None = None) -> None:
    Path(path).write_text(dumps_model(params, config, ll_trace), encoding="utf-8")


def load_model_document(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"cannot parse model file {path}: {exc.msg}") from exc


def load_model(path: str | Path) -> CdhmmParams:
    return params_from_dict(load_model_document(path))


def params_equal(a: CdhmmParams, b: CdhmmParams) -> bool:
    """Exact field-for-field equality."""
    return params_to_dict(a) == params_to_dict(b) and all(
        math.isclose(x, y, rel_tol=0, abs_tol=0) for x, y in zip(a.pi, b.pi))
