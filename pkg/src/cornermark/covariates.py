"""Transition covariates and their dataset-level standardisation.

Feature layouts (index 0 is the bias and is never standardised)::

    man / switch: [1, dist, 1/dist, tangential rel. speed, heading alignment,
                   convergence, attacker height, attacker weight]
    zonal:        [1, mahalanobis, 1/mahalanobis, speed toward zone mean,
                   defender height, defender weight]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tracking import CornerSequence

log = logging.getLogger(__name__)

EPS = 1e-8
INV_CLIP = 1e6
MAN_DIM = 8
ZONAL_DIM = 6
KINDS = ("man_mark", "zonal", "switch")

MAN_FEATURES = ("bias", "distance", "inverse_distance", "tangential_velocity",
                "heading_alignment", "convergence", "attacker_height", "attacker_weight")
ZONAL_FEATURES = ("bias", "mahalanobis", "inverse_mahalanobis", "velocity_toward_zone",
                  "defender_height", "defender_weight")


def convergence(def_pos, def_vel, att_pos, att_vel, eps: float = EPS):
    """Closing speed of a defender-attacker pair; negative when they approach."""
    dp = np.asarray(att_pos, float) - np.asarray(def_pos, float)
    dv = np.asarray(att_vel, float) - np.asarray(def_vel, float)
    return np.sum(dv * dp, axis=-1) / (np.linalg.norm(dp, axis=-1) + eps)


def tangential_relative_velocity(def_pos, def_vel, att_pos, att_vel, eps: float = EPS):
    dp = np.asarray(att_pos, float) - np.asarray(def_pos, float)
    dv = np.asarray(att_vel, float) - np.asarray(def_vel, float)
    r_hat = dp / np.maximum(np.linalg.norm(dp, axis=-1, keepdims=True), eps)
    radial = np.sum(dv * r_hat, axis=-1, keepdims=True)
    return np.linalg.norm(dv - radial * r_hat, axis=-1)


def heading_alignment(def_vel, att_vel, eps: float = EPS):
    dv, av = np.asarray(def_vel, float), np.asarray(att_vel, float)
    denom = np.linalg.norm(dv, axis=-1) * np.linalg.norm(av, axis=-1) + eps
    return np.sum(dv * av, axis=-1) / denom


def check_spd(cov, what: str = "covariance") -> np.ndarray:
    cov = np.asarray(cov, float)
    if cov.shape[-2:] != (2, 2) or not np.allclose(cov, np.swapaxes(cov, -1, -2)):
        raise ValueError(f"{what} must be a symmetric 2x2 matrix")
    if np.any(np.linalg.eigvalsh(cov) <= 0):
        raise ValueError(f"{what} is not positive definite")
    return cov


def mahalanobis(point, mean, cov):
    cov = check_spd(cov)
    d = np.asarray(point, float) - np.asarray(mean, float)
    sol = np.linalg.solve(cov, d[..., None])[..., 0]
    return np.sqrt(np.maximum(np.sum(d * sol, axis=-1), 0.0))


def _inverse(x):
    return np.minimum(1.0 / (x + EPS), INV_CLIP)


def man_feature_block(def_pos, def_vel, att_pos, att_vel, att_height, att_weight) -> np.ndarray:
    """Man-marking covariates from broadcastable arrays; trailing axis has length 8."""
    dp, dv = np.asarray(def_pos, float), np.asarray(def_vel, float)
    ap, av = np.asarray(att_pos, float), np.asarray(att_vel, float)
    dist = np.linalg.norm(ap - dp, axis=-1)
    out = np.empty(dist.shape + (MAN_DIM,))
    out[..., 0] = 1.0
    out[..., 1] = dist
    out[..., 2] = _inverse(dist)
    out[..., 3] = tangential_relative_velocity(dp, dv, ap, av)
    out[..., 4] = heading_alignment(dv, av)
    out[..., 5] = convergence(dp, dv, ap, av)
    out[..., 6] = att_height
    out[..., 7] = att_weight
    return out


def zonal_feature_block(pos, vel, means, covs, height, weight) -> np.ndarray:
    """Zonal covariates for positions ``(..., J, 2)`` against per-defender zones."""
    p, v = np.asarray(pos, float), np.asarray(vel, float)
    diff = p - means
    inv = np.linalg.inv(covs)
    m2 = np.einsum("...ji,jik,...jk->...j", diff, inv, diff)
    mahal = np.sqrt(np.maximum(m2, 0.0))
    to_zone = -diff
    unit = to_zone / (np.linalg.norm(to_zone, axis=-1, keepdims=True) + EPS)
    out = np.empty(p.shape[:-1] + (ZONAL_DIM,))
    out[..., 0] = 1.0
    out[..., 1] = mahal
    out[..., 2] = _inverse(mahal)
    out[..., 3] = np.sum(v * unit, axis=-1)
    out[..., 4] = height
    out[..., 5] = weight
    return out


def man_features(seq: CornerSequence) -> np.ndarray:
    """Raw man-marking/switch covariates for every (frame, defender, attacker).

    Returns an array of shape ``(T, J, K, 8)``.
    """
    d_idx, a_idx = seq.defenders, seq.attackers
    return man_feature_block(seq.positions[:, d_idx, None, :], seq.velocities[:, d_idx, None, :],
                             seq.positions[:, None, a_idx, :], seq.velocities[:, None, a_idx, :],
                             seq.heights[a_idx], seq.weights[a_idx])


def zonal_features(seq: CornerSequence, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Raw zonal covariates, shape ``(T, J, 6)``.

    ``means``/``covs`` hold the zone assigned to each modelled defender, in
    defender order (shapes ``(J, 2)`` and ``(J, 2, 2)``).
    """
    d_idx = seq.defenders
    return zonal_feature_block(seq.positions[:, d_idx, :], seq.velocities[:, d_idx, :], means, covs,
                               seq.heights[d_idx], seq.weights[d_idx])


def build_covariates(seq: CornerSequence, t: int, j: int, zone_mean, zone_cov) -> dict[str, np.ndarray]:
    """Unstandardised covariates of modelled defender ``j`` at frame ``t``."""
    d, a_idx = seq.defenders[j], seq.attackers
    dp, dv = seq.positions[t, d], seq.velocities[t, d]
    ap, av = seq.positions[t, a_idx], seq.velocities[t, a_idx]
    dist = np.linalg.norm(ap - dp, axis=-1)
    man = np.column_stack([
        np.ones(len(a_idx)), dist, _inverse(dist),
        tangential_relative_velocity(dp, dv, ap, av), heading_alignment(dv, av),
        convergence(dp, dv, ap, av), seq.heights[a_idx], seq.weights[a_idx],
    ])
    mahal = mahalanobis(dp, zone_mean, zone_cov)
    to_zone = np.asarray(zone_mean, float) - dp
    toward = float(dv @ to_zone / (np.linalg.norm(to_zone) + EPS))
    zonal = np.array([1.0, mahal, _inverse(mahal), toward, seq.heights[d], seq.weights[d]])
    return {"man_mark": man, "zonal": zonal, "switch": man.copy()}


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    """Per-feature mean/std for each covariate kind, bias excluded.

    A std of 0 marks a degenerate feature; it standardises to 0.
    """

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {k: {"mean": self.mean[k].tolist(), "std": self.std[k].tolist()} for k in KINDS}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls({k: np.array(d[k]["mean"], float) for k in KINDS},
                   {k: np.array(d[k]["std"], float) for k in KINDS})

    @classmethod
    def identity(cls) -> "StandardizationStats":
        dims = {"man_mark": MAN_DIM, "zonal": ZONAL_DIM, "switch": MAN_DIM}
        return cls({k: np.zeros(n - 1) for k, n in dims.items()},
                   {k: np.ones(n - 1) for k, n in dims.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, StandardizationStats):
            return NotImplemented
        return all(np.array_equal(self.mean[k], other.mean[k]) and
                   np.array_equal(self.std[k], other.std[k]) for k in KINDS)


def _column_stats(rows: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    rows = np.asarray(rows, float).reshape(-1, rows.shape[-1])
    if rows.shape[0] < 2:
        raise ValueError(f"need at least 2 {kind} samples to fit a standardizer")
    feats = rows[:, 1:]
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(degenerate):
        log.warning("zero-variance %s feature(s) %s mapped to 0", kind,
                    np.flatnonzero(degenerate) + 1)
        std = np.where(degenerate, 0.0, std)
    return mean, std


def fit_standardizer(man_rows: np.ndarray, zonal_rows: np.ndarray,
                     switch_rows: np.ndarray | None = None) -> StandardizationStats:
    """Fit z-scoring statistics; switch covariates default to the man-mark fit."""
    m_mean, m_std = _column_stats(man_rows, "man_mark")
    z_mean, z_std = _column_stats(zonal_rows, "zonal")
    if switch_rows is None:
        s_mean, s_std = m_mean.copy(), m_std.copy()
    else:
        s_mean, s_std = _column_stats(switch_rows, "switch")
    return StandardizationStats({"man_mark": m_mean, "zonal": z_mean, "switch": s_mean},
                                {"man_mark": m_std, "zonal": z_std, "switch": s_std})


def apply_standardizer(vec: np.ndarray, stats: StandardizationStats, kind: str) -> np.ndarray:
    """Standardise the trailing axis of ``vec`` with frozen statistics."""
    vec = np.asarray(vec, float)
    mean, std = stats.mean[kind], stats.std[kind]
    out = vec.copy()
    safe = np.where(std > 0, std, 1.0)
    out[..., 1:] = np.where(std > 0, (vec[..., 1:] - mean) / safe, 0.0)
    return out
