"""Sample synthetic corner datasets from a known CDHMM.

Attackers follow speed-capped random walks; every modelled defender draws its
latent state from the model's own kernel, with covariates computed from the
scene as it is generated, and its position from the matching emission.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariates import (MAN_DIM, ZONAL_DIM, StandardizationStats, apply_standardizer,
                         fit_standardizer, man_feature_block, man_features, zonal_feature_block,
                         zonal_features)
from .model import (CdhmmParams, MarkingBinGrid, PreparedSequence, TransitionWeights,
                    assign_zones, log_transition_matrices)
from .tracking import (ATTACKING, DEFENDING, DEFAULT_PITCH, FRAME_DT, CornerSequence, Dataset)

MAX_SPEED = 9.0
LATENT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScenarioSpec:
    """What to simulate.

    ``accel_std`` is the per-second standard deviation of attacker velocity
    innovations; ``velocity_noise`` perturbs defender velocities around the
    velocity of their emission mean.
    """

    params: CdhmmParams
    T: int = 75
    n_sequences: int = 100
    seed: int = 0
    max_speed: float = MAX_SPEED
    accel_std: float = 4.0
    velocity_noise: float = 0.5
    attacker_box: tuple[float, float, float, float] = (-9.0, 3.0, -12.0, 12.0)
    goalkeeper: bool = True
    smooth: float = 0.0
    team_id: str = "SYN"
    delivery_type: str = "inswing"
    game_size: int = 1
    max_assignment_draws: int = 200

    def __post_init__(self):
        if not 2 <= self.T <= 150:
            raise ValueError("T must lie in [2, 150]")
        if self.max_speed <= 0 or self.max_speed > MAX_SPEED:
            raise ValueError(f"max_speed must lie in (0, {MAX_SPEED}]")
        if not 0.0 <= self.smooth < 1.0:
            raise ValueError("smooth must lie in [0, 1)")

    @property
    def K(self) -> int:
        return self.params.K


@dataclass(frozen=True, eq=False)
class LatentTruth:
    sequence_id: str
    states: np.ndarray        # (J, T)
    assignment: np.ndarray    # (J,)

    def to_dict(self) -> dict:
        return {"schema_version": LATENT_SCHEMA_VERSION, "sequence_id": self.sequence_id,
                "states": self.states.tolist(), "zone_assignment": self.assignment.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentTruth":
        return cls(d["sequence_id"], np.array(d["states"], np.intp), np.array(d["zone_assignment"], np.intp))


# -------------------------------------------------------------- truth params

def default_truth(K: int = 10, sigma2: float = 0.25, zone_var: float = 1.0,
                  team_id: str = "SYN", delivery_type: str = "inswing",
                  standardizer: StandardizationStats | None = None) -> CdhmmParams:
    """Ground truth used by the recovery tests.

    Zones sit on a two-row grid in front of goal, marking tightness falls from
    0.9 near goal to 0.6 far out, and transitions are persistent.
    """
    cols = (K + 1) // 2
    ys = np.linspace(-8.0, 8.0, cols) if cols > 1 else np.zeros(1)
    means = np.array([(x, y) for x in (-8.0, -4.0) for y in ys])[:K]
    grid = MarkingBinGrid.default(0.8, sigma2)
    nx, ny = grid.shape
    g_o = np.repeat(np.linspace(0.9, 0.6, nx)[:, None], ny, axis=1)
    beta = TransitionWeights(
        m=[3.5, -0.6, 0.0, 0.0, 0.3, -0.2, 0.0, 0.0],
        z=[3.5, -0.4, 0.0, 0.2, 0.0, 0.0],
        s=[0.0, -1.5, 0.4, 0.0, 0.2, 0.3, 0.0, 0.0],
    )
    pi = np.concatenate([np.full(K, 0.5 / K), [0.5]])
    params = CdhmmParams(team_id, delivery_type, K, means, np.tile(zone_var * np.eye(2), (K, 1, 1)),
                         grid.with_values(g_o, grid.sigma2), beta, pi)
    if standardizer is None:
        standardizer = pilot_standardizer(params)
    return params.replace(standardizer=standardizer)


def pilot_standardizer(params: CdhmmParams, n_sequences: int = 20, T: int = 75, seed: int = 12345):
    """Fit feature statistics on a pilot run whose transitions use only biases."""
    b = params.beta
    bias_only = TransitionWeights(np.r_[b.m[0], np.zeros(MAN_DIM - 1)],
                                  np.r_[b.z[0], np.zeros(ZONAL_DIM - 1)], np.zeros(MAN_DIM))
    pilot = params.replace(beta=bias_only, standardizer=StandardizationStats.identity())
    spec = ScenarioSpec(pilot, T=T, n_sequences=n_sequences, seed=seed)
    ds, truths = generate_dataset(spec)
    man, zon = [], []
    for seq, tr in zip(ds, truths):
        man.append(man_features(seq).reshape(-1, MAN_DIM))
        a = tr.assignment
        zon.append(zonal_features(seq, params.zone_means[a], params.zone_covs[a]).reshape(-1, ZONAL_DIM))
    return fit_standardizer(np.concatenate(man), np.concatenate(zon))


# ---------------------------------------------------------------- simulation

def _attackers(spec: ScenarioSpec, rng: np.random.Generator):
    K, T = spec.K, spec.T
    x0, x1, y0, y1 = spec.attacker_box
    pos = np.empty((T, K, 2))
    vel = np.empty((T, K, 2))
    pos[0] = np.column_stack([rng.uniform(x0, x1, K), rng.uniform(y0, y1, K)])
    v = rng.normal(0.0, 1.5, (K, 2))
    step = spec.accel_std * np.sqrt(FRAME_DT)
    for t in range(T):
        speed = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.where(speed > spec.max_speed, v * spec.max_speed / np.maximum(speed, 1e-12), v)
        vel[t] = v
        if t + 1 < T:
            pos[t + 1] = pos[t] + v * FRAME_DT
            v = v + rng.normal(0.0, step, (K, 2))
    return pos, vel


def _man_means(params: CdhmmParams, att_pos, att_vel):
    g = params.grid
    g_o = g.gamma_o.ravel()[g.bin_index(att_pos)][:, None]
    return g_o * att_pos + (1 - g_o) * params.goal, g_o * att_vel


def generate_sequence(spec: ScenarioSpec, seed: int, sequence_id: str | None = None,
                      order: int | None = None) -> tuple[CornerSequence, LatentTruth]:
    """One synthetic corner and its latent state paths."""
    params = spec.params
    K, T = spec.K, spec.T
    N = K + 1
    rng = np.random.default_rng(seed)
    att_pos, att_vel = _attackers(spec, rng)
    att_h = rng.uniform(1.70, 1.95, K)
    att_w = rng.uniform(65.0, 90.0, K)
    def_h = rng.uniform(1.70, 1.95, K)
    def_w = rng.uniform(65.0, 90.0, K)

    chol = np.linalg.cholesky(params.zone_covs)
    sd = np.sqrt(params.grid.sigma2.ravel())
    bins_of = params.grid.bin_index

    states = np.empty((K, T), dtype=np.intp)
    D = np.empty((T, K, 2))
    V = np.empty((T, K, 2))

    # Frame 0: states from pi, zonal defenders on distinct random zones. The
    # model re-derives zones by matching all frame-0 positions to zone means,
    # so draws are repeated until that matching agrees with every zonal draw.
    states[:, 0] = rng.choice(N, size=K, p=params.pi)
    man_mu, man_v = _man_means(params, att_pos[0], att_vel[0])
    b0 = bins_of(att_pos[0])
    zonal = states[:, 0] == K
    for attempt in range(spec.max_assignment_draws):
        perm = rng.permutation(K)
        for j in range(K):
            s = states[j, 0]
            if s == K:
                D[0, j] = params.zone_means[perm[j]] + chol[perm[j]] @ rng.standard_normal(2)
                V[0, j] = rng.normal(0.0, spec.velocity_noise, 2)
            else:
                D[0, j] = man_mu[s] + sd[b0[s]] * rng.standard_normal(2)
                V[0, j] = man_v[s] + rng.normal(0.0, spec.velocity_noise, 2)
        assignment = assign_zones(D[0], params.zone_means, params.assignment_metric)
        if np.array_equal(assignment[zonal], perm[zonal]):
            break
    z_mean = params.zone_means[assignment]
    z_cov = params.zone_covs[assignment]
    z_chol = chol[assignment]

    for t in range(T - 1):
        lA = _kernel_rows(params, D[t], V[t], att_pos[t], att_vel[t], att_h, att_w, def_h, def_w,
                          z_mean, z_cov)
        probs = np.exp(lA[np.arange(K), states[:, t]])
        states[:, t + 1] = [rng.choice(N, p=p / p.sum()) for p in probs]
        man_mu, man_v = _man_means(params, att_pos[t + 1], att_vel[t + 1])
        b = bins_of(att_pos[t + 1])
        for j in range(K):
            s = states[j, t + 1]
            if s == K:
                mu, mv = z_mean[j], np.zeros(2)
                draw = mu + z_chol[j] @ rng.standard_normal(2)
            else:
                mu, mv = man_mu[s], man_v[s]
                draw = mu + sd[b[s]] * rng.standard_normal(2)
            if spec.smooth > 0 and states[j, t] == s:
                draw = mu + spec.smooth * (D[t, j] - _prev_mean(params, att_pos[t], s, z_mean[j])) \
                    + np.sqrt(1 - spec.smooth ** 2) * (draw - mu)
            D[t + 1, j] = draw
            V[t + 1, j] = mv + rng.normal(0.0, spec.velocity_noise, 2)

    seq = _assemble(spec, seed, sequence_id, order, att_pos, att_vel, D, V, att_h, att_w, def_h, def_w, rng)
    return seq, LatentTruth(seq.sequence_id, states, assignment)


def _prev_mean(params, att_pos_t, s, zone_mean):
    if s == params.K:
        return zone_mean
    return _man_means(params, att_pos_t[s:s + 1], np.zeros((1, 2)))[0][0]


def _kernel_rows(params, D, V, O, VO, att_h, att_w, def_h, def_w, z_mean, z_cov):
    """Log transition matrix of every defender at one frame, ``(J, N, N)``."""
    man = man_feature_block(D[:, None, :], V[:, None, :], O[None], VO[None], att_h, att_w)
    zon = zonal_feature_block(D, V, z_mean, z_cov, def_h, def_w)
    st = params.standardizer
    return log_transition_matrices(params.beta, apply_standardizer(man, st, "man_mark"),
                                   apply_standardizer(zon, st, "zonal"),
                                   apply_standardizer(man, st, "switch"))


def _assemble(spec, seed, sequence_id, order, att_pos, att_vel, D, V, att_h, att_w, def_h, def_w, rng):
    K, T = spec.K, spec.T
    ids = [f"D{j}" for j in range(K)] + [f"A{k}" for k in range(K)]
    teams = [DEFENDING] * K + [ATTACKING] * K
    pos = [D, att_pos]
    vel = [V, att_vel]
    heights = [def_h, att_h]
    weights = [def_w, att_w]
    gk = [False] * (2 * K)
    if spec.goalkeeper:
        ids.append("GK")
        teams.append(DEFENDING)
        gk.append(True)
        g = DEFAULT_PITCH.goal_center + np.array([0.5, 0.0])
        pos.append(np.tile(g, (T, 1, 1)) + rng.normal(0.0, 0.2, (T, 1, 2)))
        vel.append(np.zeros((T, 1, 2)))
        heights.append(np.array([1.90]))
        weights.append(np.array([85.0]))
    delivery = min(25, T // 3)
    contact = min(delivery + 25, T - 1)
    sid = sequence_id if sequence_id is not None else f"{spec.team_id}-{seed}"
    game = None if spec.game_size <= 0 or order is None else f"G{order // spec.game_size}"
    return CornerSequence(
        sequence_id=sid, delivery_type=spec.delivery_type, defending_team_id=spec.team_id,
        player_ids=tuple(ids), teams=tuple(teams), is_goalkeeper=np.array(gk),
        heights=np.concatenate(heights), weights=np.concatenate(weights),
        positions=np.concatenate(pos, axis=1), velocities=np.concatenate(vel, axis=1),
        delivery_frame=delivery, first_contact_frame=contact,
        first_contact_player_id=f"A{int(rng.integers(K))}", canonical=True,
        game_id=game, end_frame=T - 1, order=order,
    )


def generate_dataset(spec: ScenarioSpec) -> tuple[Dataset, list[LatentTruth]]:
    """``spec.n_sequences`` independent corners; sequence ``i`` uses its own seed stream."""
    root = np.random.SeedSequence(spec.seed)
    seqs, truths = [], []
    for i, child in enumerate(root.spawn(spec.n_sequences)):
        seed = int(child.generate_state(1)[0])
        seq, tr = generate_sequence(spec, seed, f"{spec.team_id}-{spec.delivery_type}-{i:04d}", order=i)
        seqs.append(seq)
        truths.append(tr)
    return Dataset(tuple(seqs)), truths


def save_latents(truths, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in truths:
            fh.write(json.dumps(tr.to_dict(), separators=(",", ":")) + "\n")


def load_latents(path: str | Path) -> list[LatentTruth]:
    with open(path, encoding="utf-8") as fh:
        return [LatentTruth.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- oracles

MAX_ENUMERATION = 1024


def enumerate_hmm(log_pi, log_A, log_B):
    """Exact ``(loglik, gamma, xi)`` by summing over every state path."""
    log_pi = np.asarray(log_pi, float)
    log_A = np.asarray(log_A, float)
    log_B = np.asarray(log_B, float)
    T, N = log_B.shape
    if N ** T > MAX_ENUMERATION:
        raise ValueError(f"{N}^{T} paths exceed the enumeration limit of {MAX_ENUMERATION}")
    paths = np.array(list(itertools.product(range(N), repeat=T)), dtype=np.intp)
    with np.errstate(invalid="ignore"):
        lw = log_pi[paths[:, 0]] + log_B[np.arange(T), paths].sum(axis=1)
        for t in range(T - 1):
            lw = lw + log_A[t, paths[:, t], paths[:, t + 1]]
    m = lw.max()
    w = np.exp(lw - m)
    total = w.sum()
    loglik = float(m + np.log(total))
    p = w / total
    gamma = np.zeros((T, N))
    xi = np.zeros((max(T - 1, 0), N, N))
    for t in range(T):
        np.add.at(gamma[t], paths[:, t], p)
        if t < T - 1:
            np.add.at(xi[t], (paths[:, t], paths[:, t + 1]), p)
    return loglik, gamma, xi


def enumerate_posterior(params: CdhmmParams, seq: CornerSequence, j: int, assignment=None):
    """Exact posteriors of defender ``j`` for tiny instances (``N**T <= 1024``)."""
    if params.N ** seq.n_frames > MAX_ENUMERATION:
        raise ValueError("instance too large to enumerate")
    prep = PreparedSequence(seq, params.standardizer)
    if assignment is None:
        assignment = prep.assignment(params)
    assignment = np.asarray(assignment)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    return enumerate_hmm(log_pi, prep.log_transitions(params, assignment)[j],
                         prep.log_emissions(params, assignment)[j])


# ---------------------------------------------------------------- recovery

def recovery_report(fitted: CdhmmParams, truth: CdhmmParams, ds: Dataset,
                    latents: list[LatentTruth], min_bin_samples: int = 20) -> dict:
    """Compare a fitted model with the generating one.

    Zones are matched by minimum total Euclidean distance between means. The
    marking-tightness error averages ``|gamma_o|`` differences over bins that hold
    at least ``min_bin_samples`` truly man-marked attacker observations.
    """
    from scipy.optimize import linear_sum_assignment

    from .model import infer_sequence

    cost = np.linalg.norm(fitted.zone_means[:, None] - truth.zone_means[None], axis=-1)
    r, c = linear_sum_assignment(cost)
    zone_rmse = float(np.sqrt(np.mean(cost[r, c] ** 2)))

    counts = np.zeros(truth.grid.n_bins)
    hits = total = 0
    for seq, lat in zip(ds, latents):
        O = seq.positions[:, seq.attackers]
        man = lat.states < truth.K
        marked = lat.states[man]
        frames = np.nonzero(man)[1]
        np.add.at(counts, truth.grid.bin_index(O[frames, marked]), 1)
        inf = infer_sequence(fitted, seq)
        paths = np.stack([p.path for p in inf.posteriors])
        hits += int(np.sum(paths == lat.states))
        total += lat.states.size
    used = counts >= min_bin_samples
    gdiff = np.abs(fitted.grid.gamma_o.ravel() - truth.grid.gamma_o.ravel())[used]
    return {
        "zone_rmse": zone_rmse,
        "zone_matching": c.tolist(),
        "gamma_o_mae": float(gdiff.mean()) if gdiff.size else float("nan"),
        "gamma_bins_used": int(used.sum()),
        "viterbi_accuracy": hits / total if total else float("nan"),
    }
