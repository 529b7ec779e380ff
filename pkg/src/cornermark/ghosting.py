"""Role-conditioned ghost defenders and the counterfactual metrics built on them."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, runtime_checkable

import numpy as np

from .model import CdhmmParams, emission_mean, infer_sequence
from .tracking import ATTACKING, DEFAULT_PITCH, CornerSequence

GHOST_SCHEMA_VERSION = 1
OUTCOME_SCHEMA_VERSION = 1
RECEPTION = "reception"
THREAT = "threat"


class CapabilityError(ValueError):
    pass


class UncalibratedModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Scene:
    """Everything an outcome model sees at one frame."""

    positions: np.ndarray      # (P, 2)
    velocities: np.ndarray     # (P, 2)
    attacking: np.ndarray      # (P,) bool
    goalkeeper: np.ndarray     # (P,) bool
    goal: np.ndarray = field(default_factory=lambda: DEFAULT_PITCH.goal_center)

    @classmethod
    def from_sequence(cls, seq: CornerSequence, t: int) -> "Scene":
        return cls(seq.positions[t].copy(), seq.velocities[t].copy(),
                   np.array([tm == ATTACKING for tm in seq.teams]), seq.is_goalkeeper.copy())


@runtime_checkable
class OutcomeModel(Protocol):
    """Player-level outcome probabilities for a batch of scene variants.

    ``player_probabilities(scene, positions, kind)`` takes positions of shape
    ``(..., P, 2)`` (the scene with some player moved) and returns ``(..., P)``.
    ``lower_is_better`` is the defending team's preferred direction.
    """

    capabilities: frozenset
    lower_is_better: bool

    def player_probabilities(self, scene: Scene, positions: np.ndarray, kind: str) -> np.ndarray: ...


@dataclass(frozen=True)
class BaselineReceptionModel:
    """Multinomial logit over who touches the ball next.

    Each player's score is linear in distance to the delivery target, distance
    to the nearest opponent and distance to goal; probabilities are the
    softmax of scores over all players. The nearest-opponent weight is
    constrained non-negative so being closer to an opponent never helps.
    """

    intercept: float = 0.0
    w_target: float = -0.35
    w_nearest_opponent: float = 0.6
    w_goal: float = -0.05
    target: tuple[float, float] = (DEFAULT_PITCH.six_yard_line_x, 0.0)
    calibration: dict | None = field(default_factory=lambda: {"source": "default-prior"})

    capabilities = frozenset({RECEPTION})
    lower_is_better = True

    def __post_init__(self):
        if self.w_nearest_opponent < 0:
            raise ValueError("nearest-opponent weight must be non-negative")

    def scores(self, scene: Scene, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, float)
        d_target = np.linalg.norm(pos - np.asarray(self.target), axis=-1)
        d_goal = np.linalg.norm(pos - scene.goal, axis=-1)
        pair = np.linalg.norm(pos[..., :, None, :] - pos[..., None, :, :], axis=-1)
        opp = scene.attacking[:, None] != scene.attacking[None, :]
        d_opp = np.where(opp, pair, np.inf).min(axis=-1)
        d_opp = np.where(np.isfinite(d_opp), d_opp, 0.0)
        return self.intercept + self.w_target * d_target + self.w_nearest_opponent * d_opp + self.w_goal * d_goal

    def player_probabilities(self, scene: Scene, positions: np.ndarray | None = None,
                             kind: str = RECEPTION) -> np.ndarray:
        if kind not in self.capabilities:
            raise CapabilityError(f"baseline model has no {kind!r} output")
        if self.calibration is None:
            raise UncalibratedModelError("reception model has no calibration record")
        s = self.scores(scene, scene.positions if positions is None else positions)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = list(self.target)
        return {"schema_version": OUTCOME_SCHEMA_VERSION, "kind": "baseline_reception", **d}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineReceptionModel":
        if d.get("kind") != "baseline_reception":
            raise ValueError("not a baseline reception model")
        if d.get("schema_version") != OUTCOME_SCHEMA_VERSION:
            raise ValueError(f"unsupported outcome model version {d.get('schema_version')!r}")
        if not d.get("calibration"):
            raise UncalibratedModelError("reception model has no calibration record")
        return cls(float(d["intercept"]), float(d["w_target"]), float(d["w_nearest_opponent"]),
                   float(d["w_goal"]), tuple(d["target"]), dict(d["calibration"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BaselineReceptionModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_baseline_reception(seqs: Iterable[CornerSequence], target=None,
                           penalty: float = 1e-3) -> BaselineReceptionModel:
    """Maximum-likelihood weights from first-contact labels at delivery."""
    from scipy.optimize import minimize

    target = tuple(target) if target is not None else BaselineReceptionModel().target
    feats, labels = [], []
    for s in seqs:
        if s.first_contact_player_id is None:
            continue
        scene = Scene.from_sequence(s, min(s.delivery_frame, s.n_frames - 1))
        probe = BaselineReceptionModel(0.0, 1.0, 0.0, 0.0, target)
        f_t = probe.scores(scene, scene.positions)
        f_o = BaselineReceptionModel(0.0, 0.0, 1.0, 0.0, target).scores(scene, scene.positions)
        f_g = BaselineReceptionModel(0.0, 0.0, 0.0, 1.0, target).scores(scene, scene.positions)
        feats.append(np.stack([f_t, f_o, f_g], axis=-1))
        labels.append(s.index_of(s.first_contact_player_id))
    if not feats:
        raise ValueError("no labelled sequences")

    def nll(w):
        val, grad = 0.0, np.zeros(3)
        for X, y in zip(feats, labels):
            z = X @ w
            z = z - z.max()
            p = np.exp(z) / np.exp(z).sum()
            val -= math.log(max(p[y], 1e-300))
            grad -= X[y] - p @ X
        return val + 0.5 * penalty * w @ w, grad + penalty * w

    res = minimize(nll, np.zeros(3), jac=True, method="L-BFGS-B",
                   bounds=[(None, None), (0.0, None), (None, None)])
    w = res.x
    return BaselineReceptionModel(0.0, float(w[0]), float(w[1]), float(w[2]), target,
                                  {"source": "fit", "n": len(labels), "log_loss": float(res.fun / len(labels))})


# ----------------------------------------------------------------- ghosts

@dataclass(frozen=True)
class GhostConfig:
    mc_samples: int = 512
    tau: float = 0.1
    theta: float = 0.15
    occupancy: str = "smoothed"
    seed: int = 0
    frames: str = "delivery"

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.occupancy not in ("smoothed", "filtered"):
            raise ValueError("occupancy must be 'smoothed' or 'filtered'")
        if self.frames not in ("delivery", "all"):
            raise ValueError("frames must be 'delivery' or 'all'")

    @classmethod
    def from_dict(cls, d: dict) -> "GhostConfig":
        return cls(**d)


def ghost_rng(seed: int, t: int, j: int, k: int) -> np.random.Generator:
    """Independent stream per (frame, defender, role)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, j, k)))


def role_emission(params: CdhmmParams, seq: CornerSequence, t: int, k: int) -> tuple[np.ndarray, float]:
    """Mean and isotropic variance of a defender marking attacker ``k`` at frame ``t``."""
    O = seq.positions[t, seq.attackers[k]]
    b = int(params.grid.bin_index(O))
    return emission_mean(params, O), float(params.grid.sigma2.ravel()[b])


def sample_ghost(params: CdhmmParams, seq: CornerSequence, t: int, j: int, k: int,
                 n: int, seed: int = 0) -> np.ndarray:
    """``n`` draws of defender ``j``'s position under the role "mark attacker ``k``"."""
    if not 0 <= k < params.K:
        raise ValueError("ghost role must be a man-marking state")
    mean, s2 = role_emission(params, seq, t, k)
    return mean + math.sqrt(s2) * ghost_rng(seed, t, j, k).standard_normal((n, 2))


def expected_ghost_value(f: Callable[[np.ndarray], np.ndarray], samples: np.ndarray) -> float:
    samples = np.asarray(samples, float)
    if samples.size == 0:
        raise ValueError("no samples")
    return float(np.mean(f(samples)))


def point_ghost_value(f: Callable[[np.ndarray], np.ndarray], mean) -> float:
    return float(np.asarray(f(np.asarray(mean, float)[None]))[0])


# ------------------------------------------------------------------ OBPR

def obpr(gamma: np.ndarray, reception: np.ndarray) -> float:
    """``sum_{t,k} gamma[t, k] * (1 - reception[t, k])`` over man-marking states.

    ``gamma`` is one defender's ``(T, K+1)`` (or ``(T, K)``) occupancy and
    ``reception`` the attackers' ``(T, K)`` reception probabilities.
    """
    rec = np.asarray(reception, float)
    g = np.asarray(gamma, float)[:, :rec.shape[1]]
    return float(np.sum(g * (1.0 - rec)))


def attacker_reception(seq: CornerSequence, model: OutcomeModel) -> np.ndarray:
    """Observed reception probability of every attacker at every frame, ``(T, K)``."""
    out = np.empty((seq.n_frames, seq.n_attackers))
    for t in range(seq.n_frames):
        scene = Scene.from_sequence(seq, t)
        out[t] = model.player_probabilities(scene, scene.positions, RECEPTION)[seq.attackers]
    return out


def obpr_sequence(params: CdhmmParams, seq: CornerSequence, model: OutcomeModel,
                  config: GhostConfig = GhostConfig()) -> np.ndarray:
    occ = occupancies(params, seq, config)
    rec = attacker_reception(seq, model)
    return np.array([obpr(occ[j], rec) for j in range(occ.shape[0])])


# ------------------------------------------------------ group evaluation

def occupancies(params: CdhmmParams, seq: CornerSequence, config: GhostConfig) -> np.ndarray:
    """``(J, T, K+1)`` smoothed or forward-filtered state probabilities."""
    inf = infer_sequence(params, seq, paths=False)
    key = "gamma" if config.occupancy == "smoothed" else "filtered"
    return np.stack([getattr(p, key) for p in inf.posteriors])


def attention_weights(gamma_t: np.ndarray, tau: float = 0.1, zonal_column: bool = True) -> np.ndarray:
    """Softmax over defenders of each attacker's occupancy column.

    ``gamma_t`` is ``(J, K+1)`` with the zonal column last (dropped), or
    ``(J, K)`` when ``zonal_column`` is false. Returns ``(J, K)`` with
    columns summing to 1.
    """
    g = np.asarray(gamma_t, float)
    if zonal_column:
        g = g[:, :-1]
    z = g / tau
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def feasible_set(w: np.ndarray, theta: float, j: int) -> list[int]:
    return [int(k) for k in np.flatnonzero(np.asarray(w)[j] >= theta)]


@dataclass
class GhostEvaluation:
    sequence_id: str
    frame: int
    defender: int
    defender_id: str
    feasible: list[int]
    role_expectations: dict[int, float]
    observed: float
    optimal: float
    optimal_role: int
    gca: float
    deltas: dict[int, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["role_expectations"] = {str(k): v for k, v in self.role_expectations.items()}
        d["deltas"] = {str(k): v for k, v in self.deltas.items()}
        d["schema_version"] = GHOST_SCHEMA_VERSION
        return d


def _require(model: OutcomeModel, kind: str):
    if kind not in model.capabilities:
        raise CapabilityError(f"outcome model lacks the {kind!r} capability")


def _moved(scene: Scene, player: int, xs: np.ndarray) -> np.ndarray:
    pos = np.broadcast_to(scene.positions, (len(xs),) + scene.positions.shape).copy()
    pos[:, player] = xs
    return pos


def group_coverage_advantage(params: CdhmmParams, seq: CornerSequence, t: int, j: int,
                             model: OutcomeModel, config: GhostConfig = GhostConfig(),
                             occupancy: np.ndarray | None = None,
                             kind: str = RECEPTION) -> GhostEvaluation | None:
    """GCA of defender ``j`` at frame ``t``; ``None`` when no attacker is feasible.

    ``occupancy`` may pass precomputed ``(J, T, K+1)`` state probabilities.
    """
    _require(model, kind)
    occ = occupancies(params, seq, config) if occupancy is None else occupancy
    w = attention_weights(occ[:, t, :], config.tau)
    feas = feasible_set(w, config.theta, j)
    if not feas:
        return None
    scene = Scene.from_sequence(seq, t)
    player = int(seq.defenders[j])
    cols = seq.attackers[feas]

    def group(xs):
        return model.player_probabilities(scene, _moved(scene, player, xs), kind)[:, cols]

    observed_each = group(scene.positions[player][None])[0]
    observed = float(observed_each.sum())
    roles, deltas = {}, {}
    for i, k in enumerate(feas):
        per = group(sample_ghost(params, seq, t, j, k, config.mc_samples, config.seed))
        roles[k] = float(per.sum(axis=1).mean())
        deltas[k] = float(per[:, i].mean() - observed_each[i])
    pick = min if model.lower_is_better else max
    best = pick(feas, key=lambda k: (roles[k], k) if model.lower_is_better else (roles[k], -k))
    opt = roles[best]
    return GhostEvaluation(seq.sequence_id, t, j, seq.player_ids[player], feas, roles, observed,
                           opt, best, opt - observed, deltas)


def delta_metrics(params: CdhmmParams, seq: CornerSequence, t: int, j: int, k: int,
                  models: Mapping[str, OutcomeModel], config: GhostConfig = GhostConfig()) -> dict:
    """Reception suppression, recovery gain and their threat analogues.

    Threat metrics are ``None`` when no threat model is supplied.
    """
    if RECEPTION not in models:
        raise CapabilityError("a reception model is required")
    scene = Scene.from_sequence(seq, t)
    player = int(seq.defenders[j])
    att = int(seq.attackers[k])
    xs = sample_ghost(params, seq, t, j, k, config.mc_samples, config.seed)
    out = {}
    for kind, names in ((RECEPTION, ("reception_suppression", "recovery_gain")),
                        (THREAT, ("threat_suppression", "counterattack_value"))):
        m = models.get(kind)
        if m is None:
            out.update({n: None for n in names})
            continue
        _require(m, kind)
        obs = m.player_probabilities(scene, scene.positions[None], kind)[0]
        ghost = m.player_probabilities(scene, _moved(scene, player, xs), kind)
        out[names[0]] = float(ghost[:, att].mean() - obs[att])
        out[names[1]] = float(obs[player] - ghost[:, player].mean())
    return out


def evaluate_sequence(params: CdhmmParams, seq: CornerSequence, model: OutcomeModel,
                      config: GhostConfig = GhostConfig()) -> list[GhostEvaluation]:
    """GCA for every defender with a non-empty feasible set at the evaluated frames."""
    occ = occupancies(params, seq, config)
    frames = [min(seq.delivery_frame, seq.n_frames - 1)] if config.frames == "delivery" \
        else range(seq.n_frames)
    out = []
    for t in frames:
        for j in range(seq.n_defenders):
            ev = group_coverage_advantage(params, seq, t, j, model, config, occ)
            if ev is not None:
                out.append(ev)
    return out


def sweep_gca(params: CdhmmParams, seqs: Iterable[CornerSequence], model: OutcomeModel,
              config: GhostConfig, taus: Iterable[float], thetas: Iterable[float]) -> list[dict]:
    """GCA summary for every ``(tau, theta)`` pair; occupancies are computed once per sequence."""
    seqs = list(seqs)
    occs = [occupancies(params, s, config) for s in seqs]
    rows = []
    for tau in taus:
        for theta in thetas:
            cfg = replace(config, tau=float(tau), theta=float(theta))
            gca, sizes = [], []
            for seq, occ in zip(seqs, occs):
                frames = [min(seq.delivery_frame, seq.n_frames - 1)] if cfg.frames == "delivery" \
                    else range(seq.n_frames)
                for t in frames:
                    for j in range(seq.n_defenders):
                        ev = group_coverage_advantage(params, seq, t, j, model, cfg, occ)
                        if ev is not None:
                            gca.append(ev.gca)
                            sizes.append(len(ev.feasible))
            rows.append({"tau": cfg.tau, "theta": cfg.theta, "n": len(gca),
                         "mean_feasible_size": float(np.mean(sizes)) if sizes else float("nan"),
                         "mean_gca": float(np.mean(gca)) if gca else float("nan"),
                         "median_gca": float(np.median(gca)) if gca else float("nan")})
    return rows


def write_sweep(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={GHOST_SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        cols = ["tau", "theta", "n", "mean_feasible_size", "mean_gca", "median_gca"]
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], int) else repr(r[c]) for c in cols])


def write_evaluations(evals: Iterable[GhostEvaluation], jsonl_path: str | Path,
                      csv_path: str | Path | None = None) -> int:
    evals = list(evals)
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for e in evals:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    if csv_path is not None:
        write_gca_summary(evals, csv_path)
    return len(evals)


def write_gca_summary(evals: Iterable[GhostEvaluation], path: str | Path) -> None:
    """GCA distribution summary by feasible-set size."""
    by_size: dict[int, list[float]] = {}
    for e in evals:
        by_size.setdefault(len(e.feasible), []).append(e.gca)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={GHOST_SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feasible_size", "n", "mean", "std", "median", "q25", "q75"])
        for size in sorted(by_size):
            v = np.array(by_size[size])
            w.writerow([size, v.size, repr(float(v.mean())), repr(float(v.std())),
                        repr(float(np.median(v))), repr(float(np.quantile(v, 0.25))),
                        repr(float(np.quantile(v, 0.75)))])
