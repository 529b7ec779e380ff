"""Behavioural metrics from decoded marking assignments, and model-stability statistics."""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .covariates import check_spd
from .model import CdhmmParams, infer_sequence
from .tracking import DEFAULT_PITCH, YARD, CornerSequence, Dataset

GOAL_WEIGHT_RANGE = 18 * YARD
PROFILE_THRESHOLD = 20
REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class DecodedSequence:
    """Marking assignments of one sequence.

    ``paths[j, t]`` is the Viterbi state of modelled defender ``j``; ``gamma`` the
    smoothed posteriors with shape ``(J, T, K+1)``.
    """

    seq: CornerSequence
    paths: np.ndarray
    gamma: np.ndarray | None = None
    assignment: np.ndarray | None = None
    loglik: float = float("nan")

    @property
    def K(self) -> int:
        return self.seq.n_attackers

    @property
    def defender_ids(self) -> list[str]:
        return [self.seq.player_ids[i] for i in self.seq.defenders]

    @property
    def attacker_ids(self) -> list[str]:
        return [self.seq.player_ids[i] for i in self.seq.attackers]

    def occupancy(self, soft: bool = False) -> np.ndarray:
        """``(J, T, K+1)`` hard one-hot (default) or soft state occupancy."""
        if soft:
            if self.gamma is None:
                raise ValueError("soft metrics need posteriors")
            return self.gamma
        return np.eye(self.K + 1)[self.paths]


def decode(params: CdhmmParams, seq: CornerSequence) -> DecodedSequence:
    inf = infer_sequence(params, seq)
    return DecodedSequence(seq, np.stack([p.path for p in inf.posteriors]),
                           np.stack([p.gamma for p in inf.posteriors]), inf.assignment, inf.loglik)


def decode_dataset(params: CdhmmParams, ds: Iterable[CornerSequence]) -> list[DecodedSequence]:
    return [decode(params, s) for s in ds]


# ---------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttentionRecord:
    sequence_id: str
    attacker_id: str
    attention: float
    team_id: str


def attention(dec: DecodedSequence, k: int, soft: bool = False) -> float:
    """Mean number of defenders marking attacker ``k`` per frame."""
    occ = dec.occupancy(soft)
    return float(occ[:, :, k].sum() / occ.shape[1])


def attention_records(decoded: Iterable[DecodedSequence], soft: bool = False) -> list[AttentionRecord]:
    out = []
    for dec in decoded:
        for k, pid in enumerate(dec.attacker_ids):
            out.append(AttentionRecord(dec.seq.sequence_id, pid, attention(dec, k, soft),
                                       dec.seq.defending_team_id))
    return out


def team_baselines(records: Iterable[AttentionRecord]) -> dict[str, float]:
    """Per team, the mean over its sequences of the per-sequence mean attention."""
    per_seq: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in records:
        per_seq[(r.team_id, r.sequence_id)].append(r.attention)
    per_team: dict[str, list[float]] = defaultdict(list)
    for (team, _), vals in per_seq.items():
        per_team[team].append(float(np.mean(vals)))
    return {team: float(np.mean(v)) for team, v in sorted(per_team.items())}


def context_aware_attention(records: Sequence[AttentionRecord],
                            baselines: Mapping[str, float] | None = None) -> dict[str, float]:
    """Mean excess attention per attacker relative to each defending team's baseline."""
    if baselines is None:
        baselines = team_baselines(records)
    diffs: dict[str, list[float]] = defaultdict(list)
    for r in records:
        if r.team_id not in baselines:
            raise KeyError(f"no baseline for team {r.team_id!r}")
        diffs[r.attacker_id].append(r.attention - baselines[r.team_id])
    return {pid: float(np.mean(v)) for pid, v in sorted(diffs.items())}


# ----------------------------------------------------------------- evasion

def goal_weight(d_goal: float) -> float:
    return 1.0 - min(GOAL_WEIGHT_RANGE, d_goal) / GOAL_WEIGHT_RANGE


def evasion_score(seq: CornerSequence, k: int, paths: np.ndarray, goal=None,
                  contact_frame: int | None = None) -> float | None:
    """Goal-weighted separation gained by attacker ``k`` on its markers.

    Markers are the defenders who mark ``k`` at some frame between its first
    marked frame ``t0`` and first contact ``tc``; ``d_min`` is the distance to
    the nearest of them. Returns ``None`` when ``k`` is never marked by
    ``tc`` or the sequence has no first contact.
    """
    tc = seq.first_contact_frame if contact_frame is None else contact_frame
    if tc is None:
        return None
    tc = min(int(tc), seq.n_frames - 1)
    marked = np.asarray(paths)[:, :tc + 1] == k
    frames = np.flatnonzero(marked.any(axis=0))
    if frames.size == 0:
        return None
    t0 = int(frames[0])
    markers = np.flatnonzero(marked[:, t0:].any(axis=1))
    att = seq.positions[:, seq.attackers[k]]
    dpos = seq.positions[:, seq.defenders[markers]]

    def d_min(t):
        return float(np.min(np.linalg.norm(dpos[t] - att[t], axis=-1)))

    g = np.asarray(goal if goal is not None else DEFAULT_PITCH.goal_center, float)
    weight = goal_weight(float(np.linalg.norm(att[tc] - g)))
    return weight * (d_min(tc) - d_min(t0))


# ------------------------------------------------- initial assignment entropy

def initial_assignments(paths: np.ndarray, K: int) -> list[int | None]:
    """First man-marking target of each defender (``None`` if never marking)."""
    out = []
    for row in np.asarray(paths):
        idx = np.flatnonzero(row < K)
        out.append(int(row[idx[0]]) if idx.size else None)
    return out


def effective_count(counts: Iterable[int]) -> float:
    """``exp`` of the entropy (natural log) of an empirical distribution."""
    c = np.array([v for v in counts if v > 0], float)
    if c.size == 0:
        raise ValueError("no assignments")
    p = c / c.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def effective_initial_assignments(per_game: Mapping[str, Iterable[str]]) -> float | None:
    """Mean over games of the effective number of initially marked attackers.

    ``per_game`` maps a game to the attacker ids a defender began marking in
    that game's corners. Games without assignments are ignored.
    """
    games = {g: list(v) for g, v in per_game.items()}
    vals = [effective_count(Counter(v).values()) for _, v in sorted(games.items()) if v]
    return float(np.mean(vals)) if vals else None


# ----------------------------------------------------------------- switches

def sequence_switch_rate(path: np.ndarray, K: int, include_zonal_entry: bool = False) -> float:
    """Changes of man-marking target per frame transition."""
    path = np.asarray(path)
    if path.size < 2:
        raise ValueError("switch rate needs at least two frames")
    prev, nxt = path[:-1], path[1:]
    changed = (prev != nxt) & (nxt < K)
    if not include_zonal_entry:
        changed &= prev < K
    return float(changed.sum() / (path.size - 1))


def switch_rate(paths: Iterable[np.ndarray], K: int, include_zonal_entry: bool = False) -> float:
    rates = [sequence_switch_rate(p, K, include_zonal_entry) for p in paths]
    if not rates:
        raise ValueError("no sequences")
    return float(np.mean(rates))


def first_contact_proximity(seq: CornerSequence, player: int) -> float | None:
    """Distance from roster index ``player`` to the first-contact location."""
    if seq.first_contact_frame is None or seq.first_contact_player_id is None:
        return None
    tc = min(seq.first_contact_frame, seq.n_frames - 1)
    where = seq.positions[tc, seq.index_of(seq.first_contact_player_id)]
    return float(np.linalg.norm(seq.positions[tc, player] - where))


# ---------------------------------------------------------------- profiles

@dataclass
class PlayerProfile:
    player_id: str
    role: str
    sequences_observed: int
    context_aware_attention: float | None = None
    evasion_score: float | None = None
    effective_initial_assignments: float | None = None
    switch_rate: float | None = None
    first_contact_proximity: float | None = None

    COLUMNS = ("player_id", "role", "sequences_observed", "context_aware_attention", "evasion_score",
               "effective_initial_assignments", "switch_rate", "first_contact_proximity")


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def player_profiles(decoded: Sequence[DecodedSequence], threshold: int = PROFILE_THRESHOLD,
                    soft: bool = False, include_zonal_entry: bool = False) -> list[PlayerProfile]:
    """Attacker and defender profiles for players seen in at least ``threshold`` sequences.

    Sequences without a ``game_id`` are pooled into a single game for the
    effective-assignment count.
    """
    ca = context_aware_attention(attention_records(decoded, soft))
    att_seen: dict[str, list] = defaultdict(list)
    def_seen: dict[str, list] = defaultdict(list)
    for dec in decoded:
        seq, K = dec.seq, dec.K
        firsts = initial_assignments(dec.paths, K)
        aids = dec.attacker_ids
        for k, pid in enumerate(aids):
            att_seen[pid].append((evasion_score(seq, k, dec.paths),
                                  first_contact_proximity(seq, int(seq.attackers[k]))))
        for j, pid in enumerate(dec.defender_ids):
            first = None if firsts[j] is None else aids[firsts[j]]
            def_seen[pid].append((seq.game_id or "", first,
                                  sequence_switch_rate(dec.paths[j], K, include_zonal_entry)
                                  if seq.n_frames > 1 else None,
                                  first_contact_proximity(seq, int(seq.defenders[j]))))
    out = []
    for pid, rows in sorted(att_seen.items()):
        if len(rows) >= threshold:
            out.append(PlayerProfile(pid, "attacker", len(rows), context_aware_attention=ca.get(pid),
                                     evasion_score=_mean(r[0] for r in rows),
                                     first_contact_proximity=_mean(r[1] for r in rows)))
    for pid, rows in sorted(def_seen.items()):
        if len(rows) >= threshold:
            games: dict[str, list[str]] = defaultdict(list)
            for game, first, _, _ in rows:
                if first is not None:
                    games[game].append(first)
            out.append(PlayerProfile(pid, "defender", len(rows),
                                     effective_initial_assignments=effective_initial_assignments(games),
                                     switch_rate=_mean(r[2] for r in rows),
                                     first_contact_proximity=_mean(r[3] for r in rows)))
    return out


def write_profiles_csv(profiles: Iterable[PlayerProfile], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={REPORT_SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PlayerProfile.COLUMNS)
        for p in profiles:
            d = asdict(p)
            w.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c])
                        for c in PlayerProfile.COLUMNS])


def profiles_document(profiles: Iterable[PlayerProfile]) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "profiles": [asdict(p) for p in profiles]}


# ------------------------------------------------------- model stability

def gaussian_w2(mean1, cov1, mean2, cov2) -> float:
    """2-Wasserstein distance between two bivariate Gaussians.

    For 2x2 PSD ``M``, ``tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))``. The Bures
    term is evaluated as a difference of squares so identical covariances
    give exactly zero.
    """
    c1 = check_spd(cov1)
    c2 = check_spd(cov2)
    (a, b), (_, c) = c1
    (p, q), (_, r) = c2
    t1, t2 = a + c, p + r
    d1, d2 = a * c - b * b, p * r - q * q
    root = math.sqrt(d1 * d2)
    cross = (a * r + c * p - 2.0 * b * q) - 2.0 * root   # tr1*tr2 - tr(c1 c2) - 2 sqrt(det)
    num = (t1 - t2) ** 2 + 4.0 * cross
    den = (t1 + t2) + 2.0 * math.sqrt(max(a * p + 2.0 * b * q + c * r + 2.0 * root, 0.0))
    bures = max(num, 0.0) / den if den > 0 else 0.0
    d = np.asarray(mean1, float) - np.asarray(mean2, float)
    return math.sqrt(float(d @ d) + bures)


def zone_disagreement(means_a, covs_a, means_b, covs_b) -> float:
    """Minimum total W2 cost over one-to-one matchings of two zone sets."""
    ma, mb = np.asarray(means_a, float), np.asarray(means_b, float)
    if len(ma) != len(mb):
        raise ValueError("zone sets differ in size")
    cost = np.array([[gaussian_w2(ma[i], covs_a[i], mb[j], covs_b[j]) for j in range(len(mb))]
                     for i in range(len(ma))])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def model_zone_disagreement(a: CdhmmParams, b: CdhmmParams) -> float:
    return zone_disagreement(a.zone_means, a.zone_covs, b.zone_means, b.zone_covs)


def mean_pairwise(models: Sequence[CdhmmParams], fn) -> float:
    if len(models) < 2:
        raise ValueError("need at least two models")
    return float(np.mean([fn(a, b) for a, b in itertools.combinations(models, 2)]))


def beta_disagreement(models: Sequence[CdhmmParams]) -> dict[str, float]:
    """Mean pairwise Euclidean distance between weight vectors, per transition type."""
    return {name: mean_pairwise(models, lambda a, b, n=name: float(
        np.linalg.norm(getattr(a.beta, n) - getattr(b.beta, n)))) for name in ("m", "z", "s")}


def normalized_loglik(params: CdhmmParams, ds: Dataset | Sequence[CornerSequence]) -> float:
    """Total observation log-likelihood per frame."""
    from .model import sequence_loglik

    frames = sum(s.n_frames for s in ds)
    if frames == 0:
        raise ValueError("empty dataset")
    return sum(sequence_loglik(params, s) for s in ds) / frames


def cohens_d(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if pooled <= 0:
        raise ValueError("zero pooled variance")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def dump_json(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -------------------------------------------------------- sensitivity runs

def sensitivity_sizes(n: int, step: int = 10) -> list[int]:
    """Training-set sizes ``step, 2*step, ...`` not exceeding ``n``."""
    if step < 1:
        raise ValueError("step must be positive")
    return list(range(step, n + 1, step))


@dataclass
class SensitivityPoint:
    size: int
    zone_disagreement: list[float]
    beta_disagreement: dict[str, float]
    normalized_loglik: list[float]

    @property
    def zone_disagreement_mean(self) -> float:
        return float(np.mean(self.zone_disagreement))


def run_sensitivity(ds: Dataset, config, step: int = 10, n_seeds: int = 10,
                    sizes: Sequence[int] | None = None, progress=None) -> list[SensitivityPoint]:
    """Refit on growing chronological prefixes with ``n_seeds`` seeds per size.

    ``config`` is an ``EmConfig``; seeds are ``config.seed + i``.
    """
    from .training import em_fit

    if n_seeds < 2:
        raise ValueError("pairwise disagreement needs at least two models per size")
    ordered = ds.chronological()
    out = []
    for size in (sizes if sizes is not None else sensitivity_sizes(len(ordered), step)):
        subset = Dataset(tuple(ordered[:size]))
        frames = subset.total_frames
        fits = [em_fit(subset, config, config.seed + i) for i in range(n_seeds)]
        models = [f.params for f in fits]
        zones = [model_zone_disagreement(a, b) for a, b in itertools.combinations(models, 2)]
        out.append(SensitivityPoint(size, zones, beta_disagreement(models),
                                    [f.final_loglik / frames for f in fits]))
        if progress is not None:
            progress(out[-1])
    return out


def sensitivity_document(points: Sequence[SensitivityPoint], group: tuple[str, str] | None = None) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "team_id": None if group is None else group[0],
        "delivery_type": None if group is None else group[1],
        "points": [{"size": p.size, "zone_disagreement": p.zone_disagreement,
                    "zone_disagreement_median": float(np.median(p.zone_disagreement)),
                    "beta_disagreement": p.beta_disagreement,
                    "normalized_loglik": p.normalized_loglik} for p in points],
    }
