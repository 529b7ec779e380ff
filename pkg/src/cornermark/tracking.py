"""Corner-sequence data model, JSONL input format and preprocessing.

Coordinates are metres. In the canonical frame the defending penalty spot is
the origin, the defended goal line is ``x = -11`` with the goal centre at
``(-11, 0)``, the field of play extends towards ``+x`` and every corner is taken
from the ``+y`` touchline.

Raw (non-canonical) records use pitch-centred coordinates with ``x`` in
``[-52.5, 52.5]`` and ``y`` in ``[-34, 34]`` and must name the corner flag the
ball is taken from (``top_right``, ``bottom_right``, ``top_left``,
``bottom_left``; right means ``+x``, top means ``+y``).
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

FPS = 25
FRAME_DT = 1.0 / FPS
PRE_DELIVERY_FRAMES = 25
POST_DELIVERY_FRAMES = 50
YARD = 0.9144
ATTACKING = "attacking"
DEFENDING = "defending"
DELIVERY_TYPES = ("inswing", "outswing")
CORNERS = ("top_right", "bottom_right", "top_left", "bottom_left")
SQUAD_SIZE = 10
TRACKING_SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """A record in a tracking file does not match the expected layout."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class PitchGeometry:
    length: float = 105.0
    width: float = 68.0
    penalty_spot_distance: float = 11.0
    six_yard_depth: float = 5.5
    six_yard_width: float = 18.32
    penalty_area_depth: float = 16.5
    penalty_area_width: float = 40.32

    @property
    def goal_line_x(self) -> float:
        return -self.penalty_spot_distance

    @property
    def goal_center(self) -> np.ndarray:
        return np.array([self.goal_line_x, 0.0])

    @property
    def six_yard_line_x(self) -> float:
        return self.goal_line_x + self.six_yard_depth

    @property
    def penalty_area_bounds(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) of the penalty area, canonical frame."""
        half = self.penalty_area_width / 2
        return (self.goal_line_x, self.goal_line_x + self.penalty_area_depth, -half, half)


DEFAULT_PITCH = PitchGeometry()


@dataclass(frozen=True)
class PlayerFrame:
    player_id: str
    team: str
    is_goalkeeper: bool
    position: tuple[float, float]
    velocity: tuple[float, float]
    height: float
    weight: float


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CornerSequence:
    """One corner kick: a fixed roster tracked over ``T`` frames at 25 Hz.

    ``positions`` and ``velocities`` have shape ``(T, P, 2)`` with players in
    roster order. Arrays are read-only.
    """

    sequence_id: str
    delivery_type: str
    defending_team_id: str
    player_ids: tuple[str, ...]
    teams: tuple[str, ...]
    is_goalkeeper: np.ndarray
    heights: np.ndarray
    weights: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    delivery_frame: int
    first_contact_frame: int | None = None
    first_contact_player_id: str | None = None
    canonical: bool = True
    corner: str | None = None
    game_id: str | None = None
    short_corner: bool = False
    end_frame: int | None = None
    order: int | None = None

    def __post_init__(self):
        for name, dtype in (("is_goalkeeper", bool), ("heights", float), ("weights", float),
                            ("positions", float), ("velocities", float)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        P = len(self.player_ids)
        if self.positions.ndim != 3 or self.positions.shape[1:] != (P, 2):
            raise SchemaError(f"positions must have shape (T, {P}, 2), got {self.positions.shape}")
        if self.velocities.shape != self.positions.shape:
            raise SchemaError("velocities must match positions in shape", field="velocity")
        if len(self.teams) != P or self.is_goalkeeper.shape != (P,):
            raise SchemaError("per-player fields must match the roster length")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def defenders(self) -> np.ndarray:
        """Roster indices of outfield defenders."""
        return np.array([i for i, (tm, gk) in enumerate(zip(self.teams, self.is_goalkeeper))
                         if tm == DEFENDING and not gk], dtype=np.intp)

    @property
    def attackers(self) -> np.ndarray:
        """Roster indices of outfield attackers."""
        return np.array([i for i, (tm, gk) in enumerate(zip(self.teams, self.is_goalkeeper))
                         if tm == ATTACKING and not gk], dtype=np.intp)

    @property
    def n_defenders(self) -> int:
        return len(self.defenders)

    @property
    def n_attackers(self) -> int:
        return len(self.attackers)

    def index_of(self, player_id: str) -> int:
        return self.player_ids.index(player_id)

    def frame(self, t: int) -> list[PlayerFrame]:
        return [
            PlayerFrame(pid, tm, bool(gk), tuple(self.positions[t, i]), tuple(self.velocities[t, i]),
                        float(self.heights[i]), float(self.weights[i]))
            for i, (pid, tm, gk) in enumerate(zip(self.player_ids, self.teams, self.is_goalkeeper))
        ]

    def with_arrays(self, positions=None, velocities=None, **changes) -> "CornerSequence":
        return replace(
            self,
            positions=self.positions if positions is None else positions,
            velocities=self.velocities if velocities is None else velocities,
            **changes,
        )


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[CornerSequence, ...] = ()

    def __post_init__(self):
        seen = set()
        for s in self.sequences:
            if s.sequence_id in seen:
                raise SchemaError(f"duplicate sequence_id {s.sequence_id!r}")
            seen.add(s.sequence_id)
        object.__setattr__(self, "sequences", tuple(self.sequences))

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[CornerSequence]:
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def groups(self) -> dict[tuple[str, str], "Dataset"]:
        """Sequences keyed by (defending_team_id, delivery_type), in file order."""
        out: dict[tuple[str, str], list[CornerSequence]] = defaultdict(list)
        for s in self.sequences:
            out[(s.defending_team_id, s.delivery_type)].append(s)
        return {k: Dataset(tuple(v)) for k, v in sorted(out.items())}

    def chronological(self) -> "Dataset":
        keyed = sorted(enumerate(self.sequences),
                       key=lambda p: (p[1].order if p[1].order is not None else p[0], p[0]))
        return Dataset(tuple(s for _, s in keyed))

    @property
    def total_frames(self) -> int:
        return sum(s.n_frames for s in self.sequences)


# --------------------------------------------------------------------------- IO

_REQUIRED = ("sequence_id", "delivery_type", "defending_team_id", "delivery_frame", "frames")
_PLAYER_FIELDS = {
    "id": "player id",
    "team": "team",
    "gk": "goalkeeper flag",
    "x": "position",
    "y": "position",
    "vx": "velocity",
    "vy": "velocity",
    "h": "height",
    "w": "weight",
}


def _number(value, what: str, line: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{what} must be a number, got {value!r}", line, what)
    if not math.isfinite(value):
        raise SchemaError(f"{what} must be finite", line, what)
    return float(value)


def parse_record(rec: dict, line: int | None = None) -> CornerSequence:
    """Build a validated :class:`CornerSequence` from one decoded JSONL record."""
    if not isinstance(rec, dict):
        raise SchemaError("record must be a JSON object", line)
    for key in _REQUIRED:
        if key not in rec:
            raise SchemaError(f"missing field {key!r}", line, key)
    version = rec.get("schema_version", TRACKING_SCHEMA_VERSION)
    if version != TRACKING_SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}", line, "schema_version")
    if rec["delivery_type"] not in DELIVERY_TYPES:
        raise SchemaError(f"delivery_type must be one of {DELIVERY_TYPES}", line, "delivery_type")
    fps = rec.get("fps", FPS)
    if fps != FPS:
        raise SchemaError(f"frame-rate mismatch: expected {FPS} Hz, got {fps}", line, "fps")
    frames = rec["frames"]
    if not isinstance(frames, list) or not frames:
        raise SchemaError("frames must be a non-empty list", line, "frames")

    roster: list[str] | None = None
    meta: dict[str, tuple] = {}
    pos = np.empty((len(frames), 0, 2))
    vel = pos
    times = []
    for fi, fr in enumerate(frames):
        where = f"frames[{fi}]"
        if "players" not in fr:
            raise SchemaError(f"{where}: missing field 'players'", line, "players")
        if "t" in fr:
            times.append(_number(fr["t"], f"{where}.t", line))
        players = fr["players"]
        if roster is None:
            roster = [str(p.get("id")) for p in players]
            if len(set(roster)) != len(roster):
                raise SchemaError(f"{where}: duplicate player ids", line, "id")
            pos = np.empty((len(frames), len(roster), 2))
            vel = np.empty_like(pos)
        ids = [str(p.get("id")) for p in players]
        if sorted(ids) != sorted(roster):
            raise SchemaError(f"{where}: roster differs from first frame", line, "players")
        for p in players:
            for key, what in _PLAYER_FIELDS.items():
                if key not in p:
                    raise SchemaError(f"{where}: player {p.get('id')!r} missing {what} field {key!r}",
                                      line, what)
            i = roster.index(str(p["id"]))
            pos[fi, i] = (_number(p["x"], "position", line), _number(p["y"], "position", line))
            vel[fi, i] = (_number(p["vx"], "velocity", line), _number(p["vy"], "velocity", line))
            if p["team"] not in (ATTACKING, DEFENDING):
                raise SchemaError(f"{where}: team must be 'attacking' or 'defending'", line, "team")
            info = (p["team"], bool(p["gk"]), _number(p["h"], "height", line),
                    _number(p["w"], "weight", line))
            if fi == 0:
                meta[roster[i]] = info
            elif meta[roster[i]][:2] != info[:2]:
                raise SchemaError(f"{where}: player {roster[i]!r} changed team", line, "team")

    if times and len(times) == len(frames) and len(times) > 1:
        steps = np.diff(times)
        if not np.allclose(steps, FRAME_DT, atol=1e-6):
            raise SchemaError(f"frame-rate mismatch: frame spacing must be {FRAME_DT} s", line, "t")

    assert roster is not None
    for pid, (_, _, h, w) in meta.items():
        if not 1.4 < h < 2.2:
            raise SchemaError(f"player {pid!r} height {h} outside (1.4, 2.2) m", line, "height")
        if not 50 < w < 120:
            raise SchemaError(f"player {pid!r} weight {w} outside (50, 120) kg", line, "weight")

    T = len(frames)
    delivery = rec["delivery_frame"]
    if not isinstance(delivery, int) or not 0 <= delivery < T:
        raise SchemaError(f"delivery_frame must be an index in [0, {T})", line, "delivery_frame")
    fc = rec.get("first_contact")
    fc_frame = fc_player = None
    if fc is not None:
        fc_frame, fc_player = fc.get("frame"), fc.get("player_id")
        if not isinstance(fc_frame, int) or not 0 <= fc_frame < T:
            raise SchemaError("first_contact.frame must be a frame index", line, "first_contact")
        if str(fc_player) not in roster:
            raise SchemaError("first_contact.player_id not in roster", line, "first_contact")
        fc_player = str(fc_player)

    canonical = bool(rec.get("canonical", True))
    corner = rec.get("corner")
    if corner is not None and corner not in CORNERS:
        raise SchemaError(f"corner must be one of {CORNERS}", line, "corner")
    if not canonical and corner is None:
        raise SchemaError("non-canonical records must name the corner side", line, "corner")
    end = rec.get("end_frame")
    if end is not None and (not isinstance(end, int) or not delivery <= end < T):
        raise SchemaError("end_frame must lie in [delivery_frame, T)", line, "end_frame")

    return CornerSequence(
        sequence_id=str(rec["sequence_id"]),
        delivery_type=rec["delivery_type"],
        defending_team_id=str(rec["defending_team_id"]),
        player_ids=tuple(roster),
        teams=tuple(meta[p][0] for p in roster),
        is_goalkeeper=np.array([meta[p][1] for p in roster]),
        heights=np.array([meta[p][2] for p in roster]),
        weights=np.array([meta[p][3] for p in roster]),
        positions=pos,
        velocities=vel,
        delivery_frame=delivery,
        first_contact_frame=fc_frame,
        first_contact_player_id=fc_player,
        canonical=canonical,
        corner=corner,
        game_id=None if rec.get("game_id") is None else str(rec["game_id"]),
        short_corner=bool(rec.get("short_corner", False)),
        end_frame=end,
        order=rec.get("order"),
    )


def to_record(seq: CornerSequence) -> dict:
    frames = []
    for t in range(seq.n_frames):
        players = []
        for i, pid in enumerate(seq.player_ids):
            x, y = seq.positions[t, i]
            vx, vy = seq.velocities[t, i]
            players.append({
                "id": pid, "team": seq.teams[i], "gk": bool(seq.is_goalkeeper[i]),
                "x": float(x), "y": float(y), "vx": float(vx), "vy": float(vy),
                "h": float(seq.heights[i]), "w": float(seq.weights[i]),
            })
        frames.append({"t": round(t * FRAME_DT, 10), "players": players})
    rec = {
        "schema_version": TRACKING_SCHEMA_VERSION,
        "sequence_id": seq.sequence_id,
        "delivery_type": seq.delivery_type,
        "defending_team_id": seq.defending_team_id,
        "delivery_frame": seq.delivery_frame,
        "first_contact": None if seq.first_contact_frame is None else
        {"frame": seq.first_contact_frame, "player_id": seq.first_contact_player_id},
        "canonical": seq.canonical,
        "frames": frames,
    }
    for key in ("corner", "game_id", "end_frame", "order"):
        if getattr(seq, key) is not None:
            rec[key] = getattr(seq, key)
    if seq.short_corner:
        rec["short_corner"] = True
    return rec


def load_dataset(path: str | Path) -> Dataset:
    """Read a JSONL tracking file; blank lines are ignored."""
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from exc
            seqs.append(parse_record(rec, lineno))
    try:
        return Dataset(tuple(seqs))
    except SchemaError as exc:
        raise SchemaError(str(exc)) from None


def save_dataset(ds: Dataset | Iterable[CornerSequence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in ds:
            fh.write(json.dumps(to_record(seq), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------- preprocessing

def canonicalize(seq: CornerSequence, pitch: PitchGeometry = DEFAULT_PITCH) -> CornerSequence:
    """Reflect/translate a raw corner into the canonical frame.

    Already-canonical sequences are returned unchanged.
    """
    if seq.canonical:
        return seq
    if seq.corner not in CORNERS:
        raise ValueError(f"unknown corner side {seq.corner!r}")
    # defended goal is at the end of the pitch the corner is taken from
    sx = 1.0 if seq.corner.endswith("right") else -1.0
    sy = 1.0 if seq.corner.startswith("top") else -1.0
    spot = pitch.length / 2 - pitch.penalty_spot_distance
    pos = np.array(seq.positions)
    vel = np.array(seq.velocities)
    pos[..., 0] = spot - sx * pos[..., 0]
    pos[..., 1] = sy * pos[..., 1]
    vel[..., 0] = -sx * vel[..., 0]
    vel[..., 1] = sy * vel[..., 1]
    return seq.with_arrays(pos, vel, canonical=True)


def estimate_velocities(seq: CornerSequence, window: int = 3) -> CornerSequence:
    """Fill velocities from positions by finite differences.

    Interior frames use centred differences, the two endpoints one-sided ones;
    the result is then smoothed with a centred moving average of ``window``
    frames (``window=1`` disables smoothing).
    """
    T = seq.n_frames
    if T < 2:
        raise ValueError("velocity estimation needs at least 2 frames")
    if window < 1:
        raise ValueError("window must be >= 1")
    p = seq.positions
    v = np.gradient(p, FRAME_DT, axis=0, edge_order=1)
    if window > 1:
        half = window // 2
        padded = np.concatenate([np.repeat(v[:1], half, 0), v, np.repeat(v[-1:], half, 0)])
        kernel = np.ones(2 * half + 1) / (2 * half + 1)
        v = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, padded)
    return seq.with_arrays(velocities=v)


def truncate(seq: CornerSequence) -> CornerSequence:
    """Keep 1 s before delivery and 2 s after it, ending early at ``end_frame``.

    The window is ``[delivery - 25, delivery + 50)``, 75 frames when available.
    """
    start = max(0, seq.delivery_frame - PRE_DELIVERY_FRAMES)
    stop = seq.delivery_frame + POST_DELIVERY_FRAMES
    if seq.end_frame is not None:
        stop = min(stop, seq.end_frame + 1)
    stop = min(stop, seq.n_frames)
    if start == 0 and stop == seq.n_frames:
        return seq
    fc = seq.first_contact_frame
    fc_player = seq.first_contact_player_id
    if fc is not None and not start <= fc < stop:
        fc, fc_player = None, None
    return seq.with_arrays(
        seq.positions[start:stop], seq.velocities[start:stop],
        delivery_frame=seq.delivery_frame - start,
        first_contact_frame=None if fc is None else fc - start,
        first_contact_player_id=fc_player,
        end_frame=None if seq.end_frame is None else seq.end_frame - start,
    )


def filter_for_training(ds: Dataset, strict: bool = True, squad_size: int = SQUAD_SIZE,
                        report: dict | None = None) -> Dataset:
    """Canonicalise, truncate and drop sequences unfit for model training.

    Goalkeepers are never modelled. Short corners are dropped. In strict mode
    every kept sequence has exactly ``squad_size`` outfield players per side;
    the permissive mode keeps any sequence whose two outfield counts match.
    """
    kept = []
    dropped: dict[str, list[str]] = defaultdict(list)
    for seq in ds:
        seq = truncate(canonicalize(seq))
        J, K = seq.n_defenders, seq.n_attackers
        if seq.short_corner:
            reason = "short_corner"
        elif strict and (J != squad_size or K != squad_size):
            reason = "squad_size"
        elif J != K or K < 2:
            reason = "squad_mismatch"
        else:
            kept.append(seq)
            continue
        dropped[reason].append(seq.sequence_id)
        log.warning("dropping sequence %s (%s: J=%d, K=%d)", seq.sequence_id, reason, J, K)
    if report is not None:
        report.update(dropped)
    return Dataset(tuple(kept))


def summarize(ds: Dataset) -> dict:
    groups = ds.groups()
    return {
        "sequences": len(ds),
        "frames": ds.total_frames,
        "groups": [
            {"defending_team_id": team, "delivery_type": dt, "sequences": len(g)}
            for (team, dt), g in groups.items()
        ],
    }
