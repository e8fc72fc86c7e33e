"""File formats: JSONL trajectory databases, transform/session JSON, debug
CSV dumps, and the declarative scenario config format.

A database file starts with a header line carrying a ``meta`` object
({sensor_id, frame_period, sensing_range}) followed by one JSON object per
position: {sensor_id, track_id, frame, t, x, y, z, l, w, h, class}.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

from .features import FeatureDatabase
from .matching import FILTER_BBOX, FILTER_COUNT, FILTER_HIST, FILTER_MUTUAL, PositionMatch
from .model import Position, Trajectory, TrajectoryDatabase, Transform4D
from .pipeline import CalibrationSession
from .simulator import LAYOUTS, ScenarioConfig, default_scenario


class FileFormatError(ValueError):
    """Malformed input file; message carries path and line context."""


def fmt(value: float) -> str:
    """Floats printed with 6 significant digits (stable CLI output)."""
    return f"{value:.6g}"


# ---------------------------------------------------------------------------
# trajectory databases


def write_database_jsonl(db: TrajectoryDatabase, path) -> None:
    with open(path, "w") as fh:
        header = {
            "meta": {
                "sensor_id": db.sensor_id,
                "frame_period": db.frame_period,
                "sensing_range": db.sensing_range,
            }
        }
        fh.write(json.dumps(header) + "\n")
        for traj in db.trajectories:
            for p in traj.positions:
                record = {
                    "sensor_id": db.sensor_id,
                    "track_id": p.track_id,
                    "frame": p.frame_index,
                    "t": p.t,
                    "x": p.x,
                    "y": p.y,
                    "z": p.z,
                    "l": p.bbox[0],
                    "w": p.bbox[1],
                    "h": p.bbox[2],
                    "class": p.class_label,
                }
                fh.write(json.dumps(record) + "\n")


def read_database_jsonl(path) -> TrajectoryDatabase:
    path = Path(path)
    tracks: dict[str, list[Position]] = {}
    meta = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc
            if line_no == 1:
                if "meta" not in record:
                    raise FileFormatError(f"{path}:1: first line must carry a 'meta' header")
                meta = record["meta"]
                missing = {"sensor_id", "frame_period", "sensing_range"} - set(meta)
                if missing:
                    raise FileFormatError(f"{path}:1: meta missing keys {sorted(missing)}")
                continue
            try:
                p = Position(
                    x=float(record["x"]),
                    y=float(record["y"]),
                    z=float(record["z"]),
                    t=float(record["t"]),
                    frame_index=int(record["frame"]),
                    bbox=(float(record["l"]), float(record["w"]), float(record["h"])),
                    class_label=str(record["class"]),
                    track_id=str(record["track_id"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FileFormatError(f"{path}:{line_no}: bad position record: {exc}") from exc
            tracks.setdefault(p.track_id, []).append(p)
    if meta is None:
        raise FileFormatError(f"{path}: file is empty; expected a meta header line")
    trajectories = []
    for track_id, positions in tracks.items():
        try:
            trajectories.append(Trajectory(track_id, tuple(positions)))
        except ValueError as exc:
            raise FileFormatError(f"{path}: track {track_id!r}: {exc}") from exc
    try:
        return TrajectoryDatabase(
            sensor_id=str(meta["sensor_id"]),
            trajectories=tuple(trajectories),
            frame_period=float(meta["frame_period"]),
            sensing_range=float(meta["sensing_range"]),
        )
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# transforms, sessions, metric reports


def write_transform_json(tf: Transform4D, path) -> None:
    with open(path, "w") as fh:
        json.dump(tf.to_dict(), fh, indent=2)
        fh.write("\n")


def read_transform_json(path) -> Transform4D:
    path = Path(path)
    try:
        with open(path) as fh:
            return Transform4D.from_dict(json.load(fh))
    except (json.JSONDecodeError, ValueError) as exc:
        raise FileFormatError(f"{path}: invalid transform file: {exc}") from exc


def write_session_json(session: CalibrationSession, path) -> None:
    with open(path, "w") as fh:
        json.dump(session.to_dict(), fh, indent=2)
        fh.write("\n")


def read_session_json(path) -> CalibrationSession:
    path = Path(path)
    try:
        with open(path) as fh:
            return CalibrationSession.from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: invalid session file: {exc}") from exc


# ---------------------------------------------------------------------------
# scenario config files (key = value lines)

_SCENARIO_KEYS = {
    "layout": str,
    "n_vehicles": int,
    "duration": float,
    "frame_period": float,
    "noise_sigma": float,
    "dropout_rate": float,
    "seed": int,
    "rotation_deg": float,
    "time_offset": float,
    "sensor_distance": float,
    "sensing_range": float,
    "sensor_height": float,
}


def parse_config_file(path) -> dict:
    """Parse ``key = value`` lines ('#' starts a comment). Keys and value
    types are validated against the scenario schema; unknown keys fail."""
    path = Path(path)
    out: dict = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FileFormatError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _SCENARIO_KEYS:
                raise FileFormatError(
                    f"{path}:{line_no}: unknown key {key!r} "
                    f"(known: {', '.join(sorted(_SCENARIO_KEYS))})"
                )
            caster = _SCENARIO_KEYS[key]
            try:
                out[key] = caster(value)
            except ValueError as exc:
                raise FileFormatError(
                    f"{path}:{line_no}: bad value for {key!r}: {value!r}"
                ) from exc
    if "layout" in out and out["layout"] not in LAYOUTS:
        raise FileFormatError(f"{path}: layout must be one of {LAYOUTS}")
    return out


def scenario_from_mapping(mapping: Mapping) -> ScenarioConfig:
    kwargs = dict(mapping)
    layout = kwargs.pop("layout", "four_way")
    return default_scenario(layout, **kwargs)


# ---------------------------------------------------------------------------
# debug CSV dumps


def write_features_csv(db: TrajectoryDatabase, fdb: FeatureDatabase, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "track_id", "frame", "c", "alpha", "sigma2", "valid"])
        for traj, feats in zip(db.trajectories, fdb.per_trajectory):
            for i, p in enumerate(traj.positions):
                writer.writerow(
                    [
                        db.sensor_id,
                        p.track_id,
                        p.frame_index,
                        repr(float(feats.curvature[i])),
                        repr(float(feats.velocity_mean[i])),
                        repr(float(feats.velocity_variance[i])),
                        int(feats.valid[i]),
                    ]
                )


def write_matches_csv(
    matches: Sequence[PositionMatch],
    db_p: TrajectoryDatabase,
    db_q: TrajectoryDatabase,
    path,
) -> None:
    def _flag(m: PositionMatch, name: str) -> str:
        value = m.flag(name)
        return "" if value is None else str(int(value))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["p_track", "p_frame", "q_track", "q_frame", "dist", "mutual", "bbox", "count", "hist"]
        )
        for m in matches:
            p = db_p.trajectories[m.ref[0]].positions[m.ref[1]]
            q = db_q.trajectories[m.cand[0]].positions[m.cand[1]]
            writer.writerow(
                [
                    p.track_id,
                    p.frame_index,
                    q.track_id,
                    q.frame_index,
                    repr(m.feature_distance),
                    _flag(m, FILTER_MUTUAL),
                    _flag(m, FILTER_BBOX),
                    _flag(m, FILTER_COUNT),
                    _flag(m, FILTER_HIST),
                ]
            )
