"""Trajectory ingestion: CSV parsing with a configurable column mapping,
coordinate normalization, downsampling, scene assembly and lane-change
region labels.

Raw drone recordings use a y-down image frame and contain traffic in both
directions. Normalization first flips the lateral axis for every vehicle
(y, vy, ay negate) and then rotates left-heading trajectories (mean vx < 0
after the flip) by 180 degrees about the origin, so that afterwards every
trajectory heads right and +y points left of travel.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields as dc_fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import RoiConfig, Scene, VehicleState, in_roi, relative_state
from .errors import (AmbiguousHeading, EmptyInput, MissingColumn,
                     MultipleLaneChanges, NoLaneChange, ParseError, RateMismatch)

Trajectory = list[VehicleState]


@dataclass(frozen=True)
class ColumnMap:
    """Source column names plus frame rates; defaults match the common
    drone-recording schema."""

    frame: str = "frame"
    vehicle_id: str = "id"
    x: str = "x"
    y: str = "y"
    vx: str = "xVelocity"
    vy: str = "yVelocity"
    ax: str = "xAcceleration"
    ay: str = "yAcceleration"
    lane_id: str = "laneId"
    source_rate_hz: int = 25
    target_rate_hz: int = 5

    def __post_init__(self):
        names = [self.frame, self.vehicle_id, self.x, self.y, self.vx,
                 self.vy, self.ax, self.ay, self.lane_id]
        if any(not n for n in names):
            raise ValueError("column names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("column names must be distinct")
        if self.source_rate_hz <= 0 or self.target_rate_hz <= 0:
            raise ValueError("rates must be positive")

    @property
    def stride(self) -> int:
        if self.source_rate_hz % self.target_rate_hz != 0:
            raise RateMismatch(
                f"source rate {self.source_rate_hz} Hz is not divisible by "
                f"target rate {self.target_rate_hz} Hz")
        return self.source_rate_hz // self.target_rate_hz


class Region(str, Enum):
    PRE = "PRE"
    LANE_CHANGE = "LANE_CHANGE"
    POST = "POST"
    ALL = "ALL"  # analysis-side selector, never a per-frame tag


@dataclass(frozen=True)
class RegionLabels:
    """Per-frame region tag for one ego trajectory; tags form contiguous
    PRE, LANE_CHANGE, POST blocks (PRE/POST may be empty after clipping)."""

    frames: np.ndarray                # (T,) int
    tags: tuple[Region, ...]          # (T,)
    crossing_frame: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64)
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.tags) != frames.shape[0]:
            raise ValueError("tags must align with frames")
        order = {Region.PRE: 0, Region.LANE_CHANGE: 1, Region.POST: 2}
        ranks = [order[t] for t in self.tags]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            raise ValueError("region blocks must appear in PRE, LANE_CHANGE, POST order")
        if Region.LANE_CHANGE not in self.tags:
            raise ValueError("lane-change block must be nonempty")
        inside = {int(f) for f, t in zip(frames, self.tags) if t is Region.LANE_CHANGE}
        if int(self.crossing_frame) not in inside:
            raise ValueError("crossing_frame must lie inside the lane-change block")

    def tag_of(self, frame: int) -> Region:
        idx = int(np.searchsorted(self.frames, frame))
        if idx >= len(self.tags) or self.frames[idx] != frame:
            raise KeyError(f"frame {frame} not covered by region labels")
        return self.tags[idx]


# parsing ----------------------------------------------------------------

_NUMERIC = ("x", "y", "vx", "vy", "ax", "ay")
_INTEGRAL = ("frame", "vehicle_id", "lane_id")


def parse_tracks(csv_source, cmap: ColumnMap = ColumnMap()) -> list[Trajectory]:
    """Read one trajectory per vehicle id from a CSV with a header row.

    Frames must be unique per vehicle; trajectories come back frame-sorted,
    ordered by first appearance in the file. Units pass through unchanged.
    """
    if isinstance(csv_source, (str, Path)):
        with open(csv_source, newline="", encoding="utf-8") as fh:
            return parse_tracks(fh, cmap)

    reader = csv.DictReader(csv_source)
    if reader.fieldnames is None:
        raise EmptyInput("no header row")
    colnames = {f.name: getattr(cmap, f.name) for f in dc_fields(cmap)
                if f.name not in ("source_rate_hz", "target_rate_hz")}
    for attr, col in colnames.items():
        if col not in reader.fieldnames:
            raise MissingColumn(col)

    by_vehicle: dict[int, list[VehicleState]] = {}
    seen: set[tuple[int, int]] = set()
    n_rows = 0
    for row_no, row in enumerate(reader, start=2):  # header is line 1
        n_rows += 1
        rec = {}
        for attr in _INTEGRAL:
            col = colnames[attr]
            try:
                rec[attr] = int(float(row[col]))
            except (TypeError, ValueError):
                raise ParseError(row_no, col, f"not an integer: {row[col]!r}") from None
        for attr in _NUMERIC:
            col = colnames[attr]
            try:
                rec[attr] = float(row[col])
            except (TypeError, ValueError):
                raise ParseError(row_no, col, f"not a number: {row[col]!r}") from None
            if not math.isfinite(rec[attr]):
                raise ParseError(row_no, col, "non-finite value")
        key = (rec["vehicle_id"], rec["frame"])
        if key in seen:
            raise ParseError(row_no, colnames["frame"],
                             f"duplicate (id, frame) = {key}")
        seen.add(key)
        try:
            state = VehicleState(**rec)
        except ValueError as exc:
            raise ParseError(row_no, colnames["frame"], str(exc)) from None
        by_vehicle.setdefault(rec["vehicle_id"], []).append(state)

    if n_rows == 0:
        raise EmptyInput("no data rows")
    return [sorted(states, key=lambda s: s.frame) for states in by_vehicle.values()]


def write_tracks_csv(trajectories: Iterable[Trajectory], path,
                     cmap: ColumnMap = ColumnMap(), *, image_axes: bool = True) -> None:
    """Write trajectories in the schema parse_tracks consumes. With
    ``image_axes`` the lateral axis is emitted y-down (recording
    convention), which normalize() undoes on the way back in."""
    sign = -1.0 if image_axes else 1.0
    rows = []
    for traj in trajectories:
        for s in traj:
            rows.append((s.frame, s.vehicle_id, s.x, sign * s.y, s.vx, sign * s.vy,
                         s.ax, sign * s.ay, s.lane_id))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([cmap.frame, cmap.vehicle_id, cmap.x, cmap.y, cmap.vx,
                         cmap.vy, cmap.ax, cmap.ay, cmap.lane_id])
        for frame, vid, x, y, vx, vy, ax, ay, lane in rows:
            writer.writerow([frame, vid, repr(x), repr(y), repr(vx), repr(vy),
                             repr(ax), repr(ay), lane])


# normalization ----------------------------------------------------------

def _flip_lateral(s: VehicleState) -> VehicleState:
    return VehicleState(vehicle_id=s.vehicle_id, frame=s.frame, x=s.x, y=-s.y,
                        vx=s.vx, vy=-s.vy, ax=s.ax, ay=-s.ay, lane_id=s.lane_id)


def _rotate_180(s: VehicleState) -> VehicleState:
    return VehicleState(vehicle_id=s.vehicle_id, frame=s.frame, x=-s.x, y=-s.y,
                        vx=-s.vx, vy=-s.vy, ax=-s.ax, ay=-s.ay, lane_id=s.lane_id)


def normalize(trajectories: Sequence[Trajectory]) -> list[Trajectory]:
    """Flip the lateral axis everywhere, then rotate left-heading
    trajectories 180 degrees about the origin so every trajectory ends up
    with mean vx > 0. Both maps are isometries, so inter-vehicle geometry
    within a common transform is preserved."""
    out = []
    for traj in trajectories:
        flipped = [_flip_lateral(s) for s in traj]
        mean_vx = float(np.mean([s.vx for s in flipped]))
        if mean_vx == 0.0:
            vid = traj[0].vehicle_id if traj else "?"
            raise AmbiguousHeading(f"vehicle {vid}: mean vx is exactly zero")
        if mean_vx < 0:
            flipped = [_rotate_180(s) for s in flipped]
        out.append(flipped)
    return out


def downsample(trajectory: Trajectory, cmap: ColumnMap) -> Trajectory:
    """Keep every k-th state (k = source/target rate) starting from the
    first, renumbering frames consecutively at the target rate. Trajectories
    sharing a start phase stay mutually aligned."""
    k = cmap.stride
    kept = trajectory[::k]
    return [VehicleState(vehicle_id=s.vehicle_id, frame=i, x=s.x, y=s.y,
                         vx=s.vx, vy=s.vy, ax=s.ax, ay=s.ay, lane_id=s.lane_id)
            for i, s in enumerate(kept)]


# scenes and regions -----------------------------------------------------

def extract_scenes(ego_trajectory: Trajectory, all_trajectories: Sequence[Trajectory],
                   roi: RoiConfig = RoiConfig()) -> list[Scene]:
    """One Scene per ego frame; neighbors are the other vehicles co-present
    at that frame whose relative position falls inside the ROI."""
    ego_id = ego_trajectory[0].vehicle_id
    by_frame: dict[int, list[VehicleState]] = {}
    for traj in all_trajectories:
        for s in traj:
            if s.vehicle_id != ego_id:
                by_frame.setdefault(s.frame, []).append(s)
    scenes = []
    for ego in ego_trajectory:
        candidates = sorted(by_frame.get(ego.frame, ()), key=lambda s: s.vehicle_id)
        neighbors = []
        for other in candidates:
            dx, dy, _, _ = relative_state(ego, other)
            if in_roi(dx, dy, roi):
                neighbors.append(other)
        scenes.append(Scene(ego=ego, neighbors=tuple(neighbors), frame=ego.frame, roi=roi))
    return scenes


def delineate_regions(ego_trajectory: Trajectory, buffer_s: float = 2.0,
                      rate_hz: float = 5.0) -> RegionLabels:
    """Split an ego trajectory into pre / lane-change / post regions around
    its single lane-id crossing; the lane-change block spans +-buffer_s
    seconds of the crossing, clipped to the trajectory."""
    if buffer_s <= 0:
        raise ValueError("buffer_s must be positive")
    lanes = [s.lane_id for s in ego_trajectory]
    changes = [i for i in range(1, len(lanes)) if lanes[i] != lanes[i - 1]]
    if not changes:
        raise NoLaneChange("lane_id never changes")
    if len(changes) > 1:
        raise MultipleLaneChanges(f"{len(changes)} lane-id changes; split the trajectory")
    crossing_frame = ego_trajectory[changes[0]].frame
    window = round(buffer_s * rate_hz)
    lo, hi = crossing_frame - window, crossing_frame + window
    frames = np.array([s.frame for s in ego_trajectory], dtype=np.int64)
    tags = tuple(Region.PRE if f < lo else Region.POST if f > hi else Region.LANE_CHANGE
                 for f in frames)
    return RegionLabels(frames=frames, tags=tags, crossing_frame=int(crossing_frame))


# serialization ----------------------------------------------------------

_STATE_FIELDS = ("vehicle_id", "frame", "x", "y", "vx", "vy", "ax", "ay", "lane_id")


def _state_to_json(s: VehicleState) -> dict:
    return {name: getattr(s, name) for name in _STATE_FIELDS}


def _state_from_json(obj: dict) -> VehicleState:
    return VehicleState(**{name: obj[name] for name in _STATE_FIELDS})


def write_scenes_jsonl(scenes: Iterable[Scene], path) -> None:
    """One JSON object per line: {frame, ego, neighbors}."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            obj = {"frame": scene.frame,
                   "ego": _state_to_json(scene.ego),
                   "neighbors": [_state_to_json(nb) for nb in scene.neighbors]}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_scenes_jsonl(path, roi: RoiConfig = RoiConfig()) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            scenes.append(Scene(ego=_state_from_json(obj["ego"]),
                                neighbors=tuple(_state_from_json(nb) for nb in obj["neighbors"]),
                                frame=int(obj["frame"]), roi=roi))
    return scenes


def region_labels_to_json(labels: RegionLabels) -> dict:
    return {"crossing_frame": labels.crossing_frame,
            "frames": labels.frames.tolist(),
            "tags": [t.value for t in labels.tags]}


def region_labels_from_json(obj: dict) -> RegionLabels:
    return RegionLabels(frames=np.asarray(obj["frames"], dtype=np.int64),
                        tags=tuple(Region(t) for t in obj["tags"]),
                        crossing_frame=int(obj["crossing_frame"]))
