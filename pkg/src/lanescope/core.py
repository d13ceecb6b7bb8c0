"""Shared domain types and relative-state arithmetic.

Coordinate conventions used throughout the package: ``x`` is longitudinal
(positive along the direction of travel), ``y`` is lateral (positive to the
left of travel). All relative quantities are (other - ego), so a faster
vehicle ahead of the ego has positive relative longitudinal velocity.

All types here are immutable value records and safe to share across
workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

FEATURE_DIM = 12  # 4 ego kinematics + 8 latent code


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class VehicleState:
    """One vehicle's kinematic record at one frame (SI units, frame index
    at the working rate)."""

    vehicle_id: int
    frame: int
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    lane_id: int

    def __post_init__(self):
        _check(_finite(self.x, self.y, self.vx, self.vy, self.ax, self.ay),
               "kinematic fields must be finite")
        _check(self.frame >= 0, "frame must be >= 0")
        _check(self.lane_id >= 1, "lane_id must be >= 1")


@dataclass(frozen=True)
class RoiConfig:
    """Ego-centred rectangular region of interest and its evaluation grid.

    Defaults give a 17 (longitudinal) x 13 (lateral) grid of test
    locations: x in {-40, -35, ..., +40} and y in {-6, -5, ..., +6}.
    """

    d_front: float = 40.0
    d_behind: float = 40.0
    d_side: float = 6.0
    dx: float = 5.0
    dy: float = 1.0

    def __post_init__(self):
        for name in ("d_front", "d_behind", "d_side", "dx", "dy"):
            _check(getattr(self, name) > 0, f"{name} must be positive")
        _check(self._divisible(self.d_front + self.d_behind, self.dx),
               "(d_front + d_behind) must be divisible by dx")
        _check(self._divisible(2 * self.d_side, self.dy),
               "2*d_side must be divisible by dy")

    @staticmethod
    def _divisible(span: float, step: float) -> bool:
        k = span / step
        return abs(k - round(k)) < 1e-9

    @property
    def n_cols(self) -> int:
        """Longitudinal grid points."""
        return round((self.d_front + self.d_behind) / self.dx) + 1

    @property
    def n_rows(self) -> int:
        """Lateral grid points."""
        return round(2 * self.d_side / self.dy) + 1

    @property
    def ego_cell(self) -> tuple[int, int]:
        """(row, col) of the cell at the ego position (0, 0)."""
        return round(self.d_side / self.dy), round(self.d_behind / self.dx)

    def grid_x(self) -> np.ndarray:
        return -self.d_behind + self.dx * np.arange(self.n_cols)

    def grid_y(self) -> np.ndarray:
        return -self.d_side + self.dy * np.arange(self.n_rows)

    def grid_points(self) -> np.ndarray:
        """All test locations, row-major over (row, col), shape (M, 2)."""
        ys, xs = np.meshgrid(self.grid_y(), self.grid_x(), indexing="ij")
        return np.column_stack([xs.ravel(), ys.ravel()])


@dataclass(frozen=True)
class FieldParams:
    """Kernel and skew hyperparameters for the velocity-field regression.

    ``xi_x = xi_y = 2`` makes the acceleration skew factor exactly 1 at zero
    acceleration, so the skewed field degenerates to the plain one.
    """

    A: float = 1.0
    sigma_x: float = 15.0
    sigma_y: float = 1.5
    lambda_x: float = 0.6
    lambda_y: float = 0.9
    xi_x: float = 2.0
    xi_y: float = 2.0
    jitter: float = 1e-8
    include_ego_anchor: bool = True

    def __post_init__(self):
        _check(self.A > 0, "A must be positive")
        _check(self.sigma_x > 0 and self.sigma_y > 0, "sigma_* must be positive")
        _check(self.xi_x > 0 and self.xi_y > 0, "xi_* must be positive")
        _check(self.jitter >= 0, "jitter must be nonnegative")


@dataclass(frozen=True)
class FieldTensor:
    """Grid of estimated relative velocities for one frame.

    ``values[r, c, 0]`` is the relative longitudinal velocity at lateral
    row r and longitudinal column c; channel 1 is the lateral component.
    Under the default RoiConfig the shape is (13, 17, 2) and the ego sits
    at (row 6, col 8).
    """

    values: np.ndarray
    frame: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        _check(arr.ndim == 3 and arr.shape[2] == 2,
               f"field tensor must be (rows, cols, 2), got {arr.shape}")
        _check(bool(np.isfinite(arr).all()), "field tensor entries must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Scene:
    """Ego state plus the ROI neighbors co-present at one frame."""

    ego: VehicleState
    neighbors: tuple[VehicleState, ...]
    frame: int
    roi: RoiConfig = field(default_factory=RoiConfig, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        _check(self.ego.frame == self.frame, "ego frame must match scene frame")
        ids = [nb.vehicle_id for nb in self.neighbors]
        _check(len(set(ids)) == len(ids), "neighbor ids must be distinct")
        _check(self.ego.vehicle_id not in ids, "ego must not appear in neighbors")
        for nb in self.neighbors:
            _check(nb.frame == self.frame, "neighbor frames must match scene frame")
            dx, dy, _, _ = relative_state(self.ego, nb)
            _check(in_roi(dx, dy, self.roi),
                   f"neighbor {nb.vehicle_id} at ({dx:.2f}, {dy:.2f}) is outside the ROI")

    @property
    def n_neighbors(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame 12-d feature vectors over one trajectory: the 4 ego
    kinematics [vx, vy, ax, ay] followed by the 8-d latent code."""

    values: np.ndarray  # (T, 12)
    frames: np.ndarray  # (T,) int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        frames = np.asarray(self.frames, dtype=np.int64)
        _check(vals.ndim == 2 and vals.shape[1] == FEATURE_DIM,
               f"feature array must be (T, {FEATURE_DIM}), got {vals.shape}")
        _check(frames.shape == (vals.shape[0],), "frames must align with values")
        _check(bool(np.isfinite(vals).all()), "features must be finite")
        vals = vals.copy()
        vals.setflags(write=False)
        frames = frames.copy()
        frames.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.values.shape[0]


def relative_state(ego: VehicleState, other: VehicleState) -> tuple[float, float, float, float]:
    """Relative position and velocity of ``other`` with respect to ``ego``,
    sign convention (other - ego)."""
    return (other.x - ego.x, other.y - ego.y,
            other.vx - ego.vx, other.vy - ego.vy)


def in_roi(dx: float, dy: float, roi: RoiConfig) -> bool:
    """Rectangle membership for a relative position; boundaries inclusive."""
    return (-roi.d_behind <= dx <= roi.d_front) and (abs(dy) <= roi.d_side)
