"""Deterministic, seeded generators for scripted highway scenarios and for
ground-truth hidden-Markov feature sequences.

The scenario generator integrates scripted longitudinal accelerations with
explicit Euler at the spec rate and overlays an analytic cosine ramp for
lane changes, so lateral velocity and acceleration are smooth (C^1) and the
final lateral offset is exactly one lane width. The HMM generator is the
oracle used to validate the segmentation stack: it samples a label chain
with a known self-transition mass and draws zero-mean Gaussian emissions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FEATURE_DIM, FeatureSequence, VehicleState
from .errors import SpecError

MIN_INITIAL_GAP = 5.0  # m, same-lane starts closer than this are overlapping


@dataclass(frozen=True)
class LaneChangeCommand:
    start_frame: int
    duration: int          # frames
    direction: int = 1     # +1 toward higher lane ids (left), -1 toward lower

    def __post_init__(self):
        if self.duration <= 0:
            raise SpecError("lane-change duration must be positive")
        if self.direction not in (-1, 1):
            raise SpecError("lane-change direction must be +1 or -1")


@dataclass(frozen=True)
class VehicleScript:
    """Initial state plus a piecewise-constant longitudinal acceleration
    schedule: (from_frame, ax) segments, earlier segments first."""

    vehicle_id: int
    lane: int
    start_x: float
    speed: float
    accel_schedule: tuple[tuple[int, float], ...] = ()
    lane_change: LaneChangeCommand | None = None


@dataclass(frozen=True)
class ScenarioSpec:
    vehicles: tuple[VehicleScript, ...]
    lane_count: int = 3
    lane_width: float = 4.0
    duration: int = 150    # frames
    rate: float = 5.0      # Hz
    speed_jitter: float = 0.0  # std-dev of seeded initial-speed noise, m/s

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        if self.lane_count not in (2, 3):
            raise SpecError("lane_count must be 2 or 3")
        if self.duration <= 0 or self.rate <= 0:
            raise SpecError("duration and rate must be positive")
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise SpecError("vehicle ids must be distinct")
        for v in self.vehicles:
            if not 1 <= v.lane <= self.lane_count:
                raise SpecError(f"vehicle {v.vehicle_id} starts outside the road")
            if v.lane_change is not None:
                if not 1 <= v.lane + v.lane_change.direction <= self.lane_count:
                    raise SpecError(f"vehicle {v.vehicle_id} would leave the road")
        for i, a in enumerate(self.vehicles):
            for b in self.vehicles[i + 1:]:
                if a.lane == b.lane and abs(a.start_x - b.start_x) < MIN_INITIAL_GAP:
                    raise SpecError(
                        f"vehicles {a.vehicle_id} and {b.vehicle_id} overlap in lane {a.lane}")


def lane_center(lane: int, lane_width: float) -> float:
    return (lane - 0.5) * lane_width


def _lane_from_y(y: float, lane_width: float, lane_count: int) -> int:
    return int(min(max(math.floor(y / lane_width) + 1, 1), lane_count))


def _ramp(tau: float, width: float, duration_s: float) -> tuple[float, float, float]:
    """Cosine lane-change profile: offset, and its first two time
    derivatives, at tau seconds into a ramp of the given duration."""
    if tau <= 0:
        return 0.0, 0.0, 0.0
    if tau >= duration_s:
        return width, 0.0, 0.0
    w = math.pi / duration_s
    offset = width * (1 - math.cos(w * tau)) / 2
    vy = width * w * math.sin(w * tau) / 2
    ay = width * w * w * math.cos(w * tau) / 2
    return offset, vy, ay


def _ax_at(schedule: Sequence[tuple[int, float]], frame: int) -> float:
    ax = 0.0
    for start, value in schedule:
        if frame >= start:
            ax = value
    return ax


def gen_scenario(spec: ScenarioSpec, seed: int = 0) -> list[list[VehicleState]]:
    """Integrate every scripted vehicle over the scenario duration.

    Deterministic for a fixed (spec, seed); the seed only feeds the optional
    initial-speed jitter.
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / spec.rate
    trajectories = []
    for script in spec.vehicles:
        speed0 = script.speed
        if spec.speed_jitter > 0:
            speed0 += spec.speed_jitter * rng.standard_normal()
        base_y = lane_center(script.lane, spec.lane_width)
        x, vx = script.start_x, speed0
        states = []
        for t in range(spec.duration):
            ax = _ax_at(script.accel_schedule, t)
            if script.lane_change is not None:
                cmd = script.lane_change
                tau = (t - cmd.start_frame) * dt
                offset, vy, ay = _ramp(tau, cmd.direction * spec.lane_width, cmd.duration * dt)
            else:
                offset, vy, ay = 0.0, 0.0, 0.0
            y = base_y + offset
            states.append(VehicleState(
                vehicle_id=script.vehicle_id, frame=t, x=x, y=y,
                vx=vx, vy=vy, ax=ax, ay=ay,
                lane_id=_lane_from_y(y, spec.lane_width, spec.lane_count)))
            x += vx * dt
            vx += ax * dt
        trajectories.append(states)
    return trajectories


def sample_scenario_specs(n: int, rng: np.random.Generator, *,
                          lane_count: int = 3, duration: int = 750,
                          rate: float = 25.0, lane_width: float = 4.0) -> list[ScenarioSpec]:
    """Seeded family of lane-change scenarios: one ego per scenario plus a
    varying number of scripted neighbors with mixed speeds and maneuvers.

    Convenience plumbing for the pipeline and test datasets; everything it
    emits is an ordinary explicit ScenarioSpec.
    """
    specs = []
    for _ in range(n):
        ego_lane = int(rng.integers(1, lane_count))  # leaves room to go left
        vehicles = [VehicleScript(
            vehicle_id=1, lane=ego_lane, start_x=0.0,
            speed=float(rng.uniform(24, 32)),
            accel_schedule=((0, float(rng.uniform(-0.3, 0.5))),),
            lane_change=LaneChangeCommand(
                start_frame=int(rng.integers(duration // 4, duration // 2)),
                duration=int(rng.integers(round(2.5 * rate), round(4.5 * rate))),
                direction=1),
        )]
        next_id = 2
        for lane in range(1, lane_count + 1):
            for slot_x in (-60.0, -25.0, 25.0, 60.0):
                if lane == ego_lane and abs(slot_x) < MIN_INITIAL_GAP:
                    continue
                if rng.random() < 0.55:
                    continue
                vehicles.append(VehicleScript(
                    vehicle_id=next_id, lane=lane,
                    start_x=slot_x + float(rng.uniform(-6, 6)),
                    speed=float(rng.uniform(21, 35)),
                    accel_schedule=((0, float(rng.uniform(-0.6, 0.6))),),
                ))
                next_id += 1
        specs.append(ScenarioSpec(vehicles=tuple(vehicles), lane_count=lane_count,
                                  lane_width=lane_width, duration=duration, rate=rate))
    return specs


# ground-truth HMM sequences ---------------------------------------------

@dataclass(frozen=True)
class HmmSpec:
    """Ground-truth chain: K states, diagonal transition mass self_prob with
    the rest spread uniformly, zero-mean Gaussian emissions (D = 12)."""

    K: int
    T: int
    self_prob: float = 0.95
    covariances: tuple[np.ndarray, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise SpecError("K must be >= 1")
        if self.T < 1:
            raise SpecError("T must be >= 1")
        if not 0 < self.self_prob < 1:
            raise SpecError("self_prob must lie in (0, 1)")
        if self.covariances is not None:
            covs = tuple(np.asarray(c, dtype=np.float64) for c in self.covariances)
            if len(covs) != self.K:
                raise SpecError("need one covariance per state")
            for c in covs:
                if c.shape != (FEATURE_DIM, FEATURE_DIM):
                    raise SpecError(f"covariances must be {FEATURE_DIM}x{FEATURE_DIM}")
                if not np.allclose(c, c.T):
                    raise SpecError("covariances must be symmetric")
                try:
                    np.linalg.cholesky(c)
                except np.linalg.LinAlgError:
                    raise SpecError("covariances must be positive definite") from None
            object.__setattr__(self, "covariances", covs)

    def transition_matrix(self) -> np.ndarray:
        if self.K == 1:
            return np.ones((1, 1))
        off = (1 - self.self_prob) / (self.K - 1)
        pi = np.full((self.K, self.K), off)
        np.fill_diagonal(pi, self.self_prob)
        return pi


def default_covariances(K: int, d: int = FEATURE_DIM, spread: float = 2.5) -> tuple[np.ndarray, ...]:
    """Isotropic covariance ladder with geometric scale steps; states are
    separable through their emission magnitude alone."""
    return tuple(np.eye(d) * (0.2 * spread ** k) ** 2 for k in range(K))


def gen_hmm_sequence(spec: HmmSpec) -> tuple[FeatureSequence, np.ndarray]:
    """Sample (features, labels) from the ground-truth chain; labels are in
    {0..K-1} and the initial state is uniform. Deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    pi = spec.transition_matrix()
    covs = spec.covariances or default_covariances(spec.K)
    chols = [np.linalg.cholesky(c) for c in covs]

    labels = np.empty(spec.T, dtype=np.int64)
    labels[0] = rng.integers(spec.K)
    for t in range(1, spec.T):
        labels[t] = rng.choice(spec.K, p=pi[labels[t - 1]])
    values = np.empty((spec.T, FEATURE_DIM))
    for t in range(spec.T):
        values[t] = chols[labels[t]] @ rng.standard_normal(FEATURE_DIM)
    return FeatureSequence(values=values, frames=np.arange(spec.T)), labels
