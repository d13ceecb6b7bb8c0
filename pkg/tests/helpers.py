"""Shared test utilities: random scene construction and label matching."""
import numpy as np
from scipy.optimize import linear_sum_assignment

from lanescope.core import RoiConfig, Scene, VehicleState


def make_state(vehicle_id=1, frame=0, x=0.0, y=0.0, vx=30.0, vy=0.0,
               ax=0.0, ay=0.0, lane_id=2) -> VehicleState:
    return VehicleState(vehicle_id=vehicle_id, frame=frame, x=x, y=y,
                        vx=vx, vy=vy, ax=ax, ay=ay, lane_id=lane_id)


def random_scene(rng, n_neighbors=None, roi=RoiConfig(), min_sep=1.0,
                 accel_scale=1.0, frame=0) -> Scene:
    """Scene with the ego at the origin and neighbors at ROI positions kept
    at least min_sep apart (and away from the ego anchor)."""
    if n_neighbors is None:
        n_neighbors = int(rng.integers(1, 9))
    ego = make_state(vehicle_id=1, frame=frame,
                     vx=float(rng.uniform(20, 35)), vy=float(rng.uniform(-0.5, 0.5)))
    positions = [(0.0, 0.0)]  # keep clear of the ego anchor
    neighbors = []
    attempts = 0
    while len(neighbors) < n_neighbors:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("could not place neighbors with the given separation")
        dx = float(rng.uniform(-roi.d_behind, roi.d_front))
        dy = float(rng.uniform(-roi.d_side, roi.d_side))
        if any((dx - px) ** 2 + (dy - py) ** 2 < min_sep ** 2 for px, py in positions):
            continue
        positions.append((dx, dy))
        neighbors.append(make_state(
            vehicle_id=len(neighbors) + 2, frame=frame,
            x=ego.x + dx, y=ego.y + dy,
            vx=ego.vx + float(rng.uniform(-8, 8)), vy=ego.vy + float(rng.uniform(-1, 1)),
            ax=accel_scale * float(rng.uniform(-2, 2)),
            ay=accel_scale * float(rng.uniform(-0.8, 0.8))))
    return Scene(ego=ego, neighbors=tuple(neighbors), frame=frame, roi=roi)


def lane_scene(rng, roi=RoiConfig(), lane_width=4.0, frame=0) -> Scene:
    """Scene with highway-like geometry: each lane carries a coherent flow
    speed and generous longitudinal gaps, so the noise-free interpolation
    stays in a physical range (close same-lane vehicles with wildly
    different speeds would make it overshoot)."""
    ego = make_state(vehicle_id=1, frame=frame,
                     vx=float(rng.uniform(22, 34)), vy=float(rng.uniform(-0.4, 0.4)))
    neighbors = []
    vid = 2
    for lane_offset in (-lane_width, 0.0, lane_width):
        # traffic close to the ego in its own lane moves with it; the skewed
        # cross-covariance amplifies near-anchor velocity mismatches
        own_lane = abs(lane_offset) < 1e-9
        lane_dvx = float(rng.uniform(-2, 2) if own_lane else rng.uniform(-7, 7))
        slots = np.arange(-36.0, 37.0, 24.0) + rng.uniform(-4, 4, size=4)
        for dx in slots:
            if rng.random() < 0.45:
                continue
            if own_lane and abs(dx) < 10.0:
                continue  # keep the ego's own cell clear
            dy = lane_offset + float(rng.uniform(-0.4, 0.4))
            if not (-roi.d_behind <= dx <= roi.d_front and abs(dy) <= roi.d_side):
                continue
            neighbors.append(make_state(
                vehicle_id=vid, frame=frame, x=ego.x + float(dx), y=ego.y + dy,
                vx=ego.vx + lane_dvx + float(rng.uniform(-1.5, 1.5)),
                vy=float(rng.uniform(-1, 1)),
                ax=float(rng.uniform(-2, 2)), ay=float(rng.uniform(-0.6, 0.6))))
            vid += 1
    return Scene(ego=ego, neighbors=tuple(neighbors), frame=frame, roi=roi)


def scale_scene_accels(scene: Scene, scale: float) -> Scene:
    neighbors = tuple(
        VehicleState(vehicle_id=nb.vehicle_id, frame=nb.frame, x=nb.x, y=nb.y,
                     vx=nb.vx, vy=nb.vy, ax=nb.ax * scale, ay=nb.ay * scale,
                     lane_id=nb.lane_id)
        for nb in scene.neighbors)
    return Scene(ego=scene.ego, neighbors=neighbors, frame=scene.frame, roi=scene.roi)


def matched_hamming_error(true_labels, pred_labels, n_true, n_pred) -> float:
    """Fraction of frames mislabeled under the best one-to-one matching of
    predicted states to true states."""
    conf = np.zeros((n_true, n_pred))
    for a, b in zip(true_labels, pred_labels):
        conf[int(a), int(b)] += 1
    rows, cols = linear_sum_assignment(-conf)
    return 1.0 - conf[rows, cols].sum() / len(true_labels)


def moving_average(values, window):
    values = np.asarray(values, dtype=np.float64)
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
