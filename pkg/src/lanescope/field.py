"""Gaussian-process velocity fields over the ego-centred region of interest.

Each frame's neighbors provide noise-free observations of the relative
velocity (other - ego) at their relative positions. A zero-mean GP with a
squared-exponential kernel, fitted independently per velocity channel,
interpolates those observations over the ROI grid:

    mu(P*) = K(P*, P) K(P, P)^-1 dV            (posterior mean)
    cov(P*) = K(P*, P*) - K(P*, P) K(P, P)^-1 K(P, P*)

The acceleration-sensitive variant multiplies the cross-covariance rows
elementwise by a skew matrix built from two logistic factors of each
observed vehicle's own acceleration, which stretches that vehicle's
influence in the direction it is accelerating:

    mu'(P*) = (K' o K(P*, P)) K(P, P)^-1 dV     (o = Hadamard product)
    k'(p_i, p_j, a_j) = prod_{l in {x,y}} xi_l / (1 + exp(-lambda_l a_{j,l} (l_i - l_j)))

Only the cross term is skewed; the training Gram is not. With
xi_x = xi_y = 2 and zero acceleration the skew factor is exactly 1 and the
skewed field coincides with the plain one.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from .core import FieldParams, FieldTensor, RoiConfig, Scene, relative_state
from .errors import SingularGram


@dataclass(frozen=True)
class GramSystem:
    """Factorized training system for one frame.

    ``points`` are neighbor positions relative to the ego (plus the (0, 0)
    ego anchor when enabled), ``chol`` is the lower Cholesky factor of the
    jittered Gram matrix, and ``dvx``/``dvy`` are the per-channel targets.
    """

    points: np.ndarray   # (N, 2)
    gram: np.ndarray     # (N, N), jitter included
    chol: np.ndarray     # (N, N) lower triangular
    dvx: np.ndarray      # (N,)
    dvy: np.ndarray      # (N,)
    params: FieldParams

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def targets(self, channel: str) -> np.ndarray:
        if channel == "x":
            return self.dvx
        if channel == "y":
            return self.dvy
        raise ValueError(f"channel must be 'x' or 'y', got {channel!r}")


def se_kernel(p_i: Sequence[float], p_j: Sequence[float], params: FieldParams) -> float:
    """Squared-exponential kernel with separate longitudinal/lateral
    length scales: A * exp(-dx^2 / (2 sx^2) - dy^2 / (2 sy^2))."""
    dx = p_i[0] - p_j[0]
    dy = p_i[1] - p_j[1]
    return float(params.A * np.exp(-dx * dx / (2 * params.sigma_x ** 2)
                                   - dy * dy / (2 * params.sigma_y ** 2)))


def kernel_matrix(P: np.ndarray, Q: np.ndarray, params: FieldParams) -> np.ndarray:
    """Cross-kernel matrix K[i, j] = se_kernel(P[i], Q[j]), shape (|P|, |Q|)."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    dx = P[:, 0, None] - Q[None, :, 0]
    dy = P[:, 1, None] - Q[None, :, 1]
    return params.A * np.exp(-dx ** 2 / (2 * params.sigma_x ** 2)
                             - dy ** 2 / (2 * params.sigma_y ** 2))


def _training_set(scene: Scene, params: FieldParams):
    """Observation positions, per-channel targets and per-point accelerations
    (the ego anchor, when present, contributes a zero target and zero
    acceleration)."""
    rel = [relative_state(scene.ego, nb) for nb in scene.neighbors]
    points = [(dx, dy) for dx, dy, _, _ in rel]
    dvx = [dvx for _, _, dvx, _ in rel]
    dvy = [dvy for _, _, _, dvy in rel]
    accels = [(nb.ax, nb.ay) for nb in scene.neighbors]
    if params.include_ego_anchor:
        points.append((0.0, 0.0))
        dvx.append(0.0)
        dvy.append(0.0)
        accels.append((0.0, 0.0))
    return (np.asarray(points, dtype=np.float64).reshape(-1, 2),
            np.asarray(dvx, dtype=np.float64),
            np.asarray(dvy, dtype=np.float64),
            np.asarray(accels, dtype=np.float64).reshape(-1, 2))


def build_gram(scene: Scene, params: FieldParams) -> GramSystem:
    """Assemble and factorize the training system for one scene.

    Raises SingularGram when there are no observations at all, when two
    observations sit at the same position with conflicting targets, or when
    the Cholesky factorization fails even after jitter.
    """
    points, dvx, dvy, _ = _training_set(scene, params)
    n = points.shape[0]
    if n == 0:
        raise SingularGram("no observations: empty scene with the ego anchor disabled")

    # Duplicated positions with equal targets are redundant but harmless
    # (jitter keeps the factorization alive); conflicting targets at one
    # position mean corrupt data and cannot be interpolated.
    for i in range(n):
        for j in range(i + 1, n):
            if points[i, 0] == points[j, 0] and points[i, 1] == points[j, 1]:
                if dvx[i] != dvx[j] or dvy[i] != dvy[j]:
                    raise SingularGram(
                        f"observations {i} and {j} share a position but disagree on targets")

    gram = kernel_matrix(points, points, params)
    gram[np.diag_indices(n)] += params.jitter * params.A
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularGram(f"Gram factorization failed: {exc}") from exc
    return GramSystem(points=points, gram=gram, chol=chol, dvx=dvx, dvy=dvy, params=params)


def gp_posterior_mean(sys: GramSystem, test_points: np.ndarray, channel: str) -> np.ndarray:
    """Posterior mean of one velocity channel at the test points (exact
    solve through the stored Cholesky factor)."""
    k_star = kernel_matrix(test_points, sys.points, sys.params)
    alpha = cho_solve((sys.chol, True), sys.targets(channel))
    return k_star @ alpha


def gp_posterior_cov(sys: GramSystem, test_points: np.ndarray) -> np.ndarray:
    """Posterior covariance at the test points (shared by both channels)."""
    k_star = kernel_matrix(test_points, sys.points, sys.params)
    k_tt = kernel_matrix(test_points, test_points, sys.params)
    v = solve_triangular(sys.chol, k_star.T, lower=True)
    cov = k_tt - v.T @ v
    return (cov + cov.T) / 2


def skew_factor(p_i: Sequence[float], p_j: Sequence[float],
                a_j: Sequence[float], params: FieldParams) -> float:
    """Acceleration skew factor for test point p_i and observed vehicle at
    p_j accelerating at a_j. Strictly positive (up to float underflow for
    |lambda * a * distance| beyond ~745); equals (xi_x/2)(xi_y/2) at zero
    acceleration."""
    ux = params.lambda_x * a_j[0] * (p_i[0] - p_j[0])
    uy = params.lambda_y * a_j[1] * (p_i[1] - p_j[1])
    return float(params.xi_x * expit(ux) * params.xi_y * expit(uy))


def skew_matrix(test_points: np.ndarray, train_points: np.ndarray,
                accels: np.ndarray, params: FieldParams) -> np.ndarray:
    """Skew factors for every (test point, observation) pair, shape (M, N)."""
    test_points = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    dx = test_points[:, 0, None] - train_points[None, :, 0]
    dy = test_points[:, 1, None] - train_points[None, :, 1]
    ux = params.lambda_x * accels[None, :, 0] * dx
    uy = params.lambda_y * accels[None, :, 1] * dy
    return params.xi_x * expit(ux) * params.xi_y * expit(uy)


def _field(scene: Scene, roi: RoiConfig, params: FieldParams, skewed: bool) -> FieldTensor:
    sys = build_gram(scene, params)
    grid = roi.grid_points()
    k_star = kernel_matrix(grid, sys.points, params)
    if skewed:
        _, _, _, accels = _training_set(scene, params)
        k_star = skew_matrix(grid, sys.points, accels, params) * k_star
    values = np.empty((roi.n_rows, roi.n_cols, 2))
    for ch, channel in enumerate(("x", "y")):
        alpha = cho_solve((sys.chol, True), sys.targets(channel))
        values[:, :, ch] = (k_star @ alpha).reshape(roi.n_rows, roi.n_cols)
    return FieldTensor(values=values, frame=scene.frame)


def gvf(scene: Scene, roi: RoiConfig, params: FieldParams) -> FieldTensor:
    """Plain Gaussian velocity field (no acceleration skew)."""
    return _field(scene, roi, params, skewed=False)


def as_gvf(scene: Scene, roi: RoiConfig, params: FieldParams) -> FieldTensor:
    """Acceleration-sensitive Gaussian velocity field: cross-covariance rows
    are multiplied elementwise by the skew factors before the solve."""
    return _field(scene, roi, params, skewed=True)


# serialization ---------------------------------------------------------

def field_to_json(tensor: FieldTensor, roi: RoiConfig) -> dict:
    """JSON-ready mapping with the grid geometry and row-major channels."""
    return {
        "frame": int(tensor.frame),
        "grid": {
            "x0": -roi.d_behind, "y0": -roi.d_side,
            "dx": roi.dx, "dy": roi.dy,
            "nx": roi.n_cols, "ny": roi.n_rows,
        },
        "dvx": tensor.values[:, :, 0].ravel().tolist(),
        "dvy": tensor.values[:, :, 1].ravel().tolist(),
    }


def field_from_json(obj: dict) -> FieldTensor:
    ny, nx = obj["grid"]["ny"], obj["grid"]["nx"]
    values = np.stack([
        np.asarray(obj["dvx"], dtype=np.float64).reshape(ny, nx),
        np.asarray(obj["dvy"], dtype=np.float64).reshape(ny, nx),
    ], axis=2)
    return FieldTensor(values=values, frame=int(obj["frame"]))


def write_fields_jsonl(tensors: Iterable[FieldTensor], roi: RoiConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tensor in tensors:
            fh.write(json.dumps(field_to_json(tensor, roi), sort_keys=True) + "\n")


def read_fields_jsonl(path) -> list[FieldTensor]:
    with open(path, encoding="utf-8") as fh:
        return [field_from_json(json.loads(line)) for line in fh if line.strip()]


def write_fields_csv(tensors: Iterable[FieldTensor], roi: RoiConfig, path) -> None:
    """Flat per-cell rows (frame, row, col, x, y, dvx, dvy) for plotting tools."""
    xs, ys = roi.grid_x(), roi.grid_y()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "row", "col", "x", "y", "dvx", "dvy"])
        for tensor in tensors:
            for r in range(roi.n_rows):
                for c in range(roi.n_cols):
                    writer.writerow([tensor.frame, r, c, repr(float(xs[c])), repr(float(ys[r])),
                                     repr(float(tensor.values[r, c, 0])),
                                     repr(float(tensor.values[r, c, 1]))])
