import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from lanescope import field
from lanescope.core import FieldParams, RoiConfig, Scene
from lanescope.errors import SingularGram

from helpers import make_state, random_scene, scale_scene_accels

PARAMS = FieldParams()
ROI = RoiConfig()
coord = st.floats(min_value=-100, max_value=100, allow_nan=False)


# se_kernel ---------------------------------------------------------------

def test_se_kernel_examples():
    # oracle: direct closed-form evaluation with math.exp
    assert field.se_kernel((3.0, 1.0), (3.0, 1.0), PARAMS) == pytest.approx(1.0, abs=0)
    assert field.se_kernel((15.0, 0.0), (0.0, 0.0), PARAMS) == pytest.approx(
        math.exp(-0.5), rel=1e-12)
    assert field.se_kernel((0.0, 3.0), (0.0, 0.0), PARAMS) == pytest.approx(
        math.exp(-2.0), rel=1e-12)


@given(ax=coord, ay=coord, bx=coord, by=coord)
@settings(max_examples=100)
def test_se_kernel_symmetric_and_bounded(ax, ay, bx, by):
    k_ab = field.se_kernel((ax, ay), (bx, by), PARAMS)
    k_ba = field.se_kernel((bx, by), (ax, ay), PARAMS)
    assert k_ab == pytest.approx(k_ba, rel=1e-12)
    assert 0 <= k_ab <= PARAMS.A


def test_gram_matrices_positive_semidefinite():
    # 200 random point sets, up to 40 points: min eigenvalue >= -1e-8
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(2, 41))
        pts = np.column_stack([rng.uniform(-40, 40, n), rng.uniform(-6, 6, n)])
        gram = field.kernel_matrix(pts, pts, PARAMS)
        assert np.max(np.abs(gram - gram.T)) < 1e-12
        assert np.linalg.eigvalsh(gram).min() >= -1e-8


# build_gram ---------------------------------------------------------------

def test_build_gram_anchor_only():
    ego = make_state(vehicle_id=1)
    scene = Scene(ego=ego, neighbors=(), frame=0)
    sys = field.build_gram(scene, PARAMS)
    assert sys.points.shape == (1, 2)
    assert sys.gram.shape == (1, 1)
    assert sys.gram[0, 0] == pytest.approx(1.0 + PARAMS.jitter, rel=1e-12)
    assert sys.dvx[0] == 0 and sys.dvy[0] == 0


def test_build_gram_empty_without_anchor():
    scene = Scene(ego=make_state(), neighbors=(), frame=0)
    with pytest.raises(SingularGram):
        field.build_gram(scene, FieldParams(include_ego_anchor=False))


def test_build_gram_single_neighbor_entries():
    ego = make_state(vehicle_id=1)
    nb = make_state(vehicle_id=2, x=30, y=2, vx=25)
    scene = Scene(ego=ego, neighbors=(nb,), frame=0)
    sys = field.build_gram(scene, PARAMS)
    assert sys.points.shape == (2, 2)
    expected = math.exp(-(30.0 ** 2) / (2 * 15 ** 2) - (2.0 ** 2) / (2 * 1.5 ** 2))
    assert sys.gram[0, 1] == pytest.approx(expected, rel=1e-12)
    assert sys.gram[1, 0] == pytest.approx(expected, rel=1e-12)
    assert sys.dvx[0] == -5.0


def test_duplicate_positions():
    ego = make_state(vehicle_id=1)
    a = make_state(vehicle_id=2, x=20, y=1, vx=25)
    b_same = make_state(vehicle_id=3, x=20, y=1, vx=25)
    b_diff = make_state(vehicle_id=3, x=20, y=1, vx=28)
    params = FieldParams(include_ego_anchor=False)

    # identical targets: rank-1 Gram is rescued by the jitter
    sys = field.build_gram(Scene(ego=ego, neighbors=(a, b_same), frame=0), params)
    assert sys.chol.shape == (2, 2)

    # without jitter the rank-1 Gram cannot factorize
    with pytest.raises(SingularGram):
        field.build_gram(Scene(ego=ego, neighbors=(a, b_same), frame=0),
                         FieldParams(include_ego_anchor=False, jitter=0.0))

    # conflicting targets at one position are flagged even with jitter
    with pytest.raises(SingularGram):
        field.build_gram(Scene(ego=ego, neighbors=(a, b_diff), frame=0), params)


# posterior mean / covariance ------------------------------------------------

def _single_obs_system(dvx=2.0):
    ego = make_state(vehicle_id=1)
    nb = make_state(vehicle_id=2, x=0.0, y=0.0, vx=ego.vx + dvx)
    # neighbor exactly on the ego position is fine with the anchor disabled
    scene = Scene(ego=ego, neighbors=(nb,), frame=0)
    return field.build_gram(scene, FieldParams(include_ego_anchor=False, jitter=0.0))


def test_posterior_mean_interpolates_single_observation():
    sys = _single_obs_system()
    assert field.gp_posterior_mean(sys, np.array([[0.0, 0.0]]), "x")[0] == pytest.approx(
        2.0, rel=1e-12)


def test_posterior_mean_far_point():
    sys = _single_obs_system()
    # scalar Gram: exponent 1600/450 + 36/4.5
    expected = 2.0 * math.exp(-(40 ** 2) / 450 - (6 ** 2) / 4.5)
    got = field.gp_posterior_mean(sys, np.array([[40.0, 6.0]]), "x")[0]
    assert got == pytest.approx(expected, rel=1e-9)
    assert got == pytest.approx(1.92e-5, rel=1e-2)


def test_posterior_mean_mirror_symmetry():
    ego = make_state(vehicle_id=1)
    d = 12.0
    nb1 = make_state(vehicle_id=2, x=d, y=0, vx=ego.vx + 3.0)
    nb2 = make_state(vehicle_id=3, x=-d, y=0, vx=ego.vx - 3.0)
    scene = Scene(ego=ego, neighbors=(nb1, nb2), frame=0)
    sys = field.build_gram(scene, FieldParams(include_ego_anchor=False, jitter=0.0))
    mid = field.gp_posterior_mean(sys, np.array([[0.0, 0.0]]), "x")[0]
    assert mid == pytest.approx(0.0, abs=1e-12)


def test_posterior_cov():
    sys = _single_obs_system()
    var_at_obs = field.gp_posterior_cov(sys, np.array([[0.0, 0.0]]))[0, 0]
    assert abs(var_at_obs) < 1e-12
    var_far = field.gp_posterior_cov(sys, np.array([[1e5, 1e5]]))[0, 0]
    assert var_far == pytest.approx(PARAMS.A, rel=1e-9)

    ego = make_state(vehicle_id=1)
    scene = Scene(ego=ego, neighbors=(
        make_state(vehicle_id=2, x=10, y=0), make_state(vehicle_id=3, x=-10, y=0)), frame=0)
    sys2 = field.build_gram(scene, FieldParams(include_ego_anchor=False))
    var_mid = field.gp_posterior_cov(sys2, np.array([[0.0, 0.0]]))[0, 0]
    assert 0 <= var_mid < PARAMS.A


def test_posterior_interpolates_random_scenes():
    rng = np.random.default_rng(7)
    params = FieldParams(jitter=0.0)
    for _ in range(30):
        scene = random_scene(rng, min_sep=1.0)
        sys = field.build_gram(scene, params)
        for channel in ("x", "y"):
            mean = field.gp_posterior_mean(sys, sys.points, channel)
            target = sys.targets(channel)
            scale = max(1.0, np.abs(target).max())
            assert np.max(np.abs(mean - target)) / scale < 1e-9


# skew factor ----------------------------------------------------------------

def test_skew_factor_examples():
    assert field.skew_factor((5, 3), (1, 2), (0.0, 0.0), PARAMS) == pytest.approx(1.0, abs=0)
    # oracle: independent evaluation of the two-logistic product
    got = field.skew_factor((6.0, 0.0), (1.0, 0.0), (2.0, 0.0), PARAMS)
    assert got == pytest.approx(2.0 / (1.0 + math.exp(-6.0)), rel=1e-12)
    assert got == pytest.approx(1.99506, abs=1e-5)
    got = field.skew_factor((-4.0, 0.0), (1.0, 0.0), (2.0, 0.0), PARAMS)
    assert got == pytest.approx(2.0 / (1.0 + math.exp(6.0)), rel=1e-12)
    assert got == pytest.approx(0.004945, abs=1e-5)


@given(u=st.floats(min_value=-700, max_value=700, allow_nan=False))
@settings(max_examples=200)
def test_logistic_complement_identity(u):
    assert expit(u) + expit(-u) == pytest.approx(1.0, abs=1e-12)


def test_skew_factor_positive_and_extreme():
    # largest representable skew: |lambda * a * d| must stay below ~745
    # before the logistic underflows to exact float zero
    big = field.skew_factor((100.0, 0.0), (0.0, 0.0), (10.0, 0.0), PARAMS)
    tiny = field.skew_factor((-100.0, 0.0), (0.0, 0.0), (10.0, 0.0), PARAMS)
    assert 0 < tiny < 1 < big <= PARAMS.xi_x * PARAMS.xi_y / 2


# field assembly ---------------------------------------------------------------

def test_zero_acceleration_matches_plain_field():
    rng = np.random.default_rng(3)
    scene = scale_scene_accels(random_scene(rng, n_neighbors=4), 0.0)
    skewed = field.as_gvf(scene, ROI, PARAMS)
    plain = field.gvf(scene, ROI, PARAMS)
    assert np.max(np.abs(skewed.values - plain.values)) < 1e-12


def test_empty_scene_gives_zero_field():
    scene = Scene(ego=make_state(), neighbors=(), frame=0)
    tensor = field.as_gvf(scene, ROI, PARAMS)
    assert tensor.shape == (13, 17, 2)
    assert np.all(tensor.values == 0.0)


def test_single_accelerating_neighbor_asymmetry():
    ego = make_state(vehicle_id=1)
    nb = make_state(vehicle_id=2, x=10, y=0, vx=ego.vx + 4.0, ax=2.0)
    scene = Scene(ego=ego, neighbors=(nb,), frame=0)
    tensor = field.as_gvf(scene, ROI, FieldParams(include_ego_anchor=False))
    row, _ = ROI.ego_cell
    col_ahead = int(np.where(ROI.grid_x() == 15)[0][0])
    col_behind = int(np.where(ROI.grid_x() == 5)[0][0])
    ahead = abs(tensor.values[row, col_ahead, 0])
    behind = abs(tensor.values[row, col_behind, 0])
    assert ahead > behind
    # scalar Gram: the ratio is exactly the skew-factor ratio
    expected = ((2.0 / (1.0 + math.exp(-6.0))) / (2.0 / (1.0 + math.exp(6.0))))
    assert ahead / behind == pytest.approx(expected, rel=1e-9)


def test_skew_shrinks_with_acceleration_scale():
    rng = np.random.default_rng(11)
    for _ in range(5):
        base = random_scene(rng, n_neighbors=5)
        plain = field.gvf(base, ROI, PARAMS).values
        sups = []
        for scale in (1.0, 0.5, 0.1, 0.01, 0.0):
            skewed = field.as_gvf(scale_scene_accels(base, scale), ROI, PARAMS).values
            sups.append(np.max(np.abs(skewed - plain)))
        assert all(a >= b for a, b in zip(sups, sups[1:]))
        assert sups[-1] < 1e-12


def test_field_continuity_under_point_perturbation():
    rng = np.random.default_rng(19)
    scene = random_scene(rng, n_neighbors=4)
    base = field.as_gvf(scene, ROI, PARAMS).values
    eps = 1e-6
    nb = scene.neighbors[0]
    moved = make_state(vehicle_id=nb.vehicle_id, x=nb.x + eps, y=nb.y,
                       vx=nb.vx, vy=nb.vy, ax=nb.ax, ay=nb.ay)
    perturbed = Scene(ego=scene.ego, neighbors=(moved,) + scene.neighbors[1:], frame=0)
    diff = np.max(np.abs(field.as_gvf(perturbed, ROI, PARAMS).values - base))
    assert diff / eps < 1e3  # bounded sensitivity


def test_field_is_pure():
    rng = np.random.default_rng(23)
    scene = random_scene(rng, n_neighbors=3)
    a = field.as_gvf(scene, ROI, PARAMS).values
    b = field.as_gvf(scene, ROI, PARAMS).values
    assert np.array_equal(a, b)


# serialization ------------------------------------------------------------

def test_field_json_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = [field.as_gvf(random_scene(rng, n_neighbors=2, frame=i), ROI, PARAMS)
               for i in range(3)]
    path = tmp_path / "fields.jsonl"
    field.write_fields_jsonl(tensors, ROI, path)
    back = field.read_fields_jsonl(path)
    assert len(back) == 3
    for orig, restored in zip(tensors, back):
        assert restored.frame == orig.frame
        assert np.array_equal(restored.values, orig.values)

    obj = field.field_to_json(tensors[0], ROI)
    assert obj["grid"] == {"x0": -40.0, "y0": -6.0, "dx": 5.0, "dy": 1.0,
                           "nx": 17, "ny": 13}
    assert len(obj["dvx"]) == 13 * 17


def test_field_csv_export(tmp_path):
    rng = np.random.default_rng(6)
    tensor = field.as_gvf(random_scene(rng, n_neighbors=2), ROI, PARAMS)
    path = tmp_path / "fields.csv"
    field.write_fields_csv([tensor], ROI, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "frame,row,col,x,y,dvx,dvy"
    assert len(lines) == 1 + 13 * 17
