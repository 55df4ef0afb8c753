import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from partgen.geometry import (
    IDENTITY_6D,
    BoundingBox,
    DegenerateRotationError,
    Part,
    axis_angle_matrix,
    cuboid_contains,
    face_normals,
    matrix_to_rot6d,
    rot6d_to_matrix,
    sample_union_surface,
    union_contains,
    union_volume_mc,
)

finite = st.floats(-10, 10, allow_nan=False)


def test_identity_decodes_to_identity():
    assert np.array_equal(rot6d_to_matrix(IDENTITY_6D), np.eye(3))


def test_scaled_columns_still_identity():
    assert np.allclose(rot6d_to_matrix((2, 0, 0, 0, 3, 0)), np.eye(3), atol=0)


def test_quarter_turn_matches_matrix_exponential():
    K = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], float) * (math.pi / 2)
    assert np.allclose(rot6d_to_matrix((0, 1, 0, -1, 0, 0)), expm(K), atol=1e-12)


@pytest.mark.parametrize("r", [(0, 0, 0, 0, 1, 0), (1, 0, 0, 2, 0, 0), (1, 0, 0, 0, 0, 0), (np.nan, 0, 0, 0, 1, 0)])
def test_degenerate_rotation_raises(r):
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(r)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6))
def test_decoded_matrix_is_a_rotation(r):
    try:
        R = rot6d_to_matrix(r)
    except DegenerateRotationError:
        return
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-9)


def test_roundtrip_through_6d():
    R = Rotation.random(50, random_state=3).as_matrix()
    assert np.allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


def test_axis_angle_matches_scipy():
    for axis, ang in [((0, 1, 0), 0.3), ((1, 2, 3), -2.0)]:
        a = np.asarray(axis, float) / np.linalg.norm(axis)
        assert np.allclose(axis_angle_matrix(axis, ang), Rotation.from_rotvec(a * ang).as_matrix(), atol=1e-12)


def test_box_rejects_bad_sizes():
    with pytest.raises(ValueError):
        Part(0, (1, 0, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        Part(0, (1, 1, 1), (0, np.inf, 0))


unit = Part(0, (1, 1, 1), (0, 0, 0))


def test_center_and_face_are_inside():
    assert cuboid_contains(unit, (0, 0, 0))
    assert cuboid_contains(unit, (0.5, 0, 0))
    assert not cuboid_contains(unit, (0.5 + 1e-12, 0, 0))


def test_rotated_cube_against_rasterization():
    R = axis_angle_matrix((0, 0, 1), math.pi / 4)
    cube = Part(0, (1, 1, 1), (0, 0, 0), matrix_to_rot6d(R))
    # independent raster of the z = 0 slice: half-space tests against scipy-built face normals
    n = 256
    c = (np.arange(n) + 0.5) / n * 2 - 1
    X, Y = np.meshgrid(c, c, indexing="ij")
    axes = Rotation.from_euler("z", 45, degrees=True).as_matrix()
    pts = np.stack([X, Y, np.zeros_like(X)], -1)
    inside = np.all(np.abs(pts @ axes) <= 0.5, axis=-1)
    q = np.array([0.6, 0.6, 0.0])
    i, j = (np.floor((q[:2] + 1) / 2 * n)).astype(int)
    assert cuboid_contains(cube, q) == bool(inside[i, j])
    # and the whole slice agrees away from the boundary
    grid_ans = cuboid_contains(cube, pts.reshape(-1, 3)).reshape(n, n)
    dist = np.abs(np.abs(pts @ axes)[..., :2].max(-1) - 0.5)
    assert np.array_equal(grid_ans[dist > 1e-9], inside[dist > 1e-9])


def test_union_semantics():
    a = Part(0, (1, 1, 1), (0, 0, 0))
    b = Part(1, (1, 1, 1), (3, 0, 0))
    c = Part(1, (1, 1, 1), (0.5, 0, 0))
    assert union_contains([a, b], (3, 0.2, 0))
    assert not union_contains([a, b], (1.5, 0, 0))
    assert union_contains([a, c], (0.25, 0, 0))
    with pytest.raises(ValueError):
        union_contains([], (0, 0, 0))


def test_union_volume_matches_inclusion_exclusion(rng):
    a = Part(0, (1, 1, 1), (0, 0, 0))
    b = Part(0, (1, 2, 1), (0.5, 0.5, 0))
    exact = 1 + 2 - 0.5 * 1 * 1
    n = 200_000
    est = union_volume_mc([a, b], n, rng)
    hull = 1.5 * 2 * 1
    p = exact / hull
    assert abs(est - exact) < 4 * hull * math.sqrt(p * (1 - p) / n)


def test_unit_cube_face_counts_are_uniform(rng):
    n = 6000
    _, _, faces = sample_union_surface([unit], n, rng, return_faces=True)
    counts = np.bincount(faces, minlength=6)
    sigma = math.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - 1000) < 5 * sigma), counts


def test_samples_lie_on_emitting_face(rng):
    parts = [Part(0, (1, 0.2, 0.7), (0, 0, 0), matrix_to_rot6d(axis_angle_matrix((1, 1, 0), 0.4))),
             Part(1, (0.3, 1.5, 0.3), (0.2, 0.5, 0.1))]
    x, pi, fi = sample_union_surface(parts, 3000, rng, return_faces=True)
    for q, p in enumerate(parts):
        sel = pi == q
        local = p.to_local(x[sel])
        gap = np.max(np.abs(local) - np.asarray(p.size) / 2, axis=1)
        assert np.all(np.abs(gap) <= 1e-9)
    # no sample is strictly inside the other cuboid
    for q, p in enumerate(parts):
        other = parts[1 - q]
        local = other.to_local(x[pi == q])
        assert not np.any(np.all(np.abs(local) < np.asarray(other.size) / 2 - 1e-6, axis=1))


def test_outward_normals(rng):
    x, pi, fi = sample_union_surface([unit], 500, rng, return_faces=True)
    nrm = face_normals([unit], pi, fi)
    assert np.all(np.abs(np.sum(nrm * x, axis=1) - 0.5) < 1e-12)


def test_coincident_cubes_match_single_cube():
    a = sample_union_surface([unit], 20_000, np.random.default_rng(0))
    b = sample_union_surface([unit, unit], 20_000, np.random.default_rng(1))
    # same per-face occupation and same marginal moments
    fa = np.argmax(np.abs(a), axis=1) * 2 + (a[np.arange(len(a)), np.argmax(np.abs(a), axis=1)] > 0)
    fb = np.argmax(np.abs(b), axis=1) * 2 + (b[np.arange(len(b)), np.argmax(np.abs(b), axis=1)] > 0)
    ca, cb = np.bincount(fa, minlength=6) / len(a), np.bincount(fb, minlength=6) / len(b)
    assert np.all(np.abs(ca - cb) < 5 * math.sqrt(2 * (1 / 6) * (5 / 6) / 20_000))
    assert np.allclose(a.mean(0), b.mean(0), atol=0.02)


def test_hidden_surface_raises():
    outer = Part(0, (1, 1, 1), (0, 0, 0))
    inner = [Part(0, (0.99, 0.99, 0.99), (0, 0, 0))] * 2000
    with pytest.raises(RuntimeError, match="acceptance"):
        sample_union_surface([outer] + inner, 100, np.random.default_rng(0))


def test_empty_union_surface_raises(rng):
    with pytest.raises(ValueError):
        sample_union_surface([], 10, rng)


def test_bounding_box_corners():
    b = BoundingBox((2, 4, 6), (1, 1, 1))
    c = b.corners()
    assert np.allclose(c.min(0), (0, -1, -2)) and np.allclose(c.max(0), (2, 3, 4))
