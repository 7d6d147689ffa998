import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomsplat.core import (
    AtomCloud,
    Axis,
    GaussianAtom,
    InvalidConfigurationError,
    InvalidInputError,
    NormalizationMap,
    ProjectionStack,
    TiltGeometry,
    VoxelVolume,
    rotate_to_beam,
    rotation_matrix,
)
from oracles import AXIS_VECTORS, rodrigues

finite = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-90, 90, allow_nan=False)


def test_rotation_identity_at_zero():
    np.testing.assert_allclose(rotate_to_beam((1, 0, 0), 0.0, Axis.Y), (1, 0, 0), atol=1e-15)


def test_rotation_quarter_turn_convention():
    # active right-handed rotation about +y carries +x onto -z
    np.testing.assert_allclose(rotate_to_beam((1, 0, 0), 90.0, Axis.Y), (0, 0, -1), atol=1e-15)


@pytest.mark.parametrize("axis", [Axis.X, Axis.Y, Axis.Z])
def test_rotation_matches_rodrigues(axis):
    p = np.array([0.3, 0.4, 0.5])
    expect = rodrigues(AXIS_VECTORS[int(axis)], 37.0) @ p
    np.testing.assert_allclose(rotate_to_beam(p, 37.0, axis), expect, rtol=1e-14, atol=1e-15)


@given(st.tuples(finite, finite, finite), angles, st.sampled_from(list(Axis)))
def test_rotation_norm_preserving(p, ang, axis):
    out = rotate_to_beam(p, ang, axis)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(p), rel=1e-12, abs=1e-12)


@given(angles)
def test_pairwise_distances_invariant(ang):
    pts = np.random.default_rng(0).normal(size=(12, 3))
    rot = rotate_to_beam(pts, ang)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(rot[:, None] - rot[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-12)


def test_rotation_rejects_out_of_range_angle():
    with pytest.raises(InvalidInputError):
        rotate_to_beam((1, 0, 0), 91.0)


def test_rotation_matrix_is_orthonormal():
    R = rotation_matrix(23.0, "x")
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_gaussian_atom_invariants():
    GaussianAtom((0, 0, 0), 0.4, 0.0)
    with pytest.raises(InvalidInputError):
        GaussianAtom((0, 0, 0), 0.0, 1.0)
    with pytest.raises(InvalidInputError):
        GaussianAtom((0, 0, 0), 0.4, -1.0)
    with pytest.raises(InvalidInputError):
        GaussianAtom((0, math.nan, 0), 0.4, 1.0)


def test_cloud_accumulators_track_length():
    c = AtomCloud(np.zeros((3, 3)), np.ones(3), np.ones(3))
    c.accumulate_gradients([1.0, 2.0, 3.0])
    c.accumulate_gradients([3.0, 2.0, 1.0])
    np.testing.assert_allclose(c.grad_accum, [2.0, 2.0, 2.0])
    assert list(c.grad_count) == [2, 2, 2]
    sub = c.subset([0, 2])
    assert len(sub) == len(sub.grad_accum) == len(sub.grad_count) == 2
    with pytest.raises(InvalidInputError):
        c.accumulate_gradients([1.0])


def test_geometry_invariants():
    with pytest.raises(InvalidConfigurationError):
        TiltGeometry((0.0, 0.0), 4, 4)
    with pytest.raises(InvalidConfigurationError):
        TiltGeometry((-91.0,), 4, 4)
    with pytest.raises(InvalidConfigurationError):
        TiltGeometry((0.0,), 4, 4, pixel_pitch=0.0)


def test_stack_shape_and_finiteness():
    g = TiltGeometry((0.0, 10.0), 3, 4)
    with pytest.raises(InvalidInputError):
        ProjectionStack(g, np.zeros((2, 4, 3)))
    bad = np.zeros((2, 3, 4))
    bad[0, 0, 0] = np.inf
    with pytest.raises(InvalidInputError):
        ProjectionStack(g, bad)


def test_volume_centered_origin():
    v = VoxelVolume.centered(5, 0.5)
    assert v.origin == (-1.0, -1.0, -1.0)
    x, y, z = v.axes()
    assert x[2] == 0.0 and z[-1] == 1.0


def test_normalize_stack_maps_max_to_256():
    g = TiltGeometry((0.0,), 8, 8, 0.25)
    data = np.zeros((1, 8, 8))
    data[0, 3, 3] = 12.5
    s = ProjectionStack(g, data)
    nmap = NormalizationMap.for_stack(s)
    assert nmap.normalize(s).data.max() == pytest.approx(256.0)


def test_normalize_cube_to_unit():
    # an 80 angstrom cube at the origin lands on [-0.5, 0.5]
    nmap = NormalizationMap(1.0, 80.0)
    corners = np.array([[40.0, -40.0, 40.0], [-40.0, 40.0, -40.0]])
    n = nmap.normalize_positions(corners)
    assert np.abs(n).max() == pytest.approx(0.5)


def test_degenerate_map_rejected():
    with pytest.raises(InvalidConfigurationError):
        NormalizationMap(0.0, 1.0)
    with pytest.raises(InvalidConfigurationError):
        NormalizationMap(1.0, 0.0)


@given(st.integers(0, 10_000))
def test_normalize_round_trip(seed):
    r = np.random.default_rng(seed)
    c = AtomCloud(r.uniform(-10, 10, (7, 3)), r.uniform(0.2, 1, 7), r.uniform(0, 2, 7))
    nmap = NormalizationMap(r.uniform(0.1, 100), r.uniform(1, 100), tuple(r.uniform(-3, 3, 3)))
    back = nmap.denormalize(nmap.normalize(c))
    np.testing.assert_allclose(back.mu, c.mu, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(back.sigma, c.sigma, rtol=1e-10)
    np.testing.assert_allclose(back.q, c.q, rtol=1e-10)
    g = TiltGeometry((-3.0, 5.0), 4, 5, 0.3)
    s = ProjectionStack(g, r.uniform(0, 3, (2, 4, 5)))
    sb = nmap.denormalize(nmap.normalize(s))
    np.testing.assert_allclose(sb.data, s.data, rtol=1e-10)
    assert sb.geometry.pixel_pitch == pytest.approx(0.3, rel=1e-12)


def test_normalize_twice_is_an_error():
    nmap = NormalizationMap(1.0, 10.0)
    c = nmap.normalize(AtomCloud(np.zeros((1, 3)), [1.0], [1.0]))
    with pytest.raises(InvalidInputError):
        nmap.normalize(c)
