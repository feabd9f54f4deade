import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meco.errors import DegenerateRotationError, InvalidRotationError
from meco.rotations import (
    geodesic_angle,
    matrix_from_rot6d,
    rot6d_from_matrix,
    rotation_about_axis,
)


def test_identity_maps_to_unit_columns():
    assert np.allclose(rot6d_from_matrix(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_quarter_turn_columns():
    # rotation whose first two columns are (0,1,0) and (-1,0,0)
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(rot6d_from_matrix(R), [0, 1, 0, -1, 0, 0])


def test_rot6d_rejects_non_rotation():
    with pytest.raises(InvalidRotationError):
        rot6d_from_matrix(np.eye(3) * 2.0)
    with pytest.raises(InvalidRotationError):
        rot6d_from_matrix(np.diag([1.0, 1.0, -1.0]))  # det -1


def test_unit_columns_map_to_identity():
    assert np.allclose(matrix_from_rot6d(np.array([1, 0, 0, 0, 1, 0.0])), np.eye(3))


def test_gram_schmidt_is_scale_invariant():
    assert np.allclose(matrix_from_rot6d(np.array([2, 0, 0, 0, 3, 0.0])), np.eye(3))


@pytest.mark.parametrize(
    "v",
    [
        np.zeros(6),
        np.array([1.0, 0, 0, 2.0, 0, 0]),  # parallel columns
        np.array([1e-12, 0, 0, 0, 1, 0]),
    ],
)
def test_degenerate_inputs_raise(v):
    with pytest.raises(DegenerateRotationError):
        matrix_from_rot6d(v)


def test_round_trip_on_random_rotations(rng):
    axes = rng.normal(size=(500, 3))
    angles = rng.uniform(-np.pi, np.pi, size=500)
    for axis, ang in zip(axes, angles):
        R = rotation_about_axis(axis, ang)
        back = matrix_from_rot6d(rot6d_from_matrix(R))
        assert np.abs(back - R).max() < 1e-6


def test_output_always_orthonormal_10k_trials(rng):
    # brute-force orthonormality check over 10^4 random non-degenerate inputs
    v = rng.normal(size=(10_000, 6))
    R = matrix_from_rot6d(v)
    gram = np.einsum("nij,nik->njk", R, R)
    assert np.abs(gram - np.eye(3)).max() < 1e-6
    assert np.abs(np.linalg.det(R) - 1.0).max() < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_gram_schmidt_property(vals):
    v = np.asarray(vals)
    a, b = v[:3], v[3:]
    a_norm = np.linalg.norm(a)
    if a_norm < 1e-6:
        return
    res = b - (a / a_norm) @ b * (a / a_norm)
    if np.linalg.norm(res) < 1e-6:
        return
    R = matrix_from_rot6d(v)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(R) - 1.0) < 1e-6


def test_geodesic_angle_matches_construction(rng):
    axis = rng.normal(size=3)
    for ang in (0.0, 0.3, 1.2, np.pi - 0.01):
        Ra = rotation_about_axis(axis, 0.0)
        Rb = rotation_about_axis(axis, ang)
        assert abs(geodesic_angle(Ra, Rb) - ang) < 1e-9
