"""Continuous 6D rotation representation and small rotation utilities.

A rotation matrix maps to 6 scalars by concatenating its first two columns;
the inverse applies Gram-Schmidt to recover an orthonormal frame. The 6D
form is continuous in the matrix, which is why it is used for pose vectors.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRotationError, InvalidRotationError

ORTHO_TOL = 1e-6
DEGENERATE_TOL = 1e-8


def _as_batch(x: np.ndarray, tail: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tail:
        return x[None], True
    if x.ndim == len(tail) + 1 and x.shape[1:] == tail:
        return x, False
    raise InvalidRotationError(f"expected shape {tail} or (N,)+{tail}, got {x.shape}")


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    """Raise InvalidRotationError unless R is orthonormal with det +1."""
    batch, _ = _as_batch(R, (3, 3))
    eye = np.eye(3)
    gram_err = np.abs(batch.transpose(0, 2, 1) @ batch - eye).max(axis=(1, 2))
    det_err = np.abs(np.linalg.det(batch) - 1.0)
    bad = (gram_err > tol) | (det_err > tol)
    if bad.any():
        i = int(np.argmax(bad))
        raise InvalidRotationError(
            f"not a rotation matrix: |R^T R - I| = {gram_err[i]:.3e}, "
            f"|det - 1| = {det_err[i]:.3e} (tolerance {tol:g})"
        )


def rot6d_from_matrix(R: np.ndarray) -> np.ndarray:
    """First two columns of R, concatenated: [R[:,0]; R[:,1]]."""
    batch, single = _as_batch(R, (3, 3))
    check_rotation(batch)
    v = np.concatenate([batch[:, :, 0], batch[:, :, 1]], axis=1)
    return v[0] if single else v


def matrix_from_rot6d(v: np.ndarray, tol: float = DEGENERATE_TOL) -> np.ndarray:
    """Gram-Schmidt the two embedded columns back into a rotation matrix.

    Scale-invariant: any positive rescaling of either column gives the same
    output. Raises DegenerateRotationError when the first column is ~zero or
    the second is ~parallel to the first.
    """
    batch, single = _as_batch(v, (6,))
    a, b_raw = batch[:, :3], batch[:, 3:]
    a_norm = np.linalg.norm(a, axis=1)
    if (a_norm < tol).any():
        raise DegenerateRotationError("first 6d column has ~zero norm")
    a = a / a_norm[:, None]
    b = b_raw - np.sum(a * b_raw, axis=1, keepdims=True) * a
    b_norm = np.linalg.norm(b, axis=1)
    if (b_norm < tol).any():
        raise DegenerateRotationError("second 6d column ~parallel to the first")
    b = b / b_norm[:, None]
    c = np.cross(a, b)
    R = np.stack([a, b, c], axis=2)
    return R[0] if single else R


def rotation_about_axis(axis: np.ndarray, angle: np.ndarray | float) -> np.ndarray:
    """Rodrigues formula; axis (3,), angle scalar or (N,). Returns (..,3,3)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    ang = np.atleast_1d(np.asarray(angle, dtype=np.float64))
    kx, ky, kz = axis
    K = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    eye = np.eye(3)
    s = np.sin(ang)[:, None, None]
    c = np.cos(ang)[:, None, None]
    R = eye + s * K + (1.0 - c) * (K @ K)
    return R if np.ndim(angle) else R[0]


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Rotation angle of Ra^T Rb in radians; accepts matching batches."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    rel = Ra.swapaxes(-1, -2) @ Rb
    tr = np.trace(rel, axis1=-2, axis2=-1)
    cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cos)
