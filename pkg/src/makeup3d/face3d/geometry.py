"""Rotations, weak-perspective projection and cylindrical UV unwrapping.

Rotation convention: ``R = Rz(roll) @ Rx(pitch) @ Ry(yaw)`` acting on column
vectors, angles in degrees. Positive yaw turns the +z axis toward +x, so
``R(yaw=90) @ (0, 0, 1) == (1, 0, 0)``.

Image-plane coordinates are ``(x, y)`` with x to the right and y up; the
viewer sits on the +z side, so larger rotated z is closer to the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ContractError


def _rx(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def rotation_matrix(pitch=0.0, yaw=0.0, roll=0.0):
    return _rz(roll) @ _rx(pitch) @ _ry(yaw)


def pose_rotation(pose):
    return rotation_matrix(pose.pitch, pose.yaw, pose.roll)


def euler_from_rotation(rotation, atol=1e-6):
    """Invert :func:`rotation_matrix`; returns ``(pitch, yaw, roll)`` in degrees."""
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ContractError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), atol=atol, rtol=0) or np.linalg.det(r) < 0:
        raise ContractError("input is not a rotation matrix (orthonormal, det +1)")
    # third row of Rz.Rx.Ry is (-cos(p) sin(y), sin(p), cos(p) cos(y))
    pitch = np.degrees(np.arcsin(np.clip(r[2, 1], -1.0, 1.0)))
    yaw = np.degrees(np.arctan2(-r[2, 0], r[2, 2]))
    roll = np.degrees(np.arctan2(-r[0, 1], r[1, 1]))
    return float(pitch), float(yaw), float(roll)


def yaw_from_rotation(rotation):
    return euler_from_rotation(rotation)[1]


def as_vertices(shape):
    shape = np.asarray(shape, dtype=np.float64)
    if shape.ndim == 1:
        if shape.size % 3:
            raise ContractError(f"flat shape length {shape.size} is not a multiple of 3")
        return shape.reshape(-1, 3)
    if shape.ndim != 2 or shape.shape[1] != 3:
        raise ContractError(f"shape must be (3Q,) or (Q, 3), got {shape.shape}")
    return shape


def rotate(shape, pose):
    return as_vertices(shape) @ pose_rotation(pose).T


def project(shape, pose):
    """Weak-perspective projection ``f * Pr * R * S + t`` -> (Q, 2) image positions."""
    rotated = rotate(shape, pose)
    return pose.scale_f * rotated[:, :2] + pose.translation_2d[None, :]


@dataclass(frozen=True)
class UVUnwrapConfig:
    """Constants for ``v = alpha1*atan2(x, z) + beta1``, ``u = alpha2*y + beta2``.

    ``u`` indexes texture rows and ``v`` texture columns. ``beta1`` is kept at
    ``resolution / 2`` so the column flip of the texture is exactly the
    bilateral mirror ``x -> -x``.
    """

    alpha1: float
    alpha2: float
    beta1: float
    beta2: float
    resolution: int = 256

    @classmethod
    def fit(cls, shape, resolution=256, margin=0.06):
        """Scale the unwrapped ``shape`` to fill ``[0, resolution)^2`` minus a margin."""
        v = as_vertices(shape)
        front = v[:, 2] > 0
        ang = np.arctan2(v[front, 0], v[front, 2])
        ys = v[front, 1]
        half = resolution / 2.0
        alpha1 = half * (1.0 - 2 * margin) / np.max(np.abs(ang))
        # y up maps to row 0 at the top
        alpha2 = -resolution * (1.0 - 2 * margin) / (ys.max() - ys.min())
        beta2 = resolution * margin - alpha2 * ys.max()
        return cls(float(alpha1), float(alpha2), half, float(beta2), int(resolution))


def unwrap_uv(shape, config):
    """Cylindrical unwrap to (Q, 2) ``(u, v)``; back-hemisphere vertices get NaN."""
    v = as_vertices(shape)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    bad = np.flatnonzero((x == 0) & (z == 0))
    if bad.size:
        raise ContractError(f"vertex {int(bad[0])} has x = z = 0; cylindrical angle undefined")
    uv = np.empty((v.shape[0], 2))
    uv[:, 0] = config.alpha2 * y + config.beta2
    uv[:, 1] = config.alpha1 * np.arctan2(x, z) + config.beta1
    uv[z <= 0] = np.nan
    return uv


def vertex_normals(shape, triangles):
    """Area-weighted unit vertex normals, oriented so the front of a face points to +z."""
    v = as_vertices(shape)
    tri = np.asarray(triangles)
    e1 = v[tri[:, 1]] - v[tri[:, 0]]
    e2 = v[tri[:, 2]] - v[tri[:, 0]]
    face_n = np.cross(e1, e2)
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, tri[:, k], face_n)
    # winding is not part of the mesh contract; orient by the mean direction
    if np.sum(n[:, 2]) < 0:
        n = -n
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)
