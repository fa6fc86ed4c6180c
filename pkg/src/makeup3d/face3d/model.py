"""Linear morphable face model and the procedural toy model used at desk scale."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..container import read_container, write_container

MODEL_KIND = "morphable-model"


class ContractError(ValueError):
    """An input violates the documented shape or value contract."""


@dataclass
class MorphableModel:
    """Mean shape/texture plus PCA bases, flattened as ``[x0, y0, z0, x1, ...]``.

    ``grid_shape`` and ``param_coords`` are optional bookkeeping for
    procedurally built models: normalized (s, t) surface coordinates per
    vertex, used to paint semantic regions.
    """

    mean_shape: np.ndarray
    mean_texture: np.ndarray
    basis_id: np.ndarray
    basis_exp: np.ndarray
    basis_tex: np.ndarray
    triangles: np.ndarray
    param_coords: np.ndarray | None = None

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64)
        self.mean_texture = np.asarray(self.mean_texture, dtype=np.float64)
        self.basis_id = np.asarray(self.basis_id, dtype=np.float64)
        self.basis_exp = np.asarray(self.basis_exp, dtype=np.float64)
        self.basis_tex = np.asarray(self.basis_tex, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        n = self.mean_shape.shape[0]
        if n % 3 or n // 3 < 4:
            raise ContractError(f"mean_shape must have length 3Q with Q >= 4, got {n}")
        for name in ("mean_texture",):
            if getattr(self, name).shape != (n,):
                raise ContractError(f"{name} must have shape ({n},)")
        for name in ("basis_id", "basis_exp", "basis_tex"):
            b = getattr(self, name)
            if b.ndim != 2 or b.shape[0] != n:
                raise ContractError(f"{name} must have shape ({n}, k), got {b.shape}")
            if not np.all(np.isfinite(b)):
                raise ContractError(f"{name} has non-finite entries")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ContractError("triangles must have shape (F, 3)")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n // 3):
            raise ContractError("triangle index out of range")

    @property
    def n_vertices(self):
        return self.mean_shape.shape[0] // 3

    @property
    def n_id(self):
        return self.basis_id.shape[1]

    @property
    def n_exp(self):
        return self.basis_exp.shape[1]

    @property
    def n_tex(self):
        return self.basis_tex.shape[1]

    def zero_coefficients(self):
        return FaceCoefficients(np.zeros(self.n_id), np.zeros(self.n_exp), np.zeros(self.n_tex))

    def save(self, path):
        tensors = {
            "mean_shape": self.mean_shape,
            "mean_texture": self.mean_texture,
            "basis_id": self.basis_id,
            "basis_exp": self.basis_exp,
            "basis_tex": self.basis_tex,
            "triangles": self.triangles,
        }
        if self.param_coords is not None:
            tensors["param_coords"] = self.param_coords
        return write_container(path, tensors, kind=MODEL_KIND,
                               metadata={"n_vertices": self.n_vertices})

    @classmethod
    def load(cls, path):
        t, _ = read_container(path, kind=MODEL_KIND)
        return cls(**t)


@dataclass
class FaceCoefficients:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray
    alpha_tex: np.ndarray

    def __post_init__(self):
        for name in ("alpha_id", "alpha_exp", "alpha_tex"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("alpha_id", "alpha_exp", "alpha_tex")}

    @classmethod
    def from_dict(cls, d):
        return cls(d["alpha_id"], d["alpha_exp"], d["alpha_tex"])


@dataclass
class FacePose:
    """Weak-perspective camera: scale, Euler angles in degrees, 2D shift in pixels."""

    scale_f: float = 1.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    translation_2d: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.translation_2d = np.asarray(self.translation_2d, dtype=np.float64).reshape(2)
        if not self.scale_f > 0:
            raise ContractError(f"scale_f must be positive, got {self.scale_f}")
        for name in ("pitch", "yaw", "roll"):
            a = float(getattr(self, name))
            if not -180.0 < a <= 180.0:
                raise ContractError(f"{name}={a} outside (-180, 180]")
            setattr(self, name, a)

    def to_dict(self):
        return {"scale_f": float(self.scale_f), "pitch": self.pitch, "yaw": self.yaw,
                "roll": self.roll, "translation_2d": self.translation_2d.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scale_f"], d["pitch"], d["yaw"], d["roll"], d["translation_2d"])


def build_face(model, coeff):
    """Return ``(shape, texture)`` as flat length-3Q arrays; texture is clamped to [0, 1]."""
    shape, texture = build_face_unclamped(model, coeff)
    return shape, np.clip(texture, 0.0, 1.0)


def build_face_unclamped(model, coeff):
    if (coeff.alpha_id.shape[0] != model.n_id or coeff.alpha_exp.shape[0] != model.n_exp
            or coeff.alpha_tex.shape[0] != model.n_tex):
        raise ContractError(
            f"coefficient dims ({coeff.alpha_id.shape[0]}, {coeff.alpha_exp.shape[0]}, "
            f"{coeff.alpha_tex.shape[0]}) do not match model ({model.n_id}, {model.n_exp}, {model.n_tex})"
        )
    shape = model.mean_shape + model.basis_id @ coeff.alpha_id + model.basis_exp @ coeff.alpha_exp
    texture = model.mean_texture + model.basis_tex @ coeff.alpha_tex
    return shape, texture


def symmetric_grid_triangles(n_rows, n_cols):
    """Triangulate an ``n_rows x n_cols`` vertex grid so the mesh is mirror-symmetric.

    Quads left of the centre column are split along one diagonal, quads to
    the right along the mirrored diagonal. ``n_cols`` must be odd.
    """
    if n_cols % 2 == 0:
        raise ValueError("n_cols must be odd for a mirror-symmetric triangulation")
    half = (n_cols - 1) // 2
    tris = []
    for i in range(n_rows - 1):
        for j in range(n_cols - 1):
            a = i * n_cols + j
            b = a + 1
            c = a + n_cols
            d = c + 1
            if j < half:
                tris += [(a, c, d), (a, d, b)]
            else:
                tris += [(a, c, b), (b, c, d)]
    return np.array(tris, dtype=np.int64)


def _smooth_fields(s, t, n, rng):
    """``n`` smooth random functions of the normalized surface coordinates."""
    out = np.empty((s.size, n))
    for k in range(n):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        out[:, k] = np.cos(fx * np.pi * s / 2 + px) * np.cos(fy * np.pi * t / 2 + py)
    return out


def toy_model(n_rows=33, n_cols=33, n_id=10, n_exp=5, n_tex=10, nose_height=0.22, seed=0):
    """Procedural half-ellipsoid face with a nose bump.

    The mean shape is exactly mirror-symmetric in x and is a height field
    over the (x, y) plane, so a frontal view has no self-occlusion.
    """
    rng = np.random.default_rng(seed)
    theta_max, phi_max = np.deg2rad(75.0), np.deg2rad(60.0)
    s = np.linspace(-1.0, 1.0, n_cols)
    t = np.linspace(1.0, -1.0, n_rows)  # row 0 is the top of the face
    S, T = np.meshgrid(s, t)
    S, T = S.ravel(), T.ravel()
    theta, phi = S * theta_max, T * phi_max
    a, b, c = 0.8, 1.0, 0.7
    x = a * np.cos(phi) * np.sin(theta)
    y = b * np.sin(phi)
    z = c * np.cos(phi) * np.cos(theta)
    z = z + nose_height * np.exp(-(x ** 2 / (2 * 0.09 ** 2) + (y + 0.05) ** 2 / (2 * 0.25 ** 2)))
    mean_shape = np.stack([x, y, z], axis=1).ravel()

    normal = np.stack([x / a ** 2, y / b ** 2, (c * np.cos(phi) * np.cos(theta)) / c ** 2], axis=1)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    q = S.size

    fields = _smooth_fields(S, T, n_id, rng)
    basis_id = np.empty((3 * q, n_id))
    for k in range(n_id):
        disp = 0.025 * fields[:, k:k + 1] * normal
        # widen/narrow and lengthen the face too, not only bulge it
        disp[:, 0] += 0.02 * rng.normal() * x
        disp[:, 1] += 0.02 * rng.normal() * y
        basis_id[:, k] = disp.ravel()

    basis_exp = np.empty((3 * q, n_exp))
    lower = np.clip(-(T + 0.2), 0.0, None)  # active below the nose
    for k in range(n_exp):
        disp = np.zeros((q, 3))
        f = _smooth_fields(S, T, 1, rng)[:, 0]
        disp[:, 1] = -0.03 * lower * (1.0 + 0.3 * f)
        disp[:, 0] = 0.01 * lower * S * rng.normal()
        disp[:, 2] = 0.01 * lower * f
        basis_exp[:, k] = disp.ravel()

    base = np.array([0.80, 0.62, 0.52])
    shade = 0.04 * np.cos(np.pi * S / 2) * np.cos(np.pi * T / 2)
    mean_texture = (base[None, :] + shade[:, None]).ravel()
    tex_fields = _smooth_fields(S, T, n_tex, rng)
    basis_tex = np.empty((3 * q, n_tex))
    for k in range(n_tex):
        tint = rng.normal(size=3)
        tint = 0.03 * tint / np.linalg.norm(tint)
        basis_tex[:, k] = (tex_fields[:, k:k + 1] * tint[None, :] + 0.02 * tint[None, :]).ravel()

    return MorphableModel(
        mean_shape=mean_shape,
        mean_texture=mean_texture,
        basis_id=basis_id,
        basis_exp=basis_exp,
        basis_tex=basis_tex,
        triangles=symmetric_grid_triangles(n_rows, n_cols),
        param_coords=np.stack([S, T], axis=1),
    )
