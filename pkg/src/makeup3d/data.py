"""Synthetic toy-face datasets, manifests, and cached per-record face artifacts.

Directory layout written by :func:`generate_toy_dataset`::

    model.m3d                  toy morphable model
    manifest.json              schema_version, settings, records
    images/<name>.png          8-bit RGB render
    coefficients/<name>.json   coefficients, pose, identity, makeup, occluders
    masks/<name>.png           uint8 labels: 0 background, 1 lips, 2 eye, 3 skin
    cache/                     UV artifacts created by :func:`load_dataset`

Makeup is painted in UV space, so the exact makeup of every reference face
is known from its coefficient file.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .face3d import (
    FaceCoefficients,
    FacePose,
    MorphableModel,
    RenderPlan,
    UVLayout,
    UVTexture,
    UVUnwrapConfig,
    VisibilityMap,
    build_face,
    occlusion_bits,
    project,
    sample_uv_texture,
    toy_model,
    unwrap_uv,
    visibility_and_bits,
)
from .face3d import io as fio
from .face3d.raster import texel_image_positions
from .losses import RegionMasks

SCHEMA_VERSION = 1
SPLITS = ("source", "reference", "target")


class DatasetError(ValueError):
    def __init__(self, record, reason):
        super().__init__(f"record {record!r}: {reason}")
        self.record = record
        self.reason = reason


# --- toy geometry and regions ---------------------------------------------------

def region_labels(s, t):
    """Label normalized surface coordinates: 1 lips, 2 eye shadow, 3 skin, 0 other.

    Eye shadow is a band of ellipses above each eye; the convention is arbitrary.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    lips = (s / 0.26) ** 2 + ((t + 0.5) / 0.09) ** 2 <= 1.0
    eye = ((np.abs(s) - 0.32) / 0.2) ** 2 + ((t - 0.28) / 0.1) ** 2 <= 1.0
    face = (np.abs(s) <= 0.9) & (t >= -0.85) & (t <= 0.8)
    out = np.zeros(s.shape, dtype=np.uint8)
    out[face] = 3
    out[eye & face] = 2
    out[lips & face] = 1
    return out


@dataclass
class FaceGeometry:
    """The model plus its shared UV layout at one resolution."""

    model: MorphableModel
    resolution: int

    def __post_init__(self):
        self.config = UVUnwrapConfig.fit(self.model.mean_shape, self.resolution)
        self.uv = unwrap_uv(self.model.mean_shape, self.config)
        self.triangles = self.model.triangles
        self.layout = UVLayout(self.uv, self.triangles, self.resolution)
        st = self.layout.interpolate(self.model.param_coords)
        self.texel_st = self.layout.scatter(st)
        labels = self.layout.scatter(region_labels(st[:, 0], st[:, 1]))
        self.uv_labels = np.where(self.layout.coverage, labels, 0).astype(np.uint8)

    @property
    def coverage(self):
        return self.layout.coverage

    def texture_from_vertices(self, per_vertex_rgb):
        rgb = np.asarray(per_vertex_rgb, dtype=np.float64).reshape(-1, 3)
        return UVTexture(self.layout.scatter(np.clip(self.layout.interpolate(rgb), 0, 1)),
                         self.coverage.copy())

    def plan(self, shape, pose, image_size):
        return RenderPlan(shape, pose, self.triangles, self.uv, self.resolution, (image_size, image_size))


# --- spec -----------------------------------------------------------------------

DEFAULT_LIPS = [[0.75, 0.12, 0.2], [0.55, 0.05, 0.12], [0.85, 0.35, 0.45], [0.6, 0.2, 0.05]]
DEFAULT_EYES = [[0.35, 0.2, 0.45], [0.2, 0.3, 0.5], [0.45, 0.3, 0.2], [0.15, 0.4, 0.3]]
DEFAULT_SKIN = [[0.95, 0.8, 0.72], [0.85, 0.65, 0.55], [0.98, 0.85, 0.8]]


@dataclass
class ToyFaceSpec:
    seed: int = 0
    n_identities: int = 12
    images_per_identity: int = 2
    n_references: int = 8
    n_targets: int = 1
    yaw_range: tuple = (-30.0, 30.0)
    pitch_range: tuple = (-5.0, 5.0)
    lip_colors: list = field(default_factory=lambda: [list(c) for c in DEFAULT_LIPS])
    eye_colors: list = field(default_factory=lambda: [list(c) for c in DEFAULT_EYES])
    skin_tints: list = field(default_factory=lambda: [list(c) for c in DEFAULT_SKIN])
    lip_strength: float = 0.75
    eye_strength: float = 0.6
    skin_strength: float = 0.2
    occlusion_probability: float = 0.0
    image_size: int = 64
    uv_resolution: int = 64
    scale_f: float = 25.0

    def __post_init__(self):
        self.yaw_range = tuple(float(v) for v in self.yaw_range)
        self.pitch_range = tuple(float(v) for v in self.pitch_range)
        for name, lo, hi in (("yaw_range", -90, 90), ("pitch_range", -45, 45)):
            a, b = getattr(self, name)
            if not lo <= a <= b <= hi:
                raise ValueError(f"{name} must satisfy {lo} <= low <= high <= {hi}, got {(a, b)}")
        if min(self.n_identities, self.images_per_identity, self.n_references, self.n_targets) < 1:
            raise ValueError("identity, image, reference and target counts must be >= 1")
        if not 0.0 <= self.occlusion_probability <= 1.0:
            raise ValueError("occlusion_probability must lie in [0, 1]")
        for name in ("lip_colors", "eye_colors", "skin_tints"):
            colors = np.asarray(getattr(self, name), dtype=np.float64)
            if colors.ndim != 2 or colors.shape[1] != 3 or colors.size == 0:
                raise ValueError(f"{name} must be a nonempty list of RGB triples")
            if np.any((colors < 0) | (colors > 1)):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        for name in ("lip_strength", "eye_strength", "skin_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["yaw_range"] = list(self.yaw_range)
        d["pitch_range"] = list(self.pitch_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- makeup --------------------------------------------------------------------

def apply_makeup(texture, geometry, makeup):
    """Blend makeup colors into a UV texture. ``makeup`` maps region -> {color, strength}.

    Eye shadow fades toward the edge of its region; lips and skin are flat.
    """
    texels = texture.texels.copy()
    labels = geometry.uv_labels
    s, t = geometry.texel_st[..., 0], geometry.texel_st[..., 1]
    falloff = np.clip(1.0 - (((np.abs(s) - 0.32) / 0.2) ** 2 + ((t - 0.28) / 0.1) ** 2), 0.0, 1.0)
    weights = {1: np.ones_like(s), 2: 0.4 + 0.6 * falloff, 3: np.ones_like(s)}
    for label, region in ((1, "lips"), (2, "eye"), (3, "skin")):
        if region not in makeup:
            continue
        m = labels == label
        a = makeup[region]["strength"] * weights[label][m]
        color = np.asarray(makeup[region]["color"], dtype=np.float64)
        texels[m] = (1.0 - a[:, None]) * texels[m] + a[:, None] * color
    return UVTexture(np.clip(texels, 0.0, 1.0), texture.coverage.copy())


def _sample_makeup(spec, rng):
    def pick(colors):
        c = np.asarray(colors[rng.integers(len(colors))], dtype=np.float64)
        return np.clip(c + rng.normal(0, 0.03, size=3), 0, 1).round(6).tolist()

    return {
        "lips": {"color": pick(spec.lip_colors), "strength": float(spec.lip_strength)},
        "eye": {"color": pick(spec.eye_colors), "strength": float(spec.eye_strength)},
        "skin": {"color": pick(spec.skin_tints), "strength": float(spec.skin_strength)},
    }


def _render_labels(geometry, plan, image_size):
    """Region labels per pixel from the rendered surface coordinates.

    Coverage is rendered alongside (s, t) so that taps falling on uncovered
    texels do not drag silhouette pixels toward the origin.
    """
    cov = geometry.coverage.astype(np.float64)
    planes = np.dstack([geometry.texel_st * cov[..., None], cov])
    r = plan.apply_numpy(planes, np.zeros((image_size, image_size, 3)))
    w = r[..., 2]
    st = r[..., :2] / np.maximum(w, 1e-12)[..., None]
    labels = region_labels(st[..., 0], st[..., 1])
    return np.where(plan.mask & (w >= 0.5), labels, 0).astype(np.uint8)


# --- generation ----------------------------------------------------------------

def _record_plan(spec):
    plan = []
    for i in range(spec.n_identities):
        for j in range(spec.images_per_identity):
            plan.append(("source", f"src_{i:03d}_{j}", f"id{i:03d}"))
    for k in range(spec.n_references):
        plan.append(("reference", f"ref_{k:03d}", f"ref{k:03d}"))
    for k in range(spec.n_targets):
        plan.append(("target", f"tgt_{k:03d}", f"tgt{k:03d}"))
    return plan


def generate_toy_dataset(spec, out_dir):
    """Write a complete toy dataset to ``out_dir`` and return the manifest dict."""
    out = Path(out_dir)
    try:
        for sub in ("images", "coefficients", "masks"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from None
    rng = np.random.default_rng(spec.seed)
    model = toy_model(seed=int(rng.integers(2**31)))
    model.save(out / "model.m3d")
    geo = FaceGeometry(model, spec.uv_resolution)
    h = spec.image_size

    identity_coeffs = {}
    records = []
    for split, name, identity in _record_plan(spec):
        if identity not in identity_coeffs:
            identity_coeffs[identity] = (rng.normal(0, 1, model.n_id), rng.normal(0, 1, model.n_tex))
        a_id, a_tex = identity_coeffs[identity]
        coeff = FaceCoefficients(a_id, rng.normal(0, 0.5, model.n_exp), a_tex)
        pose = FacePose(scale_f=spec.scale_f, pitch=float(rng.uniform(*spec.pitch_range)),
                        yaw=float(rng.uniform(*spec.yaw_range)),
                        translation_2d=[h / 2 + rng.uniform(-1, 1), h / 2 + rng.uniform(-1, 1)])
        shape, tex = build_face(model, coeff)
        texture = geo.texture_from_vertices(tex)
        makeup = _sample_makeup(spec, rng) if split == "reference" else {}
        texture = apply_makeup(texture, geo, makeup)
        background = np.broadcast_to(rng.uniform(0.15, 0.45, size=3), (h, h, 3))
        plan = RenderPlan(shape, pose, geo.triangles, geo.uv, geo.resolution, (h, h))
        image = plan.apply_numpy(texture.texels, background)
        labels = _render_labels(geo, plan, h)

        occluders = []
        if rng.uniform() < spec.occlusion_probability:
            w_, h_ = rng.integers(h // 6, h // 3, size=2)
            x0, y0 = rng.integers(h // 4, 3 * h // 4 - w_), rng.integers(h // 4, 3 * h // 4 - h_)
            color = rng.uniform(0, 1, size=3)
            image = image.copy()
            image[y0:y0 + h_, x0:x0 + w_] = color
            labels[y0:y0 + h_, x0:x0 + w_] = 0
            occluders.append({"x": int(x0), "y": int(y0), "width": int(w_), "height": int(h_),
                              "color": color.round(6).tolist()})

        fio.save_image(image, out / "images" / f"{name}.png")
        fio.save_label_map(labels, out / "masks" / f"{name}.png")
        meta = {"coefficients": coeff.to_dict(), "pose": pose.to_dict(), "identity": identity,
                "split": split, "makeup": makeup, "occluders": occluders}
        (out / "coefficients" / f"{name}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        records.append({"name": name, "image": f"images/{name}.png",
                        "coefficients": f"coefficients/{name}.json", "masks": f"masks/{name}.png",
                        "identity": identity, "split": split})

    manifest = {"schema_version": SCHEMA_VERSION, "model": "model.m3d", "image_size": h,
                "uv_resolution": spec.uv_resolution, "spec": spec.to_dict(), "records": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


# --- loading -------------------------------------------------------------------

@dataclass
class DatasetRecord:
    name: str
    image: Path
    coefficients: Path
    masks: Path
    identity: str
    split: str


@dataclass
class FaceArtifacts:
    """Everything the trainer needs about one face, as numpy arrays."""

    record: DatasetRecord
    image: np.ndarray  # (H, W, 3)
    shape: np.ndarray
    pose: FacePose
    texture: UVTexture
    visibility: VisibilityMap
    masks: RegionMasks
    uv_masks: RegionMasks
    plan: RenderPlan

    @property
    def yaw(self):
        return self.pose.yaw

    def image_tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.image.transpose(2, 0, 1).copy(), dtype=dtype)


def uv_region_masks(masks_2d, shape, pose, geometry, image_size=None, visible=None):
    """Pull 2D region masks into UV space by nearest-pixel lookup.

    Only texels that are covered and not hidden behind other geometry get a
    label, so masks of the far cheek stay empty instead of inheriting labels
    from the surface in front of it.
    """
    h = image_size or masks_2d.shape[0]
    lay = geometry.layout
    pos = texel_image_positions(project(shape, pose), h, lay)
    col = np.clip(np.floor(pos[:, 0]).astype(int), 0, masks_2d.shape[1] - 1)
    row = np.clip(np.floor(pos[:, 1]).astype(int), 0, masks_2d.shape[0] - 1)
    inside = (pos[:, 0] >= 0) & (pos[:, 0] < masks_2d.shape[1]) & (pos[:, 1] >= 0) & (pos[:, 1] < h)
    if visible is None:
        visible = occlusion_bits(shape, pose, geometry.triangles, geometry.uv, geometry.config, lay)
    visible = np.asarray(visible).reshape(-1)[lay.covered_index] & inside
    labels = masks_2d.to_label_map()[row, col] * visible
    return RegionMasks.from_label_map(lay.scatter(labels.astype(np.uint8)))


class Dataset:
    """Validated manifest with lazily computed, disk-cached face artifacts."""

    def __init__(self, root, manifest, records, errors, cache_dir):
        self.root = Path(root)
        self.manifest = manifest
        self.records = records
        self.errors = errors
        self.cache_dir = Path(cache_dir)
        self.image_size = int(manifest["image_size"])
        self.uv_resolution = int(manifest["uv_resolution"])
        self.computed = 0
        self._geometry = None
        self._memo = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def geometry(self):
        if self._geometry is None:
            model = MorphableModel.load(self.root / self.manifest["model"])
            self._geometry = FaceGeometry(model, self.uv_resolution)
        return self._geometry

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def record(self, name):
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def _cache_paths(self, rec):
        d = self.cache_dir
        return d / f"{rec.name}_tex.png", d / f"{rec.name}_vis.png", d / f"{rec.name}_uvmask.png"

    def artifacts(self, rec):
        if isinstance(rec, str):
            rec = self.record(rec)
        if rec.name in self._memo:
            return self._memo[rec.name]
        geo = self.geometry
        meta = json.loads(rec.coefficients.read_text())
        coeff = FaceCoefficients.from_dict(meta["coefficients"])
        pose = FacePose.from_dict(meta["pose"])
        shape, _ = build_face(geo.model, coeff)
        image = fio.load_image(rec.image)
        masks = RegionMasks.from_label_map(fio.load_label_map(rec.masks))
        tex_p, vis_p, uvm_p = self._cache_paths(rec)
        if tex_p.exists() and vis_p.exists() and uvm_p.exists():
            texture = fio.load_uv_texture(tex_p)
            vis = fio.load_visibility(vis_p)
            uv_masks = RegionMasks.from_label_map(fio.load_label_map(uvm_p))
        else:
            texture, vis, uv_masks = self._compute(image, shape, pose, masks)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            fio.save_uv_texture(texture, tex_p)
            fio.save_visibility(vis, vis_p)
            fio.save_label_map(uv_masks.to_label_map(), uvm_p)
            with self._lock:
                self.computed += 1
        art = FaceArtifacts(rec, image, shape, pose, texture, vis, masks, uv_masks,
                            geo.plan(shape, pose, self.image_size))
        self._memo[rec.name] = art
        return art

    def _compute(self, image, shape, pose, masks):
        geo = self.geometry
        verts2d = project(shape, pose)
        tex = sample_uv_texture(image, verts2d, geo.uv, geo.triangles, geo.config, geo.layout)
        vis, bits = visibility_and_bits(shape, pose, geo.triangles, geo.uv, geo.config, geo.layout)
        uv_masks = uv_region_masks(masks, shape, pose, geo, self.image_size, visible=bits)
        # quantize now so fresh and cached artifacts are bit-identical
        tex = UVTexture(fio.quantize16(tex.texels) * tex.coverage[..., None], tex.coverage)
        vis = VisibilityMap(fio.quantize16(vis.values))
        return tex, vis, uv_masks

    def precompute(self, split=None, workers=1):
        """Compute (or load) artifacts for every record; returns the count computed so far."""
        recs = self.records if split is None else self.split(split)
        self.geometry  # build once before any worker needs it
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(self.artifacts, recs))
        else:
            for rec in recs:
                self.artifacts(rec)
        return self.computed


def _validate(root, raw, image_size):
    need = ("name", "image", "coefficients", "masks", "identity", "split")
    missing = [k for k in need if k not in raw]
    name = raw.get("name", "?")
    if missing:
        raise DatasetError(name, f"missing fields {missing}")
    if raw["split"] not in SPLITS:
        raise DatasetError(name, f"unknown split {raw['split']!r}")
    rec = DatasetRecord(raw["name"], root / raw["image"], root / raw["coefficients"], root / raw["masks"],
                        raw["identity"], raw["split"])
    for attr in ("image", "coefficients", "masks"):
        if not getattr(rec, attr).exists():
            raise DatasetError(name, f"{attr} file not found: {getattr(rec, attr)}")
    try:
        labels = fio.load_label_map(rec.masks)
    except (OSError, ValueError) as exc:
        raise DatasetError(name, f"unreadable mask ({exc})") from None
    if labels.shape != (image_size, image_size):
        raise DatasetError(name, f"mask shape {labels.shape} does not match image size {image_size}")
    return rec


def load_dataset(manifest_path, fail_fast=True, cache_dir=None):
    """Read and validate a manifest.

    With ``fail_fast`` the first bad record raises :class:`DatasetError`;
    otherwise bad records are dropped and listed in ``dataset.errors``.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read manifest {manifest_path}: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"manifest schema_version {manifest.get('schema_version')} is not {SCHEMA_VERSION}")
    if not manifest.get("records"):
        raise ValueError(f"manifest {manifest_path} lists no records")
    root = manifest_path.parent
    records, errors = [], []
    for raw in manifest["records"]:
        try:
            records.append(_validate(root, raw, int(manifest["image_size"])))
        except DatasetError as exc:
            if fail_fast:
                raise
            errors.append(exc)
    if not records:
        raise ValueError(f"no valid records in {manifest_path}")
    return Dataset(root, manifest, records, errors, cache_dir or root / "cache")


def render_label_map(labels_uv, artifacts, geometry):
    """Render UV labels to the image plane (nearest texel), for round-trip checks."""
    plan = artifacts.plan
    res = geometry.resolution
    pos = plan.taps, plan.weights
    best = np.argmax(pos[1], axis=1)
    texel = pos[0][np.arange(len(best)), best]
    out = np.zeros(plan.height * plan.width, dtype=np.uint8)
    out[plan.pixels] = np.asarray(labels_uv).reshape(res * res)[texel]
    return out.reshape(plan.height, plan.width)


__all__ = [
    "Dataset", "DatasetError", "DatasetRecord", "FaceArtifacts", "FaceGeometry", "SCHEMA_VERSION",
    "ToyFaceSpec", "apply_makeup", "generate_toy_dataset", "load_dataset", "region_labels",
    "render_label_map", "uv_region_masks",
]
