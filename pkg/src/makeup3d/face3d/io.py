"""16-bit PNG persistence for UV-space maps.

A UV texture is written as an RGBA 16-bit PNG whose alpha channel encodes
coverage (65535 covered, 0 not); a visibility map as a grayscale 16-bit PNG.
Each PNG gets a ``<name>.json`` sidecar::

    {"kind": "uv_texture" | "visibility", "resolution": int,
     "coverage_encoding": "alpha" | "none", "scale": 65535}
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .raster import UVTexture, VisibilityMap

SCALE = 65535


def quantize16(values):
    """Round-trip a [0, 1] array through 16-bit storage precision."""
    return np.round(np.clip(values, 0.0, 1.0) * SCALE) / SCALE


def _sidecar(path):
    path = Path(path)
    return path.with_suffix(".json")


def save_uv_texture(texture, path):
    path = Path(path)
    rgb = np.round(np.clip(texture.texels, 0, 1) * SCALE).astype(np.uint16)
    alpha = np.where(texture.coverage, SCALE, 0).astype(np.uint16)
    rgba = np.dstack([rgb, alpha])
    if not cv2.imwrite(str(path), cv2.cvtColor(rgba, cv2.COLOR_RGBA2BGRA)):
        raise OSError(f"could not write {path}")
    _sidecar(path).write_text(json.dumps(
        {"kind": "uv_texture", "resolution": texture.resolution,
         "coverage_encoding": "alpha", "scale": SCALE}, indent=2))
    return path


def load_uv_texture(path):
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("kind") != "uv_texture":
        raise ValueError(f"{path} sidecar does not describe a uv_texture")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 4:
        raise ValueError(f"{path} is not a 16-bit RGBA PNG")
    rgba = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGBA)
    coverage = rgba[..., 3] > 0
    texels = rgba[..., :3].astype(np.float64) / meta["scale"]
    texels[~coverage] = 0.0
    if texels.shape[0] != meta["resolution"]:
        raise ValueError(f"{path}: resolution {texels.shape[0]} != sidecar {meta['resolution']}")
    return UVTexture(texels, coverage)


def save_visibility(vis, path):
    path = Path(path)
    gray = np.round(np.clip(vis.values, 0, 1) * SCALE).astype(np.uint16)
    if not cv2.imwrite(str(path), gray):
        raise OSError(f"could not write {path}")
    _sidecar(path).write_text(json.dumps(
        {"kind": "visibility", "resolution": vis.resolution,
         "coverage_encoding": "none", "scale": SCALE}, indent=2))
    return path


def load_visibility(path):
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("kind") != "visibility":
        raise ValueError(f"{path} sidecar does not describe a visibility map")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.dtype != np.uint16 or raw.ndim != 2:
        raise ValueError(f"{path} is not a 16-bit grayscale PNG")
    return VisibilityMap(raw.astype(np.float64) / meta["scale"])


def save_image(image, path):
    """Write an (H, W, 3) [0, 1] float image as an 8-bit RGB PNG."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")
    return Path(path)


def load_image(path):
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def save_label_map(labels, path):
    if not cv2.imwrite(str(path), np.asarray(labels, dtype=np.uint8)):
        raise OSError(f"could not write {path}")
    return Path(path)


def load_label_map(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read label map {path}")
    return raw
