"""Face-embedding models: the common contract, a mock bank, and FAR calibration.

Every model maps raw ``(B, 3, H, W)`` images in [0, 1] to unit-norm
embeddings. Preprocessing (resize, scaling to [-1, 1]) lives inside the
wrapper because real recognizers disagree on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import ContainerError, read_container, write_container

# thresholds at 0.01 / 0.001 FAR for the public models used as black boxes
PUBLISHED_THRESHOLDS = {
    "IRSE50": (0.241, 0.313),
    "IR152": (0.167, 0.228),
    "FaceNet": (0.409, 0.591),
    "MobileFace": (0.302, 0.381),
}

MOCK_KIND = "mock-embedder"


class ModelLoadError(ValueError):
    pass


class EmbeddingModel(nn.Module):
    """Wrap ``net`` (image batch in [-1, 1] -> raw features) as a unit-norm embedder.

    ``center`` is subtracted from raw features before normalization; mock
    models use it to remove the direction shared by all face images.
    """

    def __init__(self, net, name, embedding_dim, input_size=32, center=None, crop=1.0):
        super().__init__()
        if not 0 < crop <= 1:
            raise ValueError(f"crop must lie in (0, 1], got {crop}")
        self.crop = float(crop)
        self.net = net
        self.name = name
        self.embedding_dim = int(embedding_dim)
        self.input_size = int(input_size)
        c = torch.zeros(self.embedding_dim) if center is None else torch.as_tensor(center, dtype=torch.float32)
        self.register_buffer("center", c.reshape(-1))
        self.requires_grad_(False)
        self.eval()

    def raw(self, images):
        x = images.unsqueeze(0) if images.dim() == 3 else images
        if self.crop < 1.0:
            # fixed central crop, standing in for face alignment
            h, w = x.shape[-2:]
            ch, cw = max(1, round(h * self.crop)), max(1, round(w * self.crop))
            top, left = (h - ch) // 2, (w - cw) // 2
            x = x[..., top:top + ch, left:left + cw]
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False)
        return self.net(2.0 * x - 1.0)

    def forward(self, images):
        feats = self.raw(images) - self.center.to(images.dtype)
        return F.normalize(feats, dim=-1, eps=1e-12)

    @torch.no_grad()
    def embed(self, images, batch_size=64):
        """Numpy embeddings for a tensor batch or a list of (3, H, W) tensors."""
        if isinstance(images, (list, tuple)):
            images = torch.stack([torch.as_tensor(i) for i in images])
        dtype = next(iter(self.buffers())).dtype
        out = [self(images[i:i + batch_size].to(dtype)) for i in range(0, images.shape[0], batch_size)]
        return torch.cat(out).double().numpy()


class MockNet(nn.Module):
    """Three stride-2 convolutions and global average pooling."""

    def __init__(self, dim=64, widths=(16, 32)):
        super().__init__()
        self.conv1 = nn.Conv2d(3, widths[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(widths[1], dim, 3, stride=2, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = F.leaky_relu(self.conv2(x), 0.2)
        return self.conv3(x).mean(dim=(-2, -1))


def _init_clipped(net, gen):
    # entries bounded by 2/sqrt(fan_in) keep every layer's Lipschitz constant small
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.weight[0].numel()
            std = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_((torch.randn(m.weight.shape, generator=gen) * std).clamp(-2 * std, 2 * std))
                m.bias.copy_((torch.randn(m.bias.shape, generator=gen) * 0.1).clamp(-0.2, 0.2))


def calibration_images(seed, n=32, size=32):
    """Smooth random images used to center mock models when no face set is given."""
    gen = torch.Generator().manual_seed(seed)
    low = torch.rand(n, 3, 4, 4, generator=gen)
    return F.interpolate(low, size=(size, size), mode="bilinear", align_corners=False)


def mock_model(seed, dim=64, name=None, input_size=32, calibration=None, crop=1.0):
    gen = torch.Generator().manual_seed(seed)
    net = MockNet(dim)
    _init_clipped(net, gen)
    model = EmbeddingModel(net, name or f"mock{seed}", dim, input_size, crop=crop)
    images = calibration if calibration is not None else calibration_images(seed, size=input_size)
    with torch.no_grad():
        model.center.copy_(model.raw(torch.as_tensor(images, dtype=torch.float32)).mean(0))
    return model


@dataclass
class ModelBank:
    models: list
    holdout: str | None = None

    def __post_init__(self):
        names = [m.name for m in self.models]
        if not names:
            raise ValueError("a model bank needs at least one model")
        if len(set(names)) != len(names):
            raise ValueError(f"model names must be unique, got {names}")
        if self.holdout is not None and self.holdout not in names:
            raise ValueError(f"holdout {self.holdout!r} is not in the bank")

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, key):
        if isinstance(key, str):
            for m in self.models:
                if m.name == key:
                    return m
            raise KeyError(key)
        return self.models[key]

    @property
    def names(self):
        return [m.name for m in self.models]

    @property
    def training_models(self):
        return [m for m in self.models if m.name != self.holdout]

    @property
    def heldout_model(self):
        return None if self.holdout is None else self[self.holdout]

    def with_holdout(self, name):
        return ModelBank(list(self.models), name)


def build_mock_bank(k, seed, dim=64, calibration=None, input_size=32, crop=1.0):
    if k < 1:
        raise ValueError("k must be >= 1")
    models = [mock_model(seed * 1000 + i, dim, name=f"mock{i}", input_size=input_size,
                         calibration=calibration, crop=crop) for i in range(k)]
    return ModelBank(models)


def cosine_similarity(e1, e2):
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pairwise_cosine(a, b):
    """Row-wise cosine between two (N, d) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)


def similarity_threshold(similarities, far):
    """Smallest observed similarity ``tau`` with ``mean(sims > tau) == far``.

    ``far = 1`` returns just below the minimum so that every pair is accepted.
    """
    if not 0 < far <= 1:
        raise ValueError("far must lie in (0, 1]")
    s = np.sort(np.asarray(similarities, dtype=np.float64))
    n = s.size
    if n == 0:
        raise ValueError("no similarities given")
    keep = int(math.ceil(n * (1.0 - far) - 1e-9))
    if keep <= 0:
        return float(np.nextafter(s[0], -np.inf))
    return float(s[keep - 1])


def far_threshold(model, impostor_pairs, far):
    """Calibrate a verification threshold on impostor image pairs."""
    need = int(math.ceil(10.0 / far - 1e-9))
    if len(impostor_pairs) < need:
        raise ValueError(f"far={far} needs at least {need} impostor pairs, got {len(impostor_pairs)}")
    a = model.embed([p[0] for p in impostor_pairs])
    b = model.embed([p[1] for p in impostor_pairs])
    return similarity_threshold(pairwise_cosine(a, b), far)


# --- external models -----------------------------------------------------------

def save_mock_model(model, path):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"name": model.name, "embedding_dim": model.embedding_dim, "input_size": model.input_size,
            "crop": model.crop, "widths": [model.net.conv1.out_channels, model.net.conv2.out_channels]}
    return write_container(path, tensors, kind=MOCK_KIND, metadata=meta)


def _load_mock(path, name):
    tensors, meta = read_container(path, kind=MOCK_KIND)
    net = MockNet(meta["embedding_dim"], tuple(meta["widths"]))
    model = EmbeddingModel(net, name or meta["name"], meta["embedding_dim"], meta["input_size"],
                           crop=meta.get("crop", 1.0))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return model


def _load_torchscript(path, name, embedding_dim=None, input_size=112):
    net = torch.jit.load(str(path), map_location="cpu")
    probe = torch.zeros(1, 3, input_size, input_size)
    with torch.no_grad():
        dim = int(net(probe).shape[-1])
    if embedding_dim is not None and dim != embedding_dim:
        raise ModelLoadError(f"{path}: network emits {dim}-d features, registry says {embedding_dim}")
    return EmbeddingModel(net, name, dim, input_size)


ADAPTERS = {"mock": _load_mock, "torchscript": _load_torchscript}


def load_external_model(path, name, adapter="mock", **options):
    path = Path(path)
    if adapter not in ADAPTERS:
        raise ModelLoadError(f"unknown adapter {adapter!r}; known: {sorted(ADAPTERS)}")
    if not path.exists():
        raise ModelLoadError(f"model checkpoint not found: {path}")
    try:
        return ADAPTERS[adapter](path, name, **options)
    except ContainerError as exc:
        raise ModelLoadError(str(exc)) from None
    except RuntimeError as exc:
        raise ModelLoadError(f"{path}: could not load with adapter {adapter!r} ({exc})") from None


def load_registry(path):
    """Read a registry file ``{"models": {name: {adapter, checkpoint, embedding_dim,
    input_size?, far_thresholds?}}}``; relative checkpoints resolve against the file."""
    path = Path(path)
    spec = json.loads(path.read_text())
    models = []
    thresholds = {}
    for name, entry in spec["models"].items():
        ckpt = Path(entry["checkpoint"])
        if not ckpt.is_absolute():
            ckpt = path.parent / ckpt
        opts = {}
        if entry["adapter"] == "torchscript":
            opts = {"embedding_dim": entry.get("embedding_dim"), "input_size": entry.get("input_size", 112)}
        m = load_external_model(ckpt, name, entry["adapter"], **opts)
        if m.embedding_dim != entry["embedding_dim"]:
            raise ModelLoadError(f"{name}: embedding_dim {m.embedding_dim} != registry {entry['embedding_dim']}")
        models.append(m)
        thresholds[name] = {float(k): v for k, v in entry.get("far_thresholds", {}).items()}
    return ModelBank(models, spec.get("holdout")), thresholds


def write_registry(path, entries, holdout=None):
    path = Path(path)
    path.write_text(json.dumps({"models": entries, "holdout": holdout}, indent=2, sort_keys=True))
    return path
