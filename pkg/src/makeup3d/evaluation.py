"""Protection and image-quality metrics.

Images are (N, 3, H, W) tensors or lists of (3, H, W) tensors in [0, 1].
Each metric has an embedding- or feature-level twin (``*_from_*``) that the
image-level function calls, so the counting logic can be tested directly.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0

# provider-recommended verification thresholds on a 0-100 confidence scale
API_THRESHOLDS = {"face++": 69.10, "baidu": 80.00, "aliyun": 69.00}


def _stack(images):
    if isinstance(images, (list, tuple)):
        if not images:
            raise ValueError("empty image set")
        return torch.stack([torch.as_tensor(i) for i in images])
    images = torch.as_tensor(images)
    return images[None] if images.dim() == 3 else images


def _percent(flags):
    flags = np.asarray(flags, dtype=bool)
    return 100.0 * int(np.count_nonzero(flags)) / flags.size


def _unit(e):
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero embedding")
    return e / n


# --- verification ---------------------------------------------------------------

def asr_from_similarities(sims, tau):
    sims = np.asarray(sims, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("attack success rate of an empty set")
    return _percent(sims > tau)


def psr_from_similarities(sims, tau):
    sims = np.asarray(sims, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("protection success rate of an empty set")
    return _percent(sims < tau)


def target_similarities(model, images, i_target):
    e = _unit(model.embed(_stack(images)))
    e0 = _unit(model.embed(_stack(i_target)))[0]
    return e @ e0


def pair_similarities(model, images_a, images_b):
    a, b = _stack(images_a), _stack(images_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} protected vs {b.shape[0]} source images")
    return np.sum(_unit(model.embed(a)) * _unit(model.embed(b)), axis=1)


def asr(protected_images, i_target, model, tau):
    """Percentage of protected images accepted as the target at threshold ``tau``."""
    return asr_from_similarities(target_similarities(model, protected_images, i_target), tau)


def psr(protected_images, source_images, model, tau):
    """Percentage of protected images rejected as their own source."""
    return psr_from_similarities(pair_similarities(model, protected_images, source_images), tau)


# --- identification -------------------------------------------------------------

def rank_k_from_embeddings(probe_emb, gallery_emb, gallery_ids, probe_ids, k):
    """Share of probes whose top-``k`` gallery neighbours all have other identities.

    Ties in similarity are broken by gallery index (lower first).
    """
    gallery_ids = list(gallery_ids)
    probe_ids = list(probe_ids)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(probe_ids) == 0:
        raise ValueError("no probes")
    known = set(gallery_ids)
    for i, pid in enumerate(probe_ids):
        if pid not in known:
            raise ValueError(f"probe {i} has identity {pid!r}, which is absent from the gallery")
    sims = _unit(probe_emb) @ _unit(gallery_emb).T
    # stable sort on -sim keeps lower gallery indices first among ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    gid = np.asarray(gallery_ids, dtype=object)
    hit = np.array([np.any(gid[row] == pid) for row, pid in zip(order, probe_ids)])
    return _percent(~hit)


def rank_k_protection(probe_images, gallery, probe_identities, model, k):
    """``gallery`` is a list of ``(image, identity)`` pairs."""
    g_imgs = [g[0] for g in gallery]
    g_ids = [g[1] for g in gallery]
    return rank_k_from_embeddings(model.embed(_stack(probe_images)), model.embed(_stack(g_imgs)),
                                  g_ids, probe_identities, k)


# --- quality ----------------------------------------------------------------------

def fid_from_features(feats_a, feats_b):
    """Frechet distance between Gaussian fits of two (N, d) feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("FID needs at least 2 items per set to estimate a covariance")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    # singular covariances are fine: sqrtm of a PSD product; drop roundoff imaginary parts
    cross = scipy.linalg.sqrtm(cov_a @ cov_b)
    cross = np.real(cross)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


class PooledFeatures:
    """Feature function for FID: a conv extractor followed by global average pooling."""

    def __init__(self, extractor=None):
        if extractor is None:
            from .losses import RandomFeatureExtractor

            extractor = RandomFeatureExtractor(seed=1234, widths=(16, 32, 32), layer=2)
        self.extractor = extractor

    def __call__(self, images):
        x = _stack(images).float()
        with torch.no_grad():
            f = self.extractor(x)
        return f.mean(dim=(-2, -1)).double().numpy()


def _hwc(img):
    t = torch.as_tensor(img).detach().double()
    return t.permute(1, 2, 0).numpy() if t.shape[0] == 3 else t.numpy()


def ssim(a, b):
    """Gaussian-window (sigma 1.5, 11x11) SSIM on [0, 1] RGB images."""
    return float(structural_similarity(_hwc(a), _hwc(b), data_range=1.0, channel_axis=-1,
                                       gaussian_weights=True, sigma=1.5, use_sample_covariance=False))


def psnr(a, b):
    mse = float(np.mean((_hwc(a) - _hwc(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class QualityReport:
    fid: float
    ssim: float
    psnr: float

    def to_dict(self):
        return {"fid": self.fid, "ssim": self.ssim, "psnr": self.psnr}


def image_quality(generated_set, reference_set, features=None):
    """FID between the sets plus mean SSIM/PSNR over aligned pairs."""
    gen, ref = _stack(generated_set), _stack(reference_set)
    if gen.shape[0] != ref.shape[0]:
        raise ValueError("SSIM/PSNR need aligned (generated, source) pairs")
    features = features or PooledFeatures()
    fid = fid_from_features(features(gen), features(ref))
    s = [ssim(a, b) for a, b in zip(gen, ref)]
    p = [psnr(a, b) for a, b in zip(gen, ref)]
    return QualityReport(fid, float(np.mean(s)), float(np.mean(p)))


# --- commercial APIs --------------------------------------------------------------

class ApiTransportError(RuntimeError):
    """A provider request failed in transit; safe to retry."""

    retryable = True

    def __init__(self, provider, payload):
        super().__init__(f"{provider}: transport failure ({payload})")
        self.provider = provider
        self.payload = payload


class StubApiClient:
    """Offline stand-in for a verification API: confidence = 100 * max(0, cos).

    ``failures`` makes the first n calls raise :class:`ApiTransportError`, for
    exercising retry paths.
    """

    def __init__(self, provider, embedder, threshold=None, failures=0, min_interval=0.0):
        self.provider = provider.lower()
        self.embedder = embedder
        self.threshold = API_THRESHOLDS.get(self.provider, 70.0) if threshold is None else threshold
        self._failures = failures
        self._min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def verify(self, image_a, image_b):
        with self._lock:
            wait = self._last + self._min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()
            if self._failures > 0:
                self._failures -= 1
                raise ApiTransportError(self.provider, {"status": 503})
        e = _unit(self.embedder.embed(torch.stack([torch.as_tensor(image_a), torch.as_tensor(image_b)])))
        return 100.0 * max(0.0, float(e[0] @ e[1]))


def api_verify(client, image_a, image_b, retries=2):
    for attempt in range(retries + 1):
        try:
            return client.verify(image_a, image_b)
        except ApiTransportError:
            if attempt == retries:
                raise
    raise AssertionError("unreachable")


# --- protocols and reports --------------------------------------------------------

def holdout_splits(names):
    """Every (training models, held-out model) split of a model list."""
    names = list(names)
    if len(names) < 2:
        raise ValueError("hold-one-out needs at least two models")
    return [([n for n in names if n != h], h) for h in names]


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def format_table(rows, columns):
    widths = [max(len(c), *(len(f"{r.get(c, '')}") for r in rows)) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(f"{r.get(c, '')}".ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)


def write_report(path, report, rows=None, columns=None):
    """Write ``report`` as JSON and, when ``rows`` are given, a text table beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    if rows:
        path.with_suffix(".txt").write_text(format_table(rows, columns or list(rows[0])) + "\n")
    return path
