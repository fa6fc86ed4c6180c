"""Training objectives.

Images and textures are torch tensors shaped (C, H, W) or (B, C, H, W) with
B = 1; region masks are boolean (H, W). Histogram-matched targets never carry
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .face3d import UVTexture, VisibilityMap, flip_uv

LEVELS = 255
EPS_PROB = 1e-7
REGIONS = ("lips", "eye", "skin")


class EmptyRegionError(ValueError):
    pass


@dataclass
class RegionMasks:
    lips: np.ndarray
    eye: np.ndarray
    skin: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, r), dtype=bool) for r in REGIONS]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 2:
            raise ValueError(f"region masks must share one 2D shape, got {[a.shape for a in arrs]}")
        if np.any(arrs[0] & arrs[1]) or np.any(arrs[0] & arrs[2]) or np.any(arrs[1] & arrs[2]):
            raise ValueError("region masks overlap")
        for r, a in zip(REGIONS, arrs):
            setattr(self, r, a)

    @property
    def shape(self):
        return self.lips.shape

    def items(self):
        return [(r, getattr(self, r)) for r in REGIONS]

    def union(self):
        return self.lips | self.eye | self.skin

    def flipped(self):
        return RegionMasks(*(flip_uv(getattr(self, r)) for r in REGIONS))

    @classmethod
    def from_label_map(cls, labels):
        """Labels: 0 background, 1 lips, 2 eye, 3 skin."""
        labels = np.asarray(labels)
        return cls(labels == 1, labels == 2, labels == 3)

    def to_label_map(self):
        out = np.zeros(self.shape, dtype=np.uint8)
        for i, (_, m) in enumerate(self.items(), start=1):
            out[m] = i
        return out


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda_a: float = 1.0
    lambda_m: float = 1.0
    lambda_m_uv: float = 1.0
    lambda_p: float = 5e-3
    lambda_t: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not v >= 0:
                raise ValueError(f"{f.name} must be nonnegative, got {v}")
            setattr(self, f.name, v)

    def region(self, name):
        return {"lips": self.lambda1, "eye": self.lambda2, "skin": self.lambda3}[name]

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- histogram matching --------------------------------------------------------

def _quantize(x):
    return np.rint(np.clip(x, 0.0, 1.0) * LEVELS).astype(np.int64)


def histogram_match(source, reference):
    """Map ``source`` values so their histogram follows ``reference`` (256 bins).

    A source level with cumulative count ``c_s`` out of ``n`` goes to the
    smallest reference level whose cumulative fraction reaches ``c_s / n``.
    Accepts numpy arrays or tensors, returns the same kind and shape as ``source``.
    """
    is_tensor = torch.is_tensor(source)
    src = source.detach().cpu().double().numpy() if is_tensor else np.asarray(source, dtype=np.float64)
    ref = reference.detach().cpu().double().numpy() if torch.is_tensor(reference) else np.asarray(reference, dtype=np.float64)
    if src.size == 0 or ref.size == 0:
        raise EmptyRegionError("histogram matching needs nonempty source and reference pixel sets")
    qs = _quantize(src.ravel())
    qr = _quantize(ref.ravel())
    n, m = qs.size, qr.size
    cum_s = np.cumsum(np.bincount(qs, minlength=LEVELS + 1))
    cum_r = np.cumsum(np.bincount(qr, minlength=LEVELS + 1))
    # cum_r[r] / m >= cum_s[l] / n, compared exactly in integers
    mapping = np.searchsorted(cum_r * n, cum_s * m, side="left")
    out = (mapping[qs] / LEVELS).reshape(src.shape)
    if is_tensor:
        return torch.as_tensor(out, dtype=source.dtype, device=source.device)
    return out


# --- makeup losses -------------------------------------------------------------

def _chw(x):
    x = torch.as_tensor(x)
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError("makeup losses take a single image (batch size 1)")
        x = x[0]
    return x


def _mask_tensor(m, device):
    return torch.as_tensor(np.asarray(m, dtype=bool), device=device)


def region_loss(gen, ref, mask_gen, mask_ref=None):
    """RMS distance between masked ``gen`` pixels and their histogram-matched target.

    Returns ``None`` when either region is empty.
    """
    gen, ref = _chw(gen), _chw(ref)
    mg = _mask_tensor(mask_gen, gen.device)
    mr = mg if mask_ref is None else _mask_tensor(mask_ref, ref.device)
    if not mg.any() or not mr.any():
        return None
    g = gen[:, mg]  # (C, n)
    r = ref[:, mr]
    target = torch.stack([histogram_match(g[c], r[c]) for c in range(g.shape[0])])
    diff = target.detach() - g
    return torch.linalg.vector_norm(diff) / np.sqrt(diff.numel())


def _weighted_regions(gen, ref, masks, ref_masks, w, strict, skipped):
    total = None
    for name, m in masks.items():
        mr = None if ref_masks is None else getattr(ref_masks, name)
        term = region_loss(gen, ref, m, mr)
        if term is None:
            if strict:
                raise EmptyRegionError(f"region {name!r} is empty")
            skipped.append(name)
            continue
        term = w.region(name) * term
        total = term if total is None else total + term
    return total


def makeup_loss_2d(i_t, i_ref, masks, w=None, ref_masks=None):
    """Weighted lips/eye/skin histogram loss in image space.

    ``ref_masks`` locates the regions in ``i_ref`` when its geometry differs
    from ``i_t``; by default the same masks are used for both. Empty regions
    are skipped; an error is raised only when every region is empty.
    """
    w = w or LossWeights()
    skipped = []
    total = _weighted_regions(i_t, i_ref, masks, ref_masks, w, False, skipped)
    if total is None:
        raise EmptyRegionError("all makeup regions are empty")
    return total


def repair_mask(vis, threshold=0.3):
    """Texels that keep their own value during repair (the rest take the mirror)."""
    v = np.asarray(vis, dtype=np.float64)
    vf = flip_uv(v)
    keep = v >= np.maximum(threshold, vf)
    hidden_both = np.maximum(v, vf) < threshold
    return keep | hidden_both


def repair_reference_texture(t_ref, vis, yaw, threshold=0.3):
    """Fill poorly visible reference texels from the mirrored texture.

    ``|yaw| <= 5`` returns ``t_ref`` unchanged (same object).
    """
    if abs(float(yaw)) <= 5.0:
        return t_ref
    v = vis.values if isinstance(vis, VisibilityMap) else vis
    b = repair_mask(v, threshold)
    texels = np.where(b[..., None], t_ref.texels, flip_uv(t_ref.texels))
    coverage = np.where(b, t_ref.coverage, flip_uv(t_ref.coverage))
    return UVTexture(texels, coverage)


def _repaired_tensor(t_ref, vis, yaw, threshold):
    if isinstance(t_ref, UVTexture):
        return repair_reference_texture(t_ref, vis, yaw, threshold).tensor(torch.float64)
    t = _chw(t_ref).detach()
    if abs(float(yaw)) <= 5.0:
        return t
    v = vis.values if isinstance(vis, VisibilityMap) else torch.as_tensor(vis).detach().cpu().numpy().squeeze()
    b = torch.as_tensor(repair_mask(v, threshold), device=t.device)
    return torch.where(b, t, torch.flip(t, dims=[-1]))


def makeup_loss_uv(t_t, t_ref, vis, yaw, uv_masks, w=None, threshold=0.3, strict=True, skipped=None):
    """Histogram loss in UV space against the symmetry-repaired reference.

    With ``strict`` an empty region raises; otherwise it is skipped and its
    name appended to ``skipped``. Returns ``None`` if every region was skipped.
    """
    w = w or LossWeights()
    t_t = _chw(t_t)
    ref = _repaired_tensor(t_ref, vis, yaw, threshold).to(t_t)
    return _weighted_regions(t_t, ref, uv_masks, None, w, strict, [] if skipped is None else skipped)


# --- perceptual ----------------------------------------------------------------

class RandomFeatureExtractor(nn.Module):
    """Frozen random conv stack; ``layer`` picks which activation is returned.

    ``linear=True`` drops biases and nonlinearities, which makes the features a
    linear function of the input (used for monotonicity checks).
    """

    def __init__(self, seed=0, widths=(16, 32, 32), layer=2, linear=False):
        super().__init__()
        if not 0 <= layer < len(widths):
            raise ValueError(f"layer must be in [0, {len(widths)})")
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c in widths:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=not linear)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / np.sqrt(c_in * 9))
                if conv.bias is not None:
                    conv.bias.copy_(0.05 * torch.randn(c, generator=gen))
            convs.append(conv)
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.layer = layer
        self.linear = linear
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = x[None] if x.dim() == 3 else x
        for i, conv in enumerate(self.convs):
            x = conv(x.to(conv.weight.dtype))
            if not self.linear:
                x = F.relu(x)
            if i == self.layer:
                break
        return x


def perceptual_loss(t_t, t_src, fx):
    return torch.linalg.vector_norm(fx(t_t) - fx(t_src))


# --- adversarial ---------------------------------------------------------------

def _nll(p):
    return -torch.log(p.clamp(EPS_PROB, 1.0)).mean()


def _nll_fake(p):
    return -torch.log((1.0 - p).clamp(EPS_PROB, 1.0)).mean()


def _adversarial(real_a, real_b, fake_a, fake_b, d_a, d_b, which):
    loss_d = loss_g = None
    if which in ("both", "d"):
        loss_d = _nll(d_a(real_a)) + _nll(d_b(real_b)) + _nll_fake(d_a(fake_a)) + _nll_fake(d_b(fake_b))
    if which in ("both", "g"):
        loss_g = _nll(d_a(fake_a)) + _nll(d_b(fake_b))
    return loss_d, loss_g


def adversarial_texture(d_s, d_r, t_src, t_ref, t_gen_to_src, t_gen_to_ref, which="both"):
    """Texture-domain GAN losses.

    ``t_gen_to_src`` is G(T_ref, T_src) (judged by ``d_s``); ``t_gen_to_ref``
    is G(T_src, T_ref) (judged by ``d_r``). ``which`` selects "d", "g" or both;
    unselected entries come back as ``None``.
    """
    return _adversarial(t_src, t_ref, t_gen_to_src, t_gen_to_ref, d_s, d_r, which)


def adversarial_image(d_img, i_src, i_ref, rendered_pair, which="both"):
    """Image-domain GAN losses; ``rendered_pair`` holds the two rendered fakes."""
    fake_a, fake_b = rendered_pair
    return _adversarial(i_src, i_ref, fake_a, fake_b, d_img, d_img, which)


# --- attack --------------------------------------------------------------------

def _model_dtype(model, fallback):
    for t in model.parameters():
        return t.dtype
    for t in model.buffers():
        return t.dtype
    return fallback


def target_embeddings(i_target, bank):
    x = torch.as_tensor(i_target)
    with torch.no_grad():
        return [m(x.to(_model_dtype(m, x.dtype))) for m in bank]


def attack_loss(i_target, i_t, bank, targets=None):
    """Mean over models of ``1 - cos`` between target and generated embeddings.

    ``targets`` may hold precomputed target embeddings (one per model).
    """
    models = list(bank)
    if not models:
        raise ValueError("attack loss needs at least one embedding model")
    if targets is None:
        targets = target_embeddings(i_target, models)
    x = i_t[None] if i_t.dim() == 3 else i_t
    total = 0.0
    for m, e0 in zip(models, targets):
        e = m(x.to(_model_dtype(m, x.dtype)))
        cos = F.cosine_similarity(e, e0.to(e).expand_as(e), dim=-1)
        total = total + (1.0 - cos).mean()
    return (total / len(models)).to(i_t.dtype)


# --- totals --------------------------------------------------------------------

G_TERMS = ("g_tex_adv", "g_img_adv", "makeup", "makeup_uv", "per", "att")
D_TERMS = ("d_tex_adv", "d_img_adv")


def total_losses(components, w=None):
    """Weighted generator and discriminator objectives.

    ``components`` maps names in ``G_TERMS + D_TERMS`` to scalars; missing or
    ``None`` entries count as zero.
    """
    w = w or LossWeights()
    c = {k: (0.0 if components.get(k) is None else components[k]) for k in G_TERMS + D_TERMS}
    unknown = set(components) - set(G_TERMS + D_TERMS)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    l_g = (w.lambda_a * c["g_tex_adv"] + w.lambda_a * c["g_img_adv"] + w.lambda_m * c["makeup"]
           + w.lambda_m_uv * c["makeup_uv"] + w.lambda_p * c["per"] + w.lambda_t * c["att"])
    l_d = w.lambda_a * c["d_tex_adv"] + w.lambda_a * c["d_img_adv"]
    return l_g, l_d
