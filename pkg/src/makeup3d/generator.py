"""UV-space makeup generator and patch discriminators.

Tensors are NCHW. The texture column axis (last dim) is the cylindrical
angle, so mirroring a face is ``torch.flip(x, dims=[-1])``.

Widths: encoders 3->32->64 (two stride-2 3x3 convs), adjustment module
65->32->1, transfer projections 64->32 (1x1), decoder 128->64->32->3.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .face3d import UVTexture, VisibilityMap

SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    enc_channels: tuple = (32, 64)
    mam_hidden: int = 32
    mtm_channels: int = 32
    dec_channels: tuple = (64, 32)
    disc_channels: tuple = (32, 64)
    disc_spectral_norm: bool = True

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def flip_features(x):
    return torch.flip(x, dims=[-1])


class TextureEncoder(nn.Module):
    def __init__(self, widths=(32, 64)):
        super().__init__()
        self.conv1 = nn.Conv2d(3, widths[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), SLOPE)
        return F.leaky_relu(self.conv2(x), SLOPE)


class MakeupAdjustment(nn.Module):
    """Visibility-guided fusion of reference features with their mirror image."""

    def __init__(self, channels=64, hidden=32):
        super().__init__()
        self.conv1 = nn.Conv2d(channels + 1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, f_ref, visibility, mask_override=None):
        vis = F.adaptive_avg_pool2d(visibility, f_ref.shape[-2:])
        if mask_override is None:
            h = F.leaky_relu(self.conv1(torch.cat([f_ref, vis], dim=1)), SLOPE)
            mask = torch.sigmoid(self.conv2(h))
        else:
            mask = mask_override.expand(f_ref.shape[0], 1, *f_ref.shape[-2:]).to(f_ref)
        f_hat = mask * f_ref + (1.0 - mask) * flip_features(f_ref)
        return f_hat, mask


class MakeupTransfer(nn.Module):
    """Spatial attention from source positions into the repaired reference features."""

    def __init__(self, channels=64, proj=32):
        super().__init__()
        self.to_p = nn.Conv2d(channels, proj, 1)
        self.to_q = nn.Conv2d(channels, proj, 1)

    def attention(self, f_src):
        b = f_src.shape[0]
        p = self.to_p(f_src).flatten(2).transpose(1, 2)  # (B, hw, proj)
        q = self.to_q(f_src).flatten(2)  # (B, proj, hw)
        return torch.softmax(torch.bmm(p, q), dim=-1).reshape(b, p.shape[1], -1)

    def forward(self, f_src, f_hat, attention_override=None):
        b, c, h, w = f_hat.shape
        attn = self.attention(f_src) if attention_override is None else attention_override.to(f_hat)
        if attn.dim() == 2:
            attn = attn.expand(b, -1, -1)
        ref = f_hat.flatten(2).transpose(1, 2)  # (B, hw, C)
        f_m = torch.bmm(attn, ref).transpose(1, 2).reshape(b, c, h, w)
        return torch.cat([f_src, f_m], dim=1), attn


class TextureDecoder(nn.Module):
    def __init__(self, in_channels=128, widths=(64, 32)):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(in_channels, widths[0], 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(widths[0], widths[1], 4, stride=2, padding=1)
        self.out = nn.Conv2d(widths[1], 3, 3, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.up1(x), SLOPE)
        x = F.leaky_relu(self.up2(x), SLOPE)
        return torch.sigmoid(self.out(x))


class UVGenerator(nn.Module):
    def __init__(self, config=GeneratorConfig()):
        super().__init__()
        self.config = config
        c = config.enc_channels[-1]
        self.enc_src = TextureEncoder(config.enc_channels)
        self.enc_ref = TextureEncoder(config.enc_channels)
        self.mam = MakeupAdjustment(c, config.mam_hidden)
        self.mtm = MakeupTransfer(c, config.mtm_channels)
        self.dec = TextureDecoder(2 * c, config.dec_channels)

    def encode(self, texture, role):
        if role == "source":
            return self.enc_src(texture)
        if role == "reference":
            return self.enc_ref(texture)
        raise ValueError(f"unknown encoder role {role!r}")

    def forward(self, t_src, t_ref, vis_ref, coverage=None, mask_override=None,
                attention_override=None, return_details=False):
        """Transfer makeup from ``t_ref`` onto ``t_src``.

        t_src, t_ref : (B, 3, R, R); vis_ref : (B, 1, R, R); coverage : (B|1, 1, R, R)
        Returns ``(t_t, mask)``; with ``return_details`` also the intermediate features.
        """
        f_src = self.enc_src(t_src)
        f_ref = self.enc_ref(t_ref)
        f_hat, mask = self.mam(f_ref, vis_ref, mask_override)
        combined, attn = self.mtm(f_src, f_hat, attention_override)
        out = self.dec(combined)
        if coverage is not None:
            out = out * coverage.to(out)
        if return_details:
            return out, mask, {"f_src": f_src, "f_ref": f_ref, "f_hat": f_hat,
                               "attention": attn, "combined": combined}
        return out, mask


class PatchDiscriminator(nn.Module):
    """Three stride-2 convolutions ending in per-patch real probabilities.

    Spectral normalization keeps the discriminators from running away from
    the generator at batch size 1.
    """

    def __init__(self, widths=(32, 64), spectral_norm=True):
        super().__init__()
        wrap = nn.utils.parametrizations.spectral_norm if spectral_norm else (lambda m: m)
        self.conv1 = wrap(nn.Conv2d(3, widths[0], 4, stride=2, padding=1))
        self.conv2 = wrap(nn.Conv2d(widths[0], widths[1], 4, stride=2, padding=1))
        self.conv3 = wrap(nn.Conv2d(widths[1], 1, 4, stride=2, padding=1))

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), SLOPE)
        x = F.leaky_relu(self.conv2(x), SLOPE)
        return torch.sigmoid(self.conv3(x))


class MakeupGAN(nn.Module):
    """Generator plus the three discriminators, as one parameter tree."""

    def __init__(self, config=GeneratorConfig()):
        super().__init__()
        self.config = config
        self.generator = UVGenerator(config)
        sn = config.disc_spectral_norm
        self.d_tex_src = PatchDiscriminator(config.disc_channels, sn)
        self.d_tex_ref = PatchDiscriminator(config.disc_channels, sn)
        self.d_img = PatchDiscriminator(config.disc_channels, sn)

    def discriminator_parameters(self):
        for d in (self.d_tex_src, self.d_tex_ref, self.d_img):
            yield from d.parameters()


def _as_batch(t, channels):
    if isinstance(t, UVTexture):
        return t.tensor()[None]
    if isinstance(t, VisibilityMap):
        return t.tensor()[None]
    t = torch.as_tensor(t)
    return t[None] if t.dim() == 3 else t


def generate(t_src, t_ref, vis_ref, model, **kwargs):
    """Convenience wrapper on :class:`UVTexture` / :class:`VisibilityMap` inputs.

    Returns ``(UVTexture, mask array)``; coverage is copied from ``t_src``.
    """
    if t_src.resolution != t_ref.resolution or t_ref.resolution != vis_ref.resolution:
        raise ValueError("source, reference and visibility resolutions differ")
    dtype = next(model.parameters()).dtype
    src = _as_batch(t_src, 3).to(dtype)
    ref = _as_batch(t_ref, 3).to(dtype)
    vis = _as_batch(vis_ref, 1).to(dtype)
    cov = torch.as_tensor(t_src.coverage, dtype=dtype)[None, None]
    with torch.no_grad():
        out, mask = model(src, ref, vis, coverage=cov, **kwargs)
    texels = out[0].permute(1, 2, 0).double().numpy()
    return UVTexture(texels, t_src.coverage.copy()), mask[0, 0].double().numpy()
