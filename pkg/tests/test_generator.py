import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from makeup3d.face3d import UVTexture, VisibilityMap, flip_uv
from makeup3d.generator import (
    MakeupAdjustment,
    MakeupGAN,
    MakeupTransfer,
    UVGenerator,
    flip_features,
    generate,
)


def seeded_generator(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return UVGenerator().to(dtype)


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_encoder_zero_input_zero_bias_gives_zero():
    g = seeded_generator()
    for enc in (g.enc_src, g.enc_ref):
        for conv in (enc.conv1, enc.conv2):
            torch.nn.init.zeros_(conv.bias)
    out = g.encode(torch.zeros(1, 3, 64, 64), "source")
    assert torch.count_nonzero(out) == 0


def test_encoder_output_is_quarter_resolution():
    g = seeded_generator()
    assert g.encode(rand(1, 3, 64, 64), "reference").shape == (1, 64, 16, 16)


def test_encoder_unknown_role():
    with pytest.raises(ValueError):
        seeded_generator().encode(rand(1, 3, 16, 16), "target")


def digest(t):
    return hashlib.sha256(t.detach().numpy().tobytes()).hexdigest()


def test_encoder_and_decoder_bytewise_deterministic():
    x = rand(1, 3, 64, 64, seed=3)
    a = seeded_generator(7)
    b = seeded_generator(7)
    assert digest(a.encode(x, "source")) == digest(b.encode(x, "source"))
    z = rand(1, 128, 16, 16, seed=4)
    assert digest(a.dec(z)) == digest(b.dec(z))


def test_source_encoder_independent_of_reference_params():
    g = seeded_generator(1)
    x = rand(1, 3, 32, 32, seed=5)
    before = g.encode(x, "source").detach().clone()
    with torch.no_grad():
        for p in g.enc_ref.parameters():
            p.add_(1.0)
    assert torch.equal(g.encode(x, "source"), before)
    assert all(a.data_ptr() != b.data_ptr() for a, b in zip(g.enc_src.parameters(), g.enc_ref.parameters()))


def test_mam_forced_masks():
    mam = MakeupAdjustment()
    f = torch.randn(2, 64, 8, 8)
    vis = rand(2, 1, 32, 32)
    out1, _ = mam(f, vis, mask_override=torch.ones(1, 1, 1, 1))
    assert torch.equal(out1, f)
    out0, _ = mam(f, vis, mask_override=torch.zeros(1, 1, 1, 1))
    assert torch.equal(out0, flip_features(f))


def test_mam_bias_override_saturates_mask():
    mam = MakeupAdjustment().double()
    with torch.no_grad():
        mam.conv2.weight.zero_()
        mam.conv2.bias.fill_(1e3)
    f = torch.randn(1, 64, 8, 8, dtype=torch.float64)
    out, mask = mam(f, rand(1, 1, 32, 32, dtype=torch.float64))
    assert torch.all(mask == 1.0)
    assert torch.equal(out, f)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_mam_convex_bound(seed):
    torch.manual_seed(seed)
    mam = MakeupAdjustment()
    f = torch.randn(1, 64, 8, 8)
    out, mask = mam(f, torch.rand(1, 1, 32, 32))
    lo = torch.minimum(f, flip_features(f))
    hi = torch.maximum(f, flip_features(f))
    assert torch.all(out >= lo - 1e-6) and torch.all(out <= hi + 1e-6)
    assert torch.all((mask >= 0) & (mask <= 1))


def test_mam_flip_matches_uv_flip():
    f = torch.randn(1, 2, 4, 6)
    want = flip_uv(f[0].permute(1, 2, 0).numpy())
    np.testing.assert_array_equal(flip_features(f)[0].permute(1, 2, 0).numpy(), want)


def test_mtm_rows_stochastic():
    mtm = MakeupTransfer()
    for seed in range(10):
        torch.manual_seed(seed)
        attn = mtm.attention(3 * torch.randn(1, 64, 8, 8))
        assert torch.all(attn >= 0)
        assert torch.allclose(attn.sum(-1), torch.ones(1, 64), atol=1e-6)


def test_mtm_identity_attention_passes_reference():
    mtm = MakeupTransfer()
    f_src, f_hat = torch.randn(1, 64, 8, 8), torch.randn(1, 64, 8, 8)
    out, _ = mtm(f_src, f_hat, attention_override=torch.eye(64))
    assert torch.equal(out[:, 64:], f_hat)
    assert torch.equal(out[:, :64], f_src)


def test_mtm_constant_reference_is_fixed_point():
    mtm = MakeupTransfer().double()
    f_hat = torch.full((1, 64, 8, 8), 0.37, dtype=torch.float64)
    out, _ = mtm(torch.randn(1, 64, 8, 8, dtype=torch.float64), f_hat)
    assert torch.allclose(out[:, 64:], f_hat, atol=1e-12)


def test_decoder_shape_and_range():
    g = seeded_generator(2)
    out = g.dec(10 * torch.randn(2, 128, 16, 16))
    assert out.shape == (2, 3, 64, 64)
    assert torch.all((out >= 0) & (out <= 1))


def test_generate_smoke_and_coverage():
    g = seeded_generator(3)
    cov = np.zeros((64, 64), dtype=bool)
    cov[4:60, 4:60] = True
    t = UVTexture(np.random.default_rng(0).uniform(size=(64, 64, 3)) * cov[..., None], cov)
    out, mask = generate(t, t, VisibilityMap(cov.astype(float)), g)
    assert np.all(np.isfinite(out.texels))
    assert out.texels.min() >= 0 and out.texels.max() <= 1
    assert np.all(out.texels[~cov] == 0)
    assert mask.shape == (16, 16)


def test_generate_mask_cases_swap_reference_pathway():
    g = seeded_generator(4)
    src, ref = rand(1, 3, 32, 32, seed=1), rand(1, 3, 32, 32, seed=2)
    vis = rand(1, 1, 32, 32, seed=3)
    ones, zeros = torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1)
    a, _ = g(src, torch.flip(ref, dims=[-1]), vis, mask_override=ones)
    # flipping the input texture is not the same as flipping features, so
    # compare at feature level where the identity is exact
    _, _, d1 = g(src, ref, vis, mask_override=zeros, return_details=True)
    _, _, d2 = g(src, ref, vis, mask_override=ones, return_details=True)
    assert torch.equal(d1["f_hat"], flip_features(d2["f_ref"]))
    assert torch.equal(d2["f_hat"], d2["f_ref"])
    assert a.shape == src.shape


def test_gradients_reach_every_parameter_group():
    torch.manual_seed(5)
    g = UVGenerator().double()
    src, ref = rand(1, 3, 32, 32, seed=6, dtype=torch.float64), rand(1, 3, 32, 32, seed=7, dtype=torch.float64)
    vis = rand(1, 1, 32, 32, seed=8, dtype=torch.float64)
    out, _ = g(src, ref, vis)
    (out * rand(*out.shape, seed=9, dtype=torch.float64)).sum().backward()
    for name, p in g.named_parameters():
        assert p.grad is not None and torch.count_nonzero(p.grad) > 0, name


def test_generator_finite_difference_16px():
    torch.manual_seed(11)
    g = UVGenerator().double()
    src, ref = rand(1, 3, 16, 16, seed=1, dtype=torch.float64), rand(1, 3, 16, 16, seed=2, dtype=torch.float64)
    vis = rand(1, 1, 16, 16, seed=3, dtype=torch.float64)
    w = rand(1, 3, 16, 16, seed=4, dtype=torch.float64)

    def out():
        return g(src, ref, vis)[0]

    g.zero_grad()
    (out() * w).sum().backward()
    params = list(g.parameters())
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(30):
        p = params[rng.integers(len(params))]
        i = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + h
            up = out()
            flat[i] = old - h
            dn = out()
            flat[i] = old
        # reduce after differencing to keep roundoff below the tolerance
        fd = ((up - dn) * w).sum().item() / (2 * h)
        ad = p.grad.view(-1)[i].item()
        assert abs(ad - fd) <= 1e-4 * max(abs(ad), abs(fd), 1e-9)


def test_gan_parameter_groups_disjoint():
    gan = MakeupGAN()
    g_ids = {id(p) for p in gan.generator.parameters()}
    d_ids = {id(p) for p in gan.discriminator_parameters()}
    assert g_ids and d_ids and not (g_ids & d_ids)
    assert gan.d_img(torch.rand(1, 3, 64, 64)).shape == (1, 1, 8, 8)


def test_spectral_norm_bounds_discriminator_layers():
    from makeup3d.generator import GeneratorConfig, PatchDiscriminator

    torch.manual_seed(6)
    d = PatchDiscriminator()
    for _ in range(30):  # let the power iteration converge
        d(torch.rand(1, 3, 32, 32))
    d.eval()
    for conv in (d.conv1, d.conv2, d.conv3):
        sigma = torch.linalg.matrix_norm(conv.weight.reshape(conv.weight.shape[0], -1), ord=2)
        assert sigma.item() == pytest.approx(1.0, abs=1e-3)
    plain = PatchDiscriminator(spectral_norm=False)
    assert not hasattr(plain.conv1, "parametrizations")
    assert not hasattr(MakeupGAN(GeneratorConfig(disc_spectral_norm=False)).d_img.conv2, "parametrizations")
    out = d(torch.rand(2, 3, 64, 64))
    assert out.shape == (2, 1, 8, 8) and torch.all((out > 0) & (out < 1))
