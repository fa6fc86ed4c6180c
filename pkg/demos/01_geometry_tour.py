# %% [markdown]
# # A tour of the UV face geometry
#
# A face here is a mesh whose vertices come from a linear morphable model.
# Every mesh produced by one model shares a triangle list, so a single UV
# layout (computed once from the mean shape) gives each texel a fixed
# meaning across all faces. This script walks through that pipeline on the
# built-in toy model and writes a few pictures to ``demo_out/geometry``.

# %%
from pathlib import Path

import numpy as np

from makeup3d.face3d import (
    FacePose,
    UVLayout,
    UVTexture,
    UVUnwrapConfig,
    build_face,
    flip_uv,
    project,
    render,
    sample_uv_texture,
    toy_model,
    unwrap_uv,
    visibility_map,
)
from makeup3d.face3d.io import save_image

out = Path("demo_out/geometry")
out.mkdir(parents=True, exist_ok=True)

# %% [markdown]
# ## Model and layout
#
# The toy model is a bent grid with a nose bump and a handful of identity,
# expression and texture components.

# %%
model = toy_model()
print("vertices", model.mean_shape.size // 3, "triangles", len(model.triangles))

config = UVUnwrapConfig.fit(model.mean_shape, 64)
uv = unwrap_uv(model.mean_shape, config)
layout = UVLayout(uv, model.triangles, 64)
print("covered texels", int(layout.coverage.sum()), "of", 64 * 64)

# %% [markdown]
# ## A random face, posed and rendered
#
# Identity and texture coefficients are drawn at random. The vertex colors
# are scattered into UV space, then the textured mesh is rendered at a yaw
# of 35 degrees.

# %%
rng = np.random.default_rng(0)
coeffs = model.zero_coefficients()
coeffs.alpha_id[:] = rng.normal(size=coeffs.alpha_id.shape)
coeffs.alpha_tex[:] = rng.normal(size=coeffs.alpha_tex.shape)
shape, colors = build_face(model, coeffs)

texture = UVTexture(layout.scatter(layout.interpolate(colors.reshape(-1, 3))), layout.coverage)
pose = FacePose(scale_f=25.0, yaw=35.0, translation_2d=[32.0, 32.0])
image = render(shape, pose, texture, model.triangles, uv, np.full((64, 64, 3), 0.15))
save_image(image, out / "rendered.png")

# %% [markdown]
# ## Visibility
#
# Texels on the far cheek face away from the camera or sit behind the nose.
# Their visibility score is zero, and this is what the generator's
# adjustment module uses to decide where to borrow from the mirrored side.

# %%
vis = visibility_map(shape, pose, model.triangles, uv, config, layout)
cov = layout.coverage
print("mean visibility on covered texels", round(float(vis.values[cov].mean()), 3))
print("hidden covered texels", int(((vis.values == 0) & cov).sum()))
save_image(np.repeat(vis.values[..., None], 3, axis=2), out / "visibility.png")

# %% [markdown]
# ## Back to UV, and the mirror
#
# Sampling the rendered image back into UV space recovers the visible half.
# Flipping the UV map left to right pairs each texel with its mirror, which
# is an involution.

# %%
sampled = sample_uv_texture(image, project(shape, pose), uv, model.triangles, config)
save_image(sampled.texels, out / "sampled_uv.png")
save_image(flip_uv(sampled.texels), out / "sampled_uv_flipped.png")
assert np.array_equal(flip_uv(flip_uv(sampled.texels)), sampled.texels)
print("wrote", sorted(p.name for p in out.iterdir()))
