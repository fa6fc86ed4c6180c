import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from conftest import smooth_texture
from oracles import dense_matvec, ray_occluded, rotation_yxz

from makeup3d.container import ContainerError
from makeup3d.face3d import (
    ContractError,
    FaceCoefficients,
    FacePose,
    MorphableModel,
    RenderPlan,
    UVTexture,
    UVUnwrapConfig,
    build_face,
    build_face_unclamped,
    flip_uv,
    occlusion_bits,
    project,
    render,
    rotation_matrix,
    sample_uv_texture,
    toy_model,
    unwrap_uv,
    visibility_map,
    yaw_from_rotation,
)
from makeup3d.face3d.io import load_uv_texture, load_visibility, save_uv_texture, save_visibility


def tiny_model(rng, q=10):
    return MorphableModel(
        mean_shape=rng.normal(size=3 * q),
        mean_texture=rng.uniform(0.2, 0.8, size=3 * q),
        basis_id=rng.normal(size=(3 * q, 4)),
        basis_exp=rng.normal(size=(3 * q, 3)),
        basis_tex=0.05 * rng.normal(size=(3 * q, 2)),
        triangles=[[0, 1, 2], [2, 3, 4]],
    )


# --- build_face -------------------------------------------------------------

def test_build_face_zero_coefficients_returns_mean():
    m = tiny_model(np.random.default_rng(0))
    shape, tex = build_face(m, m.zero_coefficients())
    np.testing.assert_array_equal(shape, m.mean_shape)
    np.testing.assert_array_equal(tex, np.clip(m.mean_texture, 0, 1))


def test_build_face_unit_identity_coefficient():
    m = tiny_model(np.random.default_rng(1))
    c = m.zero_coefficients()
    c.alpha_id[0] = 1.0
    shape, _ = build_face(m, c)
    np.testing.assert_allclose(shape, m.mean_shape + m.basis_id[:, 0], atol=1e-15)


def test_build_face_matches_loop_oracle():
    rng = np.random.default_rng(2)
    m = tiny_model(rng)
    c = FaceCoefficients(rng.normal(size=4), rng.normal(size=3), rng.normal(size=2))
    shape, tex = build_face_unclamped(m, c)
    want_shape = m.mean_shape + dense_matvec(m.basis_id, c.alpha_id) + dense_matvec(m.basis_exp, c.alpha_exp)
    want_tex = m.mean_texture + dense_matvec(m.basis_tex, c.alpha_tex)
    np.testing.assert_allclose(shape, want_shape, atol=1e-12)
    np.testing.assert_allclose(tex, want_tex, atol=1e-12)


def test_build_face_dimension_mismatch():
    m = tiny_model(np.random.default_rng(3))
    with pytest.raises(ContractError):
        build_face(m, FaceCoefficients(np.zeros(5), np.zeros(3), np.zeros(2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_build_face_is_linear(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(np.random.default_rng(4))
    c1 = FaceCoefficients(rng.normal(size=4), rng.normal(size=3), rng.normal(size=2))
    c2 = FaceCoefficients(rng.normal(size=4), rng.normal(size=3), rng.normal(size=2))
    c12 = FaceCoefficients(c1.alpha_id + c2.alpha_id, c1.alpha_exp + c2.alpha_exp,
                           c1.alpha_tex + c2.alpha_tex)
    s0, t0 = build_face_unclamped(m, m.zero_coefficients())
    s1, t1 = build_face_unclamped(m, c1)
    s2, t2 = build_face_unclamped(m, c2)
    s12, t12 = build_face_unclamped(m, c12)
    np.testing.assert_allclose(s12 - s0, (s1 - s0) + (s2 - s0), atol=1e-10)
    np.testing.assert_allclose(t12 - t0, (t1 - t0) + (t2 - t0), atol=1e-10)


def test_model_container_round_trip(tmp_path):
    m = toy_model(n_rows=9, n_cols=9)
    m.save(tmp_path / "toy.m3d")
    back = MorphableModel.load(tmp_path / "toy.m3d")
    np.testing.assert_array_equal(back.basis_id, m.basis_id)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    data = (tmp_path / "toy.m3d").read_bytes()
    (tmp_path / "cut.m3d").write_bytes(data[: len(data) // 2])
    with pytest.raises(ContainerError):
        MorphableModel.load(tmp_path / "cut.m3d")


def test_model_rejects_bad_triangle_index():
    rng = np.random.default_rng(5)
    with pytest.raises(ContractError):
        MorphableModel(rng.normal(size=12), rng.uniform(size=12), np.zeros((12, 1)),
                       np.zeros((12, 1)), np.zeros((12, 1)), [[0, 1, 4]])


# --- projection and rotation -------------------------------------------------

def test_project_identity_drops_z():
    v = np.random.default_rng(6).normal(size=(7, 3))
    np.testing.assert_array_equal(project(v, FacePose()), v[:, :2])


def test_project_scale_and_shift():
    v = np.random.default_rng(7).normal(size=(7, 3))
    out = project(v, FacePose(scale_f=2.0, translation_2d=[10, 5]))
    np.testing.assert_allclose(out, 2 * v[:, :2] + [10, 5], atol=1e-14)


def test_rotation_convention_vector():
    # committed convention: yaw=+90 turns +z onto +x
    out = project(np.array([[0.0, 0.0, 1.0]]), FacePose(yaw=90.0))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(rotation_matrix(10, -25, 5), rotation_yxz(10, -25, 5), atol=1e-15)


def test_yaw_from_rotation_examples():
    assert yaw_from_rotation(np.eye(3)) == 0.0
    assert yaw_from_rotation(rotation_yxz(0, 30, 0)) == pytest.approx(30.0, abs=1e-9)
    assert yaw_from_rotation(rotation_yxz(10, -25, 5)) == pytest.approx(-25.0, abs=1e-6)


def test_yaw_from_rotation_rejects_non_rotation():
    with pytest.raises(ContractError):
        yaw_from_rotation(np.diag([1.0, 2.0, 1.0]))


@settings(max_examples=200, deadline=None)
@given(st.floats(-85, 85), st.floats(-60, 60), st.floats(-90, 90))
def test_yaw_round_trip(yaw, pitch, roll):
    assert abs(yaw_from_rotation(rotation_matrix(pitch, yaw, roll)) - yaw) < 1e-6


def test_pose_validation():
    with pytest.raises(ContractError):
        FacePose(scale_f=0.0)
    with pytest.raises(ContractError):
        FacePose(yaw=-180.0)


# --- unwrap ------------------------------------------------------------------

def test_unwrap_on_axis_vertex():
    cfg = UVUnwrapConfig(alpha1=3.0, alpha2=-2.0, beta1=32.0, beta2=20.0, resolution=64)
    uv = unwrap_uv(np.array([[0.0, 0.0, 1.0]]), cfg)
    np.testing.assert_allclose(uv, [[20.0, 32.0]])


def test_unwrap_mirror_symmetry():
    rng = np.random.default_rng(8)
    v = rng.normal(size=(50, 3))
    v[:, 2] = np.abs(v[:, 2]) + 0.1
    cfg = UVUnwrapConfig(alpha1=5.0, alpha2=-2.0, beta1=32.0, beta2=20.0, resolution=64)
    a = unwrap_uv(v, cfg)
    b = unwrap_uv(v * [-1, 1, 1], cfg)
    np.testing.assert_allclose(a[:, 1] - 32.0, -(b[:, 1] - 32.0), atol=1e-12)
    np.testing.assert_array_equal(a[:, 0], b[:, 0])


def test_unwrap_degenerate_vertex_named():
    cfg = UVUnwrapConfig(1, 1, 0, 0, 8)
    with pytest.raises(ContractError, match="vertex 2"):
        unwrap_uv(np.array([[1, 0, 1], [0, 1, 1], [0, 5, 0.0]]), cfg)


def test_unwrap_mean_shape_inside_grid(toy64):
    uv = toy64.uv
    assert np.all(np.isfinite(uv))
    assert np.all((uv >= 0) & (uv < 64))


# --- sampling and rendering ----------------------------------------------------

def test_sample_constant_image(toy64, frontal_pose):
    verts = project(toy64.shape, frontal_pose)
    img = np.full((64, 64, 3), [0.2, 0.4, 0.6])
    t = sample_uv_texture(img, verts, toy64.uv, toy64.triangles, toy64.config)
    np.testing.assert_allclose(t.texels[t.coverage], np.broadcast_to([0.2, 0.4, 0.6], (t.coverage.sum(), 3)))
    assert np.all(t.texels[~t.coverage] == 0)


def test_sample_identity_mapping_is_bilinear_lookup():
    # flat quad whose image positions equal its uv coordinates (raster frame)
    res = 16
    cfg = UVUnwrapConfig(1, 1, 8, 0, res)
    uv = np.array([[1.0, 1.0], [1.0, 15.0], [15.0, 1.0], [15.0, 15.0]])
    tris = np.array([[0, 1, 2], [1, 3, 2]])
    # uv (u=row, v=col) -> image-plane (x=col, y=res-row)
    verts = np.stack([uv[:, 1], res - uv[:, 0]], axis=1)
    img = np.random.default_rng(9).uniform(size=(res, res, 3))
    t = sample_uv_texture(img, verts, uv, tris, cfg)
    rows, cols = np.nonzero(t.coverage)
    np.testing.assert_allclose(t.texels[rows, cols], img[rows, cols], atol=1e-6)
    assert t.coverage.sum() == 14 * 14


def test_sample_empty_triangles():
    with pytest.raises(ValueError):
        sample_uv_texture(np.zeros((4, 4, 3)), np.zeros((3, 2)), np.zeros((3, 2)),
                          np.zeros((0, 3), dtype=int), UVUnwrapConfig(1, 1, 2, 2, 4))


def test_render_constant_texture(toy64, frontal_pose):
    tex = UVTexture(np.full((64, 64, 3), 0.5) * toy64.layout.coverage[..., None], toy64.layout.coverage)
    bg = np.zeros((64, 64, 3))
    out = render(toy64.shape, frontal_pose, tex, toy64.triangles, toy64.uv, bg)
    plan = RenderPlan(toy64.shape, frontal_pose, toy64.triangles, toy64.uv, 64, (64, 64))
    inner = ndimage.binary_erosion(plan.mask, iterations=2)
    np.testing.assert_allclose(out[inner], 0.5, atol=1e-12)
    assert np.all(out[~plan.mask] == 0)


def test_render_texel_gradients_match_finite_differences(toy64, frontal_pose):
    cov = toy64.layout.coverage
    plan = RenderPlan(toy64.shape, frontal_pose, toy64.triangles, toy64.uv, 64, (64, 64))
    tex = torch.tensor(smooth_texture(64, cov).transpose(2, 0, 1), dtype=torch.float64, requires_grad=True)
    bg = torch.zeros(3, 64, 64, dtype=torch.float64)
    img = plan.apply(tex, bg)
    probe = torch.randn(3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    (img * probe).sum().backward()
    rng = np.random.default_rng(10)
    rows, cols = np.nonzero(cov)
    h = 1e-4
    for k in rng.choice(rows.size, 40, replace=False):
        ch = int(rng.integers(3))
        r, c = rows[k], cols[k]
        with torch.no_grad():
            tp = tex.detach().clone()
            tp[ch, r, c] += h
            tm = tex.detach().clone()
            tm[ch, r, c] -= h
            fd = ((plan.apply(tp, bg) - plan.apply(tm, bg)) * probe).sum().item() / (2 * h)
        ad = tex.grad[ch, r, c].item()
        assert abs(ad - fd) <= 1e-5 * max(abs(ad), abs(fd), 1e-8)


def test_render_single_texel_perturbation_is_bilinear_weight(toy64, frontal_pose):
    plan = RenderPlan(toy64.shape, frontal_pose, toy64.triangles, toy64.uv, 64, (64, 64))
    jac = plan.texel_jacobian()
    base = smooth_texture(64, toy64.layout.coverage)
    bg = np.zeros((64, 64, 3))
    eps = 1e-3
    r, c = 32, 20
    bumped = base.copy()
    bumped[r, c, 1] += eps
    delta = (plan.apply_numpy(bumped, bg) - plan.apply_numpy(base, bg))[..., 1].ravel()
    col = jac[:, r * 64 + c].toarray().ravel()
    assert np.count_nonzero(col) > 0
    np.testing.assert_allclose(delta, col * eps, atol=1e-12)


def test_render_sample_round_trip(toy64):
    # image -> UV -> image on a frontal face
    pose = FacePose(scale_f=25.0, translation_2d=[32.0, 32.0])
    yy, xx = np.mgrid[0:64, 0:64] / 64
    img = np.stack([0.5 + 0.2 * np.sin(3 * xx), 0.4 + 0.2 * np.cos(2 * yy), 0.3 + 0.1 * xx], axis=-1)
    verts = project(toy64.shape, pose)
    t = sample_uv_texture(img, verts, toy64.uv, toy64.triangles, toy64.config)
    out = render(toy64.shape, pose, t, toy64.triangles, toy64.uv, np.zeros_like(img))
    plan = RenderPlan(toy64.shape, pose, toy64.triangles, toy64.uv, 64, (64, 64))
    inner = ndimage.binary_erosion(plan.mask, iterations=2)
    assert np.abs(out[inner] - img[inner]).mean() < 2 / 255

    # texture -> image -> UV on interior texels
    tex = UVTexture(smooth_texture(64, t.coverage), t.coverage)
    pose_hi = FacePose(scale_f=50.0, translation_2d=[64.0, 64.0])
    rendered = render(toy64.shape, pose_hi, tex, toy64.triangles, toy64.uv, np.zeros((128, 128, 3)))
    back = sample_uv_texture(rendered, project(toy64.shape, pose_hi), toy64.uv, toy64.triangles, toy64.config)
    interior = ndimage.binary_erosion(t.coverage, iterations=3)
    assert np.abs(back.texels[interior] - tex.texels[interior]).max() < 2 / 255


# --- visibility ------------------------------------------------------------------

def test_visibility_frontal_all_positive(toy64, frontal_pose):
    vis = visibility_map(toy64.shape, frontal_pose, toy64.triangles, toy64.uv, toy64.config, toy64.layout)
    cov = toy64.layout.coverage
    assert np.all(vis.values[cov] > 0)
    assert np.all(vis.values[~cov] == 0)
    assert vis.values.max() <= 1.0


def test_visibility_frontal_symmetric(toy64, frontal_pose):
    vis = visibility_map(toy64.shape, frontal_pose, toy64.triangles, toy64.uv, toy64.config, toy64.layout)
    np.testing.assert_allclose(vis.values, flip_uv(vis.values), atol=1e-6)


def test_visibility_far_cheek_hidden_at_yaw60(toy64):
    pose = FacePose(scale_f=25.0, yaw=60.0, translation_2d=[32.0, 32.0])
    vis = visibility_map(toy64.shape, pose, toy64.triangles, toy64.uv, toy64.config, toy64.layout)
    # positive yaw turns the face toward +x, so the +x cheek (high v) faces away
    far = vis.values[20:44, 52:60][toy64.layout.coverage[20:44, 52:60]]
    assert far.size > 0 and np.all(far == 0)
    near = vis.values[20:44, 8:24][toy64.layout.coverage[20:44, 8:24]]
    assert np.all(near > 0)


@pytest.mark.parametrize("yaw,pitch", [(60.0, 0.0), (35.0, 10.0), (-50.0, -15.0), (0.0, 0.0), (75.0, 5.0)])
def test_occlusion_matches_ray_oracle(small_mesh, yaw, pitch):
    g = small_mesh
    assert g.triangles.shape[0] <= 500
    pose = FacePose(scale_f=25.0, yaw=yaw, pitch=pitch, translation_2d=[32.0, 32.0])
    bits = occlusion_bits(g.shape, pose, g.triangles, g.uv, g.config, g.layout)
    rot = rotation_matrix(pitch, yaw, 0.0)
    verts = g.shape.reshape(-1, 3) @ rot.T
    tris = verts[g.triangles]
    points = g.layout.interpolate(verts)
    extent = np.ptp(verts, axis=0).max()
    want = ~ray_occluded(points, tris, 1e-7 * extent)
    got = bits.ravel()[g.layout.covered_index]
    assert np.array_equal(got, want), f"{np.sum(got != want)} texels disagree"


# --- flip --------------------------------------------------------------------------

def test_flip_involution_and_halves():
    rng = np.random.default_rng(11)
    t = rng.uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(flip_uv(flip_uv(t)), t)
    m = np.zeros((8, 8))
    m[:, 4:] = 1
    np.testing.assert_array_equal(flip_uv(m), 1 - m)
    np.testing.assert_array_equal(flip_uv(t * 2.5 + 1), flip_uv(t) * 2.5 + 1)


def test_flip_symmetric_face_texture(toy64, frontal_pose):
    # mean face of the toy model is bilaterally symmetric in shape and texture
    m = toy64.model
    verts = project(toy64.shape, frontal_pose)
    shape, tex = build_face(m, m.zero_coefficients())
    img = render(shape, frontal_pose,
                 UVTexture(toy64.layout.scatter(toy64.layout.interpolate(tex.reshape(-1, 3))),
                           toy64.layout.coverage),
                 toy64.triangles, toy64.uv, np.zeros((64, 64, 3)))
    t = sample_uv_texture(img, verts, toy64.uv, toy64.triangles, toy64.config)
    assert np.abs(flip_uv(t.texels) - t.texels).max() < 2 / 255


# --- persistence ---------------------------------------------------------------------

def test_uv_png_round_trip(tmp_path, toy64):
    cov = toy64.layout.coverage
    tex = UVTexture(smooth_texture(64, cov), cov)
    save_uv_texture(tex, tmp_path / "t.png")
    back = load_uv_texture(tmp_path / "t.png")
    np.testing.assert_array_equal(back.coverage, cov)
    assert np.abs(back.texels - tex.texels).max() <= 0.5 / 65535 + 1e-12
    vis = visibility_map(toy64.shape, FacePose(25, 0, 30, 0, [32, 32]), toy64.triangles, toy64.uv,
                         toy64.config, toy64.layout)
    save_visibility(vis, tmp_path / "v.png")
    assert np.abs(load_visibility(tmp_path / "v.png").values - vis.values).max() <= 0.5 / 65535 + 1e-12


def test_rasterizer_matches_loop_oracle_with_shared_edges():
    from oracles import raster_oracle

    from makeup3d.face3d import rasterize_points
    from makeup3d.face3d.raster import grid_centers

    rng = np.random.default_rng(12)
    # integer-corner triangles on a lattice put many samples exactly on shared edges
    tris = rng.integers(0, 12, size=(40, 3, 2)).astype(float)
    pts = np.concatenate([grid_centers(12, 12), rng.integers(0, 13, size=(80, 2)).astype(float),
                          rng.uniform(-1, 13, size=(80, 2))])
    depth = rng.integers(0, 3, size=(40, 3)).astype(float)
    for d in (None, depth):
        got = rasterize_points(tris, pts, depth=d)
        want_id, want_bary = raster_oracle(tris, pts, d)
        np.testing.assert_array_equal(got.tri_id, want_id)
        np.testing.assert_allclose(got.bary, want_bary, atol=1e-12)
