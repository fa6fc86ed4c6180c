"""Triangle rasterization, UV texture extraction, visibility and texture rendering.

Raster space is ``(x, y)`` with x along columns and y along rows (downward);
the sample for pixel/texel ``(row, col)`` sits at ``(col + 0.5, row + 0.5)``.
Coverage follows a top-left style fill rule: a sample exactly on an edge
belongs to exactly one of the two triangles sharing that edge. Among
overlapping triangles the nearest (largest depth) wins, then the lowest
triangle index.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import torch

from .geometry import as_vertices, pose_rotation, project, vertex_normals



@dataclass
class RasterResult:
    tri_id: np.ndarray  # (N,) int, -1 where uncovered
    bary: np.ndarray  # (N, 3) in the triangle's own vertex order
    depth: np.ndarray | None = None  # (N,) winning depth, NaN where uncovered

    @property
    def covered(self):
        return self.tri_id >= 0


def _owns_edge(ax, ay, bx, by):
    dy = by - ay
    dx = bx - ax
    return (dy > 0) | ((dy == 0) & (dx < 0))


def _candidate_pairs(ids, lo, hi, px, py, budget=2_000_000):
    """Yield (triangle, point) index arrays whose point lies in the triangle's bbox.

    Points are bucketed on a uniform grid; each triangle only visits the
    cells its bounding box overlaps.
    """
    if ids.size == 0 or px.size == 0:
        return
    ext = np.maximum(hi[ids] - lo[ids], 0.0)
    cell = max(float(np.median(ext.max(axis=1))), 1e-12)
    finite = np.isfinite(px) & np.isfinite(py)
    if not finite.any():
        return
    x0, y0 = px[finite].min(), py[finite].min()
    ncx = int((px[finite].max() - x0) // cell) + 1
    ncy = int((py[finite].max() - y0) // cell) + 1
    pidx = np.flatnonzero(finite)
    pc = ((py[pidx] - y0) // cell).astype(np.int64) * ncx + ((px[pidx] - x0) // cell).astype(np.int64)
    order = np.argsort(pc, kind="stable")
    sorted_pts = pidx[order]
    starts = np.searchsorted(pc[order], np.arange(ncx * ncy + 1))

    def cell_range(lo_v, hi_v, origin, ncell):
        c0 = np.floor((lo_v - origin) / cell).astype(np.int64)
        c1 = np.floor((hi_v - origin) / cell).astype(np.int64)
        return np.clip(c0, 0, ncell - 1), np.clip(c1, 0, ncell - 1), (c1 >= 0) & (c0 <= ncell - 1)

    cx0, cx1, okx = cell_range(lo[ids, 0], hi[ids, 0], x0, ncx)
    cy0, cy1, oky = cell_range(lo[ids, 1], hi[ids, 1], y0, ncy)
    keep = okx & oky
    ids, cx0, cx1, cy0, cy1 = ids[keep], cx0[keep], cx1[keep], cy0[keep], cy1[keep]
    wx = cx1 - cx0 + 1
    ncells = wx * (cy1 - cy0 + 1)
    # rough pair count per triangle, used to size chunks
    est = ncells * max(1.0, px.size / (ncx * ncy))
    csum = np.cumsum(est)
    cuts = np.searchsorted(csum, np.arange(1, int(csum[-1] // budget) + 1) * budget) + 1
    edges = np.unique(np.clip(np.concatenate([[0], cuts, [ids.size]]), 0, ids.size))
    for lo_i, hi_i in zip(edges[:-1], edges[1:]):
        sl = slice(lo_i, hi_i)
        nc = ncells[sl]
        tri_rep = np.repeat(np.arange(nc.size), nc)
        k = np.arange(tri_rep.size) - np.repeat(np.cumsum(nc) - nc, nc)
        w = wx[sl][tri_rep]
        cells = (cy0[sl][tri_rep] + k // w) * ncx + cx0[sl][tri_rep] + k % w
        counts = starts[cells + 1] - starts[cells]
        if counts.sum() == 0:
            continue
        pair_tri = np.repeat(tri_rep, counts)
        local = np.arange(pair_tri.size) - np.repeat(np.cumsum(counts) - counts, counts)
        pts = sorted_pts[np.repeat(starts[cells], counts) + local]
        tt = ids[sl][pair_tri]
        box = (px[pts] >= lo[tt, 0]) & (px[pts] <= hi[tt, 0]) & (py[pts] >= lo[tt, 1]) & (py[pts] <= hi[tt, 1])
        yield tt[box], pts[box]


def rasterize_points(tri_xy, points, depth=None, valid=None):
    """Find, for every query point, the covering triangle and barycentric weights.

    tri_xy : (F, 3, 2) triangle corners in raster space
    points : (N, 2) query positions
    depth  : optional (F, 3) per-corner depth; enables z-buffering
    valid  : optional (F,) mask of triangles that may be drawn
    """
    tri_xy = np.asarray(tri_xy, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    f = tri_xy.shape[0]
    ok = np.all(np.isfinite(tri_xy), axis=(1, 2))
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    ok &= area != 0
    flip = area < 0
    # positive orientation: swap corners 1 and 2 of negative triangles
    b2 = np.where(flip[:, None], c, b)
    c2 = np.where(flip[:, None], b, c)
    area = np.abs(area)
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)

    own0 = _owns_edge(b2[:, 0], b2[:, 1], c2[:, 0], c2[:, 1])
    own1 = _owns_edge(c2[:, 0], c2[:, 1], a[:, 0], a[:, 1])
    own2 = _owns_edge(a[:, 0], a[:, 1], b2[:, 0], b2[:, 1])

    hit_pt, hit_tri, hit_w = [], [], []
    ids = np.flatnonzero(ok)
    px, py = points[:, 0], points[:, 1]
    for tt, pi in _candidate_pairs(ids, lo, hi, px, py):
        qx, qy = px[pi], py[pi]
        ax_, ay_ = a[tt, 0], a[tt, 1]
        bx_, by_ = b2[tt, 0], b2[tt, 1]
        cx_, cy_ = c2[tt, 0], c2[tt, 1]
        w0 = (cx_ - bx_) * (qy - by_) - (cy_ - by_) * (qx - bx_)
        w1 = (ax_ - cx_) * (qy - cy_) - (ay_ - cy_) * (qx - cx_)
        w2 = (bx_ - ax_) * (qy - ay_) - (by_ - ay_) * (qx - ax_)
        inside = (((w0 > 0) | ((w0 == 0) & own0[tt]))
                  & ((w1 > 0) | ((w1 == 0) & own1[tt]))
                  & ((w2 > 0) | ((w2 == 0) & own2[tt])))
        if not inside.any():
            continue
        w = np.stack([w0, w1, w2], axis=1)[inside] / area[tt[inside], None]
        hit_pt.append(pi[inside])
        hit_tri.append(tt[inside])
        hit_w.append(w)

    tri_id = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    zbuf = None if depth is None else np.full(n, np.nan)
    if not hit_pt:
        return RasterResult(tri_id, bary, zbuf)
    hp = np.concatenate(hit_pt)
    ht = np.concatenate(hit_tri)
    hw = np.concatenate(hit_w)
    # back to each triangle's own corner order
    fl = flip[ht]
    hw[fl] = hw[fl][:, [0, 2, 1]]
    if depth is not None:
        d = np.einsum("ij,ij->i", hw, np.asarray(depth, dtype=np.float64)[ht])
        order = np.lexsort((ht, -d, hp))
    else:
        d = None
        order = np.lexsort((ht, hp))
    hp, ht, hw = hp[order], ht[order], hw[order]
    first = np.ones(hp.size, dtype=bool)
    first[1:] = hp[1:] != hp[:-1]
    tri_id[hp[first]] = ht[first]
    bary[hp[first]] = hw[first]
    if depth is not None:
        zbuf[hp[first]] = d[order][first]
    return RasterResult(tri_id, bary, zbuf)


def grid_centers(height, width):
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)


def bilinear_taps(x, y, height, width):
    """Flat indices (N, 4) and weights (N, 4) for bilinear lookup with edge clamping."""
    fx = np.clip(np.asarray(x) - 0.5, 0.0, width - 1)
    fy = np.clip(np.asarray(y) - 0.5, 0.0, height - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    ax = fx - x0
    ay = fy - y0
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=1)
    return idx, w


def image_to_raster(vertices_2d, height):
    """Image-plane (x right, y up, origin at the bottom-left) to raster (x, y down)."""
    p = np.asarray(vertices_2d, dtype=np.float64)
    return np.stack([p[:, 0], height - p[:, 1]], axis=1)


def uv_to_raster(uv):
    """UV (u=row, v=col) to raster (x=col, y=row)."""
    uv = np.asarray(uv, dtype=np.float64)
    return uv[:, ::-1].copy()


@dataclass
class UVTexture:
    texels: np.ndarray  # (res, res, 3) in [0, 1]
    coverage: np.ndarray  # (res, res) bool

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        if self.texels.shape[:2] != self.coverage.shape:
            raise ValueError("texels and coverage disagree in resolution")

    @property
    def resolution(self):
        return self.coverage.shape[0]

    def tensor(self, dtype=torch.float32):
        """(3, res, res) torch tensor."""
        return torch.as_tensor(self.texels.transpose(2, 0, 1).copy(), dtype=dtype)


@dataclass
class VisibilityMap:
    values: np.ndarray  # (res, res) in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def resolution(self):
        return self.values.shape[0]

    def tensor(self, dtype=torch.float32):
        """(1, res, res) torch tensor."""
        return torch.as_tensor(self.values[None].copy(), dtype=dtype)


class UVLayout:
    """Per-texel triangle assignment of a UV mesh, shared by every face of a model."""

    def __init__(self, uv, triangles, resolution):
        self.uv = np.asarray(uv, dtype=np.float64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if self.triangles.size == 0:
            raise ValueError("empty triangle list")
        self.resolution = int(resolution)
        tri_xy = uv_to_raster(self.uv)[self.triangles]
        r = rasterize_points(tri_xy, grid_centers(self.resolution, self.resolution))
        self.tri_id = r.tri_id
        self.bary = r.bary
        self.coverage = (r.tri_id >= 0).reshape(self.resolution, self.resolution)
        self._texels = np.flatnonzero(r.tri_id >= 0)

    @property
    def covered_index(self):
        """Flat indices of covered texels."""
        return self._texels

    def interpolate(self, per_vertex):
        """Barycentric interpolation of per-vertex values at covered texels -> (n_cov, C)."""
        vals = np.asarray(per_vertex, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        t = self._texels
        corners = self.triangles[self.tri_id[t]]
        return np.einsum("nk,nkc->nc", self.bary[t], vals[corners])

    def scatter(self, values, channels=None):
        """Place per-covered-texel values into a zero (res, res[, C]) array."""
        values = np.asarray(values)
        res = self.resolution
        if values.ndim == 1:
            out = np.zeros(res * res, dtype=values.dtype)
            out[self._texels] = values
            return out.reshape(res, res)
        out = np.zeros((res * res, values.shape[1]), dtype=values.dtype)
        out[self._texels] = values
        return out.reshape(res, res, values.shape[1])


def _layout(uv, triangles, config):
    return UVLayout(uv, triangles, config.resolution)


def sample_uv_texture(image, vertices_2d, uv, triangles, config, layout=None):
    """Pull image colors into UV space by barycentric lookup of projected positions."""
    image = np.asarray(image, dtype=np.float64)
    lay = layout if layout is not None else _layout(uv, triangles, config)
    h, w = image.shape[:2]
    pos = lay.interpolate(image_to_raster(vertices_2d, h))
    idx, wt = bilinear_taps(pos[:, 0], pos[:, 1], h, w)
    flat = image.reshape(h * w, -1)
    colors = np.einsum("nk,nkc->nc", wt, flat[idx])
    texels = lay.scatter(np.clip(colors, 0.0, 1.0))
    return UVTexture(texels, lay.coverage.copy())


def texel_image_positions(vertices_2d, height, layout):
    """Raster-space image position of every covered texel."""
    return layout.interpolate(image_to_raster(vertices_2d, height))


def visibility_map(shape, pose, triangles, uv, config, layout=None, eps=1e-7):
    """Per-texel ``clamp(n_z, 0, 1)`` times a z-buffer visibility bit."""
    values, _ = _visibility(shape, pose, triangles, uv, config, layout, eps)
    return VisibilityMap(values)


def occlusion_bits(shape, pose, triangles, uv, config, layout=None, eps=1e-7):
    """Boolean (res, res) map: texel is covered and not hidden behind other geometry."""
    return _visibility(shape, pose, triangles, uv, config, layout, eps)[1]


def visibility_and_bits(shape, pose, triangles, uv, config, layout=None, eps=1e-7):
    """Both :func:`visibility_map` and :func:`occlusion_bits` from one z-buffer pass."""
    values, bits = _visibility(shape, pose, triangles, uv, config, layout, eps)
    return VisibilityMap(values), bits


def _visibility(shape, pose, triangles, uv, config, layout, eps):
    lay = layout if layout is not None else _layout(uv, triangles, config)
    tri = np.asarray(triangles, dtype=np.int64)
    rot = pose_rotation(pose)
    verts = as_vertices(shape) @ rot.T
    normals = vertex_normals(shape, tri) @ rot.T
    n = lay.interpolate(normals)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    p = lay.interpolate(verts)
    # z-buffer evaluated at each texel's own projected sample position
    zb = rasterize_points(verts[tri][:, :, :2], p[:, :2], depth=verts[tri][:, :, 2])
    extent = np.ptp(verts, axis=0).max()
    unseen = np.isnan(zb.depth)
    front = unseen | (p[:, 2] >= zb.depth - eps * extent)
    nz = np.clip(n[:, 2], 0.0, 1.0)
    values = lay.scatter(nz * front)
    bits = lay.scatter(front.astype(bool)) & lay.coverage
    return values, bits


class RenderPlan:
    """Geometry-only rasterization of a posed face, reusable for any texture.

    Each covered pixel is a fixed bilinear combination of four texels, so
    rendering is linear in the texture and :meth:`texel_jacobian` is exact.
    """

    def __init__(self, shape, pose, triangles, uv, resolution, image_size):
        h, w = image_size
        self.height, self.width = int(h), int(w)
        self.resolution = int(resolution)
        tri = np.asarray(triangles, dtype=np.int64)
        uv = np.asarray(uv, dtype=np.float64)
        verts = as_vertices(shape) @ pose_rotation(pose).T
        p2d = image_to_raster(project(shape, pose), self.height)
        textured = np.all(np.isfinite(uv[tri]), axis=(1, 2))
        r = rasterize_points(p2d[tri], grid_centers(self.height, self.width),
                             depth=verts[tri][:, :, 2])
        hit = r.tri_id >= 0
        hit[hit] = textured[r.tri_id[hit]]
        self.pixels = np.flatnonzero(hit)
        corners = tri[r.tri_id[self.pixels]]
        uvp = np.einsum("nk,nkc->nc", r.bary[self.pixels], uv[corners])
        pos = uv_to_raster(uvp)
        self.taps, self.weights = bilinear_taps(pos[:, 0], pos[:, 1], self.resolution, self.resolution)
        self.mask = np.zeros(self.height * self.width, dtype=bool)
        self.mask[self.pixels] = True
        self.mask = self.mask.reshape(self.height, self.width)
        self._torch_cache = {}

    @classmethod
    def from_config(cls, shape, pose, triangles, uv, config, image_size):
        return cls(shape, pose, triangles, uv, config.resolution, image_size)

    def _torch(self, dtype, device):
        key = (dtype, device)
        if key not in self._torch_cache:
            self._torch_cache[key] = (
                torch.as_tensor(self.pixels, device=device),
                torch.as_tensor(self.taps, device=device),
                torch.as_tensor(self.weights, dtype=dtype, device=device),
                torch.as_tensor(self.mask, dtype=dtype, device=device),
            )
        return self._torch_cache[key]

    def apply(self, texture, background):
        """Differentiable render of a (C, res, res) or (B, C, res, res) tensor over a
        (C, H, W) / (B, C, H, W) background."""
        squeeze = texture.dim() == 3
        tex = texture.unsqueeze(0) if squeeze else texture
        bg = background.unsqueeze(0) if background.dim() == 3 else background
        b, c = tex.shape[:2]
        pix, taps, wts, mask = self._torch(tex.dtype, tex.device)
        flat = tex.reshape(b, c, -1)
        vals = (flat[:, :, taps] * wts).sum(-1)  # (B, C, n_pix)
        face = torch.zeros(b, c, self.height * self.width, dtype=tex.dtype, device=tex.device)
        face = face.index_copy(2, pix, vals).reshape(b, c, self.height, self.width)
        out = face + (1.0 - mask) * bg.to(tex.dtype).expand(b, c, self.height, self.width)
        return out[0] if squeeze else out

    def apply_numpy(self, texels, background):
        """Render an (res, res, C) array over an (H, W, C) background."""
        texels = np.asarray(texels, dtype=np.float64)
        c = texels.shape[2]
        flat = texels.reshape(-1, c)
        out = np.asarray(background, dtype=np.float64).reshape(-1, c).copy()
        out[self.pixels] = np.einsum("nk,nkc->nc", self.weights, flat[self.taps])
        return out.reshape(self.height, self.width, c)

    @cached_property
    def _jac(self):
        rows = np.repeat(self.pixels, 4)
        return sp.csr_matrix(
            (self.weights.ravel(), (rows, self.taps.ravel())),
            shape=(self.height * self.width, self.resolution ** 2),
        )

    def texel_jacobian(self):
        """Sparse ``d pixel / d texel`` (H*W x res*res), identical for every channel."""
        return self._jac


def render(shape, pose, texture, triangles, uv, background):
    """Rasterize the posed face, texture it from ``texture`` and composite over ``background``."""
    background = np.asarray(background, dtype=np.float64)
    plan = RenderPlan(shape, pose, triangles, uv, texture.resolution, background.shape[:2])
    return plan.apply_numpy(texture.texels, background)


def flip_uv(texture_like):
    """Mirror a (res, res[, C]) UV-space array across the bilateral symmetry axis."""
    return np.asarray(texture_like)[:, ::-1].copy()
