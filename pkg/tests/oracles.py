"""Independent brute-force reference computations used by the test suite.

Nothing here imports the code paths it checks.
"""

import numpy as np


def ray_occluded(points, tris, eps, chunk=256):
    """Moller-Trumbore: for each point, does a ray toward +z hit any triangle?

    points : (N, 3); tris : (F, 3, 3) rotated world-space corners.
    """
    d = np.array([0.0, 0.0, 1.0])
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    usable = np.abs(det) > 1e-15
    inv = np.where(usable, 1.0 / np.where(usable, det, 1.0), 0.0)
    out = np.zeros(len(points), dtype=bool)
    for lo in range(0, len(points), chunk):
        s = points[lo:lo + chunk, None, :] - v0[None]  # (n, F, 3)
        u = inv * np.einsum("nfj,fj->nf", s, h)
        q = np.cross(s, e1[None])
        v = inv * (q @ d)
        t = inv * np.einsum("fj,nfj->nf", e2, q)
        hit = usable & (u >= -1e-12) & (u <= 1 + 1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > eps)
        out[lo:lo + chunk] = hit.any(axis=1)
    return out


def rotation_yxz(pitch, yaw, roll):
    """Rz(roll) Rx(pitch) Ry(yaw) written out by hand."""
    p, y, r = np.deg2rad([pitch, yaw, roll])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return rz @ rx @ ry


def dense_matvec(mat, vec):
    out = [0.0] * mat.shape[0]
    for i in range(mat.shape[0]):
        acc = 0.0
        for j in range(mat.shape[1]):
            acc += mat[i, j] * vec[j]
        out[i] = acc
    return np.array(out)


def hm_sort_oracle(src, ref, levels=255):
    """Histogram matching by counting: quantize, then map each source value's
    empirical CDF position to the smallest reference level reaching it."""
    qs = np.round(np.clip(src, 0, 1) * levels).astype(int)
    qr = np.sort(np.round(np.clip(ref, 0, 1) * levels).astype(int))
    n, m = len(qs), len(qr)
    out = np.empty(n)
    for i, q in enumerate(qs):
        p = np.sum(qs <= q) / n
        # smallest reference value r with (#ref <= r) / m >= p
        for r in qr:
            if np.sum(qr <= r) / m >= p - 1e-12:
                out[i] = r / levels
                break
    return out


def hm_cdf_oracle(src, ref, levels=255):
    """Histogram matching from sorted samples with exact rational CDFs.

    For a source level q with CDF position p = #(src <= q) / n the answer is the
    k-th smallest reference value, k = ceil(p * m)."""
    from fractions import Fraction
    import math

    qs = [int(round(min(max(v, 0.0), 1.0) * levels)) for v in np.ravel(src)]
    qr = sorted(int(round(min(max(v, 0.0), 1.0) * levels)) for v in np.ravel(ref))
    n, m = len(qs), len(qr)
    ordered = sorted(qs)
    table = {}
    count = 0
    for i, q in enumerate(ordered):
        count = i + 1
        if i + 1 < n and ordered[i + 1] == q:
            continue
        p = Fraction(count, n)
        table[q] = qr[math.ceil(p * m) - 1] / levels
    return np.array([table[q] for q in qs])


def asr_enum(sims, tau):
    hits = 0
    for s in sims:
        if s > tau:
            hits += 1
    return 100.0 * hits / len(sims)


def psr_enum(sims, tau):
    hits = 0
    for s in sims:
        if s < tau:
            hits += 1
    return 100.0 * hits / len(sims)


def rank_enum(sim_matrix, gallery_ids, probe_ids, k):
    ok = 0
    for i in range(sim_matrix.shape[0]):
        order = sorted(range(sim_matrix.shape[1]), key=lambda j: (-sim_matrix[i, j], j))
        if all(gallery_ids[j] != probe_ids[i] for j in order[:k]):
            ok += 1
    return 100.0 * ok / sim_matrix.shape[0]


def region_loss_oracle(gen, ref, mask_gen, mask_ref):
    """RMS distance to the per-channel histogram-matched target, in plain loops."""
    sq = 0.0
    count = 0
    for c in range(gen.shape[0]):
        g = gen[c][mask_gen]
        r = ref[c][mask_ref]
        target = hm_sort_oracle(g, r)
        for a, b in zip(target, g):
            sq += (a - b) ** 2
            count += 1
    return np.sqrt(sq) / np.sqrt(count)


def gan_losses_oracle(p_real_a, p_real_b, p_fake_a, p_fake_b, eps=1e-7):
    """Negative log-likelihoods of the two-discriminator objective, term by term."""
    def nll(p):
        return -np.mean(np.log(np.clip(p, eps, 1.0)))

    def nll_fake(p):
        return -np.mean(np.log(np.clip(1.0 - p, eps, 1.0)))

    loss_d = nll(p_real_a) + nll(p_real_b) + nll_fake(p_fake_a) + nll_fake(p_fake_b)
    loss_g = nll(p_fake_a) + nll(p_fake_b)
    return loss_d, loss_g


def raster_oracle(tri_xy, points, depth=None):
    """Per-point loop over every triangle: top-left ownership, nearest depth wins,
    ties to the lower triangle index. Returns (tri_id, bary)."""
    def owns(p, q):
        dy, dx = q[1] - p[1], q[0] - p[0]
        return dy > 0 or (dy == 0 and dx < 0)

    tri_id = np.full(len(points), -1)
    bary = np.zeros((len(points), 3))
    for n, (x, y) in enumerate(points):
        best = None
        for f, (a, b, c) in enumerate(tri_xy):
            area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if area == 0:
                continue
            sw = area < 0
            b2, c2 = (c, b) if sw else (b, c)
            edges = [(b2, c2), (c2, a), (a, b2)]
            ws = [(q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]) for p, q in edges]
            if not all(w > 0 or (w == 0 and owns(p, q)) for w, (p, q) in zip(ws, edges)):
                continue
            w = np.array(ws) / abs(area)
            if sw:
                w = w[[0, 2, 1]]
            d = 0.0 if depth is None else float(w @ depth[f])
            if best is None or d > best[0]:
                best = (d, f, w)
        if best is not None:
            tri_id[n] = best[1]
            bary[n] = best[2]
    return tri_id, bary
