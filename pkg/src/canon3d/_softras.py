"""Compiled forward/backward kernels for the soft rasterizer.

Same math as the torch path in :mod:`canon3d.renderer`, but fused per
(pixel, face) pair with an explicit adjoint. Faces are visited in index order
and pixels in row-major order, so accumulation is deterministic.
"""

import math

import numpy as np
from numba import njit

DEGENERATE_AREA = 1e-12


@njit(cache=True, inline="always")
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _seg(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    wx = px - ax
    wy = py - ay
    den = ex * ex + ey * ey
    if den < 1e-30:
        den = 1e-30
    t = (wx * ex + wy * ey) / den
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    dx = wx - t * ex
    dy = wy - t * ey
    return dx * dx + dy * dy, t, dx, dy


@njit(cache=True, inline="always")
def _edge(px, py, ax, ay, bx, by):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@njit(cache=True)
def _bbox(ax, ay, bx, by, cx, cy, margin, h, w):
    xmin = min(ax, bx, cx) - margin
    xmax = max(ax, bx, cx) + margin
    ymin = min(ay, by, cy) - margin
    ymax = max(ay, by, cy) + margin
    c0 = max(0, int(math.ceil((xmin + 1.0) * w / 2.0 - 0.5)))
    c1 = min(w - 1, int(math.floor((xmax + 1.0) * w / 2.0 - 0.5)))
    r0 = max(0, int(math.ceil((1.0 - ymax) * h / 2.0 - 0.5)))
    r1 = min(h - 1, int(math.floor((1.0 - ymin) * h / 2.0 - 0.5)))
    return r0, r1, c0, c1


@njit(cache=True)
def _pair(px, py, ax, ay, bx, by, cx, cy, inv_sigma):
    d_ab, t_ab, dx_ab, dy_ab = _seg(px, py, ax, ay, bx, by)
    d_bc, t_bc, dx_bc, dy_bc = _seg(px, py, bx, by, cx, cy)
    d_ca, t_ca, dx_ca, dy_ca = _seg(px, py, cx, cy, ax, ay)
    # nearest edge: 0 = ab, 1 = bc, 2 = ca (first wins on ties)
    k = 0
    d2, t, dx, dy = d_ab, t_ab, dx_ab, dy_ab
    if d_bc < d2:
        k = 1
        d2, t, dx, dy = d_bc, t_bc, dx_bc, dy_bc
    if d_ca < d2:
        k = 2
        d2, t, dx, dy = d_ca, t_ca, dx_ca, dy_ca
    e0 = _edge(px, py, bx, by, cx, cy)
    e1 = _edge(px, py, cx, cy, ax, ay)
    e2 = _edge(px, py, ax, ay, bx, by)
    inside = (e0 >= 0 and e1 >= 0 and e2 >= 0) or (e0 <= 0 and e1 <= 0 and e2 <= 0)
    sign = 1.0 if inside else -1.0
    return sign * d2 * inv_sigma, sign, k, t, dx, dy, e0, e1, e2


@njit(cache=True)
def _bary(e0, e1, e2, area2, z0, z1, z2):
    r0 = e0 / area2
    r1 = e1 / area2
    r2 = e2 / area2
    b0 = min(max(r0, 0.0), 1.0)
    b1 = min(max(r1, 0.0), 1.0)
    b2 = min(max(r2, 0.0), 1.0)
    s = b0 + b1 + b2
    return r0, r1, r2, b0 / s, b1 / s, b2 / s, s, (b0 * z0 + b1 * z1 + b2 * z2) / s


@njit(cache=True)
def forward(uv, depth, faces, colors, h, w, sigma, gamma, margin, z_far, bg, want_color):
    bsz = uv.shape[0]
    nf = faces.shape[0]
    inv_sigma = 1.0 / sigma
    acc = np.zeros((bsz, h, w))
    zmax = np.full((bsz, h, w), z_far)
    num = np.zeros((bsz, h, w, 3))
    den = np.zeros((bsz, h, w))
    for b in range(bsz):
        for f in range(nf):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            ax, ay = uv[b, i0, 0], uv[b, i0, 1]
            bx, by = uv[b, i1, 0], uv[b, i1, 1]
            cx, cy = uv[b, i2, 0], uv[b, i2, 1]
            area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if abs(area2) <= 2 * DEGENERATE_AREA:
                continue
            r0, r1, c0, c1 = _bbox(ax, ay, bx, by, cx, cy, margin, h, w)
            for r in range(r0, r1 + 1):
                py = 1.0 - (2.0 * r + 1.0) / h
                for c in range(c0, c1 + 1):
                    px = -1.0 + (2.0 * c + 1.0) / w
                    lg, _, _, _, _, _, e0, e1, e2 = _pair(px, py, ax, ay, bx, by, cx, cy, inv_sigma)
                    # log(1 - sigmoid(x)) = log_sigmoid(-x)
                    acc[b, r, c] += _log_sigmoid(-lg)
                    if want_color:
                        # stabilizer: largest log-weight expressed as a depth
                        zb = _bary(e0, e1, e2, area2, depth[b, i0], depth[b, i1], depth[b, i2])[7]
                        zl = zb + gamma * _log_sigmoid(lg)
                        if zl > zmax[b, r, c]:
                            zmax[b, r, c] = zl
        if not want_color:
            continue
        for f in range(nf):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            ax, ay = uv[b, i0, 0], uv[b, i0, 1]
            bx, by = uv[b, i1, 0], uv[b, i1, 1]
            cx, cy = uv[b, i2, 0], uv[b, i2, 1]
            area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if abs(area2) <= 2 * DEGENERATE_AREA:
                continue
            r0, r1, c0, c1 = _bbox(ax, ay, bx, by, cx, cy, margin, h, w)
            for r in range(r0, r1 + 1):
                py = 1.0 - (2.0 * r + 1.0) / h
                for c in range(c0, c1 + 1):
                    px = -1.0 + (2.0 * c + 1.0) / w
                    lg, _, _, _, _, _, e0, e1, e2 = _pair(px, py, ax, ay, bx, by, cx, cy, inv_sigma)
                    zb = _bary(e0, e1, e2, area2, depth[b, i0], depth[b, i1], depth[b, i2])[7]
                    wt = math.exp(_log_sigmoid(lg) + (zb - zmax[b, r, c]) / gamma)
                    num[b, r, c, 0] += wt * colors[b, f, 0]
                    num[b, r, c, 1] += wt * colors[b, f, 1]
                    num[b, r, c, 2] += wt * colors[b, f, 2]
                    den[b, r, c] += wt
    sil = 1.0 - np.exp(acc)
    color = np.zeros((bsz, h, w, 3))
    if want_color:
        for b in range(bsz):
            for r in range(h):
                for c in range(w):
                    wb = math.exp((z_far - zmax[b, r, c]) / gamma)
                    d = den[b, r, c] + wb
                    den[b, r, c] = d
                    for k in range(3):
                        color[b, r, c, k] = (num[b, r, c, k] + wb * bg[k]) / d
    return sil, color, zmax, den


@njit(cache=True)
def _add_edge_grad(g, uvg, b, ia, ib, ic, px, py, ax, ay, bx, by, cx, cy):
    """Accumulate g * d(e_k)/d(vertices) for the three edge functions.

    ``g`` holds (g_e0, g_e1, g_e2, g_area2).
    """
    ge0, ge1, ge2, ga = g[0], g[1], g[2], g[3]
    # e(P, Q) = (Qx-Px)(py-Py) - (Qy-Py)(px-Px)
    # dP = (Qy - py, px - Qx), dQ = (py - Py, Px - px)
    # e0 = e(b, c)
    uvg[b, ib, 0] += ge0 * (cy - py)
    uvg[b, ib, 1] += ge0 * (px - cx)
    uvg[b, ic, 0] += ge0 * (py - by)
    uvg[b, ic, 1] += ge0 * (bx - px)
    # e1 = e(c, a)
    uvg[b, ic, 0] += ge1 * (ay - py)
    uvg[b, ic, 1] += ge1 * (px - ax)
    uvg[b, ia, 0] += ge1 * (py - cy)
    uvg[b, ia, 1] += ge1 * (cx - px)
    # e2 = e(a, b)
    uvg[b, ia, 0] += ge2 * (by - py)
    uvg[b, ia, 1] += ge2 * (px - bx)
    uvg[b, ib, 0] += ge2 * (py - ay)
    uvg[b, ib, 1] += ge2 * (ax - px)
    # area2 = e(a, b) evaluated at c
    uvg[b, ia, 0] += ga * (by - cy)
    uvg[b, ia, 1] += ga * (cx - bx)
    uvg[b, ib, 0] += ga * (cy - ay)
    uvg[b, ib, 1] += ga * (ax - cx)
    uvg[b, ic, 0] += ga * (ay - by)
    uvg[b, ic, 1] += ga * (bx - ax)


@njit(cache=True)
def backward(uv, depth, faces, colors, h, w, sigma, gamma, margin, sil, color, zmax, den,
             g_sil, g_color, want_color):
    bsz = uv.shape[0]
    nf = faces.shape[0]
    inv_sigma = 1.0 / sigma
    g_uv = np.zeros_like(uv)
    g_depth = np.zeros_like(depth)
    g_col = np.zeros_like(colors)
    gbuf = np.zeros(4)
    for b in range(bsz):
        for f in range(nf):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            ax, ay = uv[b, i0, 0], uv[b, i0, 1]
            bx, by = uv[b, i1, 0], uv[b, i1, 1]
            cx, cy = uv[b, i2, 0], uv[b, i2, 1]
            area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if abs(area2) <= 2 * DEGENERATE_AREA:
                continue
            z0, z1, z2 = depth[b, i0], depth[b, i1], depth[b, i2]
            r0, r1, c0, c1 = _bbox(ax, ay, bx, by, cx, cy, margin, h, w)
            for r in range(r0, r1 + 1):
                py = 1.0 - (2.0 * r + 1.0) / h
                for c in range(c0, c1 + 1):
                    px = -1.0 + (2.0 * c + 1.0) / w
                    lg, sign, k, t, dx, dy, e0, e1, e2 = _pair(px, py, ax, ay, bx, by, cx, cy, inv_sigma)
                    sg = _sigmoid(lg)
                    # silhouette: S = 1 - exp(sum log(1 - D)); dS/dlogit = (1 - S) * D
                    g_lg = g_sil[b, r, c] * (1.0 - sil[b, r, c]) * sg
                    if want_color:
                        rr0, rr1, rr2, bb0, bb1, bb2, s, zb = _bary(e0, e1, e2, area2, z0, z1, z2)
                        wt = math.exp(_log_sigmoid(lg) + (zb - zmax[b, r, c]) / gamma)
                        dd = den[b, r, c]
                        gn0 = g_color[b, r, c, 0] / dd
                        gn1 = g_color[b, r, c, 1] / dd
                        gn2 = g_color[b, r, c, 2] / dd
                        gd = -(gn0 * color[b, r, c, 0] + gn1 * color[b, r, c, 1] + gn2 * color[b, r, c, 2])
                        g_w = gn0 * colors[b, f, 0] + gn1 * colors[b, f, 1] + gn2 * colors[b, f, 2] + gd
                        g_col[b, f, 0] += gn0 * wt
                        g_col[b, f, 1] += gn1 * wt
                        g_col[b, f, 2] += gn2 * wt
                        g_lg += g_w * wt * (1.0 - sg)
                        g_zb = g_w * wt / gamma
                        g_depth[b, i0] += g_zb * bb0
                        g_depth[b, i1] += g_zb * bb1
                        g_depth[b, i2] += g_zb * bb2
                        # zbar = sum_k b_k z_k with b = clamp(r) / sum(clamp(r))
                        gb0 = g_zb * (z0 - zb) / s
                        gb1 = g_zb * (z1 - zb) / s
                        gb2 = g_zb * (z2 - zb) / s
                        gr0 = gb0 if 0.0 < rr0 < 1.0 else 0.0
                        gr1 = gb1 if 0.0 < rr1 < 1.0 else 0.0
                        gr2 = gb2 if 0.0 < rr2 < 1.0 else 0.0
                        gbuf[0] = gr0 / area2
                        gbuf[1] = gr1 / area2
                        gbuf[2] = gr2 / area2
                        gbuf[3] = -(gr0 * rr0 + gr1 * rr1 + gr2 * rr2) / area2
                        if gbuf[0] != 0.0 or gbuf[1] != 0.0 or gbuf[2] != 0.0:
                            _add_edge_grad(gbuf, g_uv, b, i0, i1, i2, px, py, ax, ay, bx, by, cx, cy)
                    if g_lg == 0.0:
                        continue
                    # logit = sign * |p - q|^2 / sigma with q = P + t (Q - P) on the nearest edge
                    gq = g_lg * sign * inv_sigma * -2.0
                    if k == 0:
                        ja, jb = i0, i1
                    elif k == 1:
                        ja, jb = i1, i2
                    else:
                        ja, jb = i2, i0
                    g_uv[b, ja, 0] += gq * dx * (1.0 - t)
                    g_uv[b, ja, 1] += gq * dy * (1.0 - t)
                    g_uv[b, jb, 0] += gq * dx * t
                    g_uv[b, jb, 1] += gq * dy * t
    return g_uv, g_depth, g_col
