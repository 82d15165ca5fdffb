"""Soft rasterization of silhouettes and flat-colored meshes.

Coverage of pixel p by face j is ``D_j(p) = sigmoid(sign * d^2 / sigma)`` with
d the distance from p to the projected triangle boundary (sign +1 inside).
Silhouettes aggregate by probabilistic union ``1 - prod_j (1 - D_j)``; colors by
a softmax over depth weighted by coverage, with a background term at ``z_far``.

Only (pixel, face) pairs inside each face's bounding box grown by
``sqrt(cull_logit * sigma)`` are evaluated. Beyond that margin coverage is
below ``sigmoid(-cull_logit)``; the default keeps SoftRas' 1e-4 cutoff.
Set ``cull_logit=None`` for exhaustive evaluation.

Two interchangeable backends: ``"numba"`` (fused compiled kernels with an
explicit adjoint, the default) and ``"torch"`` (plain tensor ops
differentiated by autograd, used as the reference in tests).

Conventions: NDC in [-1, 1]^2 with y up; pixel (row r, col c) has its center at
``(-1 + (2c + 1)/W, 1 - (2r + 1)/H)``, so row 0 is the top of the image.
The camera looks down -z; larger depth is nearer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import _softras
from .errors import InvalidArgumentError, InvalidGeometryError

DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class RasterConfig:
    image_h: int = 64
    image_w: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)
    z_far: float = -10.0
    cull_logit: float | None = math.log(1e4)
    backend: str = "numba"

    def __post_init__(self):
        if not (self.sigma > 0 and self.gamma > 0):
            raise InvalidArgumentError("sigma and gamma must be positive")
        if self.backend not in ("numba", "torch"):
            raise InvalidArgumentError(f"unknown raster backend {self.backend!r}")
        if self.image_h < 1 or self.image_w < 1:
            raise InvalidArgumentError("image dims must be positive")

    def with_size(self, h, w=None):
        return replace(self, image_h=h, image_w=w if w is not None else h)


@dataclass
class RenderOutput:
    silhouette: torch.Tensor  # (..., H, W)
    color: torch.Tensor | None  # (..., H, W, 3)
    occupancy: dict = field(default_factory=dict, repr=False)


def pixel_centers(h, w, dtype=torch.float64):
    """(H, W, 2) NDC coordinates of pixel centers."""
    xs = -1.0 + (2.0 * torch.arange(w, dtype=dtype) + 1.0) / w
    ys = 1.0 - (2.0 * torch.arange(h, dtype=dtype) + 1.0) / h
    return torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1)


def _seg_d2(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    denom = (ex * ex + ey * ey).clamp_min(1e-30)
    t = ((wx * ex + wy * ey) / denom).clamp(0.0, 1.0)
    dx, dy = wx - t * ex, wy - t * ey
    return dx * dx + dy * dy


def _triangle_terms(px, py, ax, ay, bx, by, cx, cy):
    """Squared boundary distance, inside flag, doubled signed area and edge functions.

    All arguments are same-shape component tensors.
    """
    d2 = torch.minimum(
        torch.minimum(_seg_d2(px, py, ax, ay, bx, by), _seg_d2(px, py, bx, by, cx, cy)),
        _seg_d2(px, py, cx, cy, ax, ay),
    )
    # e_k: doubled signed area of the sub-triangle opposite vertex k
    e0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    e1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    e2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return d2, inside, area2, (e0, e1, e2)


def signed_face_distance(pixel, tri):
    """Signed Euclidean distance from ``pixel`` (..., 2) to triangle ``tri`` (..., 3, 2).

    Positive inside, negative outside, zero on the boundary. Degenerate
    triangles return 0.
    """
    pixel = torch.as_tensor(pixel, dtype=torch.float64)
    tri = torch.as_tensor(tri, dtype=torch.float64)
    pixel, tri = torch.broadcast_tensors(pixel[..., None, :], tri)
    d2, inside, area2, _ = _triangle_terms(
        pixel[..., 0, 0], pixel[..., 0, 1], tri[..., 0, 0], tri[..., 0, 1],
        tri[..., 1, 0], tri[..., 1, 1], tri[..., 2, 0], tri[..., 2, 1],
    )
    d = torch.sqrt(d2)
    out = torch.where(inside, d, -d)
    return torch.where(area2.abs() > 2 * DEGENERATE_AREA, out, torch.zeros_like(out))


def _enumerate_pairs(uv, faces, cfg: RasterConfig):
    """Candidate (pixel, face) pairs for every batch element.

    Returns flat indices into the (B*H*W) pixel buffer, into the (B*F) face
    list, and the pixel rows/cols.
    """
    bsz, n_faces = uv.shape[0], faces.shape[0]
    h, w = cfg.image_h, cfg.image_w
    tri = uv.detach()[:, faces]  # (B, F, 3, 2)
    if cfg.cull_logit is None:
        face_idx = torch.arange(bsz * n_faces).repeat_interleave(h * w)
        k = torch.arange(h * w).repeat(bsz * n_faces)
        rows, cols = k // w, k % w
    else:
        margin = math.sqrt(cfg.cull_logit * cfg.sigma)
        lo = tri.amin(dim=2) - margin
        hi = tri.amax(dim=2) + margin
        cmin = torch.ceil((lo[..., 0] + 1.0) * w / 2 - 0.5).clamp(0, w)
        cmax = torch.floor((hi[..., 0] + 1.0) * w / 2 - 0.5).clamp(-1, w - 1)
        rmin = torch.ceil((1.0 - hi[..., 1]) * h / 2 - 0.5).clamp(0, h)
        rmax = torch.floor((1.0 - lo[..., 1]) * h / 2 - 0.5).clamp(-1, h - 1)
        nc = (cmax - cmin + 1).clamp_min(0).long().reshape(-1)
        nr = (rmax - rmin + 1).clamp_min(0).long().reshape(-1)
        counts = nc * nr
        face_idx = torch.repeat_interleave(torch.arange(bsz * n_faces), counts)
        offsets = torch.cumsum(counts, 0) - counts
        k = torch.arange(face_idx.numel()) - offsets[face_idx]
        ncf = nc[face_idx]
        rows = rmin.reshape(-1).long()[face_idx] + k // ncf
        cols = cmin.reshape(-1).long()[face_idx] + k % ncf
    batch = face_idx // n_faces
    pix_idx = batch * (h * w) + rows * w + cols
    return pix_idx, face_idx, rows, cols


def _validate_uv(uv):
    if not bool(torch.isfinite(uv.detach()).all()):
        raise InvalidGeometryError("projected vertices contain non-finite values")


def _pair_geometry(uv, faces, cfg):
    bsz, n_faces = uv.shape[0], faces.shape[0]
    pix_idx, face_idx, rows, cols = _enumerate_pairs(uv, faces, cfg)
    h, w = cfg.image_h, cfg.image_w
    px = -1.0 + (2.0 * cols.to(uv.dtype) + 1.0) / w
    py = 1.0 - (2.0 * rows.to(uv.dtype) + 1.0) / h
    tri = uv[:, faces].reshape(bsz * n_faces, 6).index_select(0, face_idx)
    ax, ay, bx, by, cx, cy = tri.unbind(-1)
    d2, inside, area2, edges = _triangle_terms(px, py, ax, ay, bx, by, cx, cy)
    valid = area2.detach().abs() > 2 * DEGENERATE_AREA
    logit = torch.where(inside, d2, -d2) / cfg.sigma
    return dict(
        pix_idx=pix_idx, face_idx=face_idx, area2=area2, edges=edges,
        valid=valid, logit=logit, n_pixels=bsz * h * w,
    )


def rasterize_silhouette(uv, faces, cfg: RasterConfig):
    """Soft silhouette (..., H, W) of projected vertices ``uv`` (..., N, 2)."""
    return render(uv, None, faces, None, cfg).silhouette


def rasterize_textured(uv, depth, faces, face_colors, cfg: RasterConfig):
    """Soft-z-buffered color image (..., H, W, 3) with flat per-face colors."""
    return render(uv, depth, faces, face_colors, cfg).color


def _torch_silhouette(uv, faces, cfg, g):
    # log(1 - sigmoid(x)) = -softplus(x)
    log_empty = torch.where(g["valid"], -F.softplus(g["logit"]), torch.zeros_like(g["logit"]))
    acc = torch.zeros(g["n_pixels"], dtype=uv.dtype).index_add(0, g["pix_idx"], log_empty)
    return (1.0 - torch.exp(acc)).reshape(uv.shape[0], cfg.image_h, cfg.image_w)


def _check_colors(colors):
    c = colors.detach()
    if bool((c < -1e-9).any() | (c > 1 + 1e-9).any()) or not bool(torch.isfinite(c).all()):
        raise InvalidArgumentError("face colors must lie in [0, 1]")


def _torch_textured(uv, depth, faces, face_colors, cfg, g):
    bsz = uv.shape[0]
    h, w = cfg.image_h, cfg.image_w
    bg = torch.as_tensor(cfg.background, dtype=uv.dtype)
    if g is None:
        return bg.expand(bsz, h, w, 3).clone()
    valid = g["valid"]
    area2 = torch.where(valid, g["area2"], torch.ones_like(g["area2"]))
    bary = torch.stack(g["edges"], dim=-1) / area2[:, None]
    bary = bary.clamp(0.0, 1.0)
    bary = bary / bary.sum(-1, keepdim=True)
    n_faces = faces.shape[0]
    z = depth[:, faces].reshape(bsz * n_faces, 3).index_select(0, g["face_idx"])
    zbar = (bary * z).sum(-1)

    log_d = F.logsigmoid(g["logit"])
    # shift by the largest log-weight (as a depth); exact by shift invariance
    zl = (zbar + cfg.gamma * log_d).detach()
    zmax = torch.full((g["n_pixels"],), cfg.z_far, dtype=uv.dtype)
    zmax = zmax.scatter_reduce(0, g["pix_idx"], torch.where(valid, zl, zmax[:1]), reduce="amax")
    log_w = log_d + (zbar - zmax[g["pix_idx"]]) / cfg.gamma
    wgt = torch.where(valid, torch.exp(log_w), torch.zeros_like(log_w))
    w_bg = torch.exp((cfg.z_far - zmax) / cfg.gamma)

    col = face_colors.reshape(bsz * n_faces, 3).index_select(0, g["face_idx"])
    num = torch.zeros(g["n_pixels"], 3, dtype=uv.dtype).index_add(0, g["pix_idx"], wgt[:, None] * col)
    den = torch.zeros(g["n_pixels"], dtype=uv.dtype).index_add(0, g["pix_idx"], wgt)
    num = num + w_bg[:, None] * bg
    den = den + w_bg
    return (num / den[:, None]).reshape(bsz, h, w, 3)


class _SoftRasterFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, uv, depth, colors, faces, cfg, want_color):
        dtype = uv.dtype
        uv_np = uv.detach().to(torch.float64).numpy()
        bsz = uv_np.shape[0]
        depth_np = depth.detach().to(torch.float64).numpy() if want_color else np.zeros(uv_np.shape[:2])
        col_np = (
            colors.detach().to(torch.float64).numpy()
            if want_color else np.zeros((bsz, faces.shape[0], 3))
        )
        faces_np = faces.numpy()
        bg = np.asarray(cfg.background, dtype=np.float64)
        margin = 1e6 if cfg.cull_logit is None else math.sqrt(cfg.cull_logit * cfg.sigma)
        sil, color, zmax, den = _softras.forward(
            uv_np, depth_np, faces_np, col_np, cfg.image_h, cfg.image_w, cfg.sigma, cfg.gamma,
            margin, cfg.z_far, bg, want_color,
        )
        ctx.saved = (uv_np, depth_np, faces_np, col_np, margin, sil, color, zmax, den)
        ctx.cfg = cfg
        ctx.want_color = want_color
        ctx.dtype = dtype
        return torch.from_numpy(sil).to(dtype), torch.from_numpy(color).to(dtype)

    @staticmethod
    def backward(ctx, g_sil, g_color):
        uv_np, depth_np, faces_np, col_np, margin, sil, color, zmax, den = ctx.saved
        cfg = ctx.cfg
        g_sil = np.zeros_like(sil) if g_sil is None else g_sil.detach().to(torch.float64).numpy()
        if g_color is None or not ctx.want_color:
            g_color = np.zeros_like(color)
        else:
            g_color = g_color.detach().to(torch.float64).numpy()
        g_uv, g_depth, g_col = _softras.backward(
            uv_np, depth_np, faces_np, col_np, cfg.image_h, cfg.image_w, cfg.sigma, cfg.gamma, margin,
            sil, color, zmax, den, np.ascontiguousarray(g_sil), np.ascontiguousarray(g_color),
            ctx.want_color,
        )
        to = lambda a: torch.from_numpy(a).to(ctx.dtype)
        return to(g_uv), (to(g_depth) if ctx.want_color else None), (to(g_col) if ctx.want_color else None), None, None, None


def render(uv, depth, faces, face_colors=None, cfg: RasterConfig = RasterConfig()) -> RenderOutput:
    """Silhouette and (optionally) color of a projected mesh.

    ``uv`` is (N, 2) or (B, N, 2), ``depth`` (N,) or (B, N), ``face_colors``
    (F, 3) or (B, F, 3) in [0, 1].
    """
    uv = torch.as_tensor(uv)
    faces = _as_index(faces)
    batched = uv.dim() == 3
    uv_b = uv if batched else uv[None]
    _validate_uv(uv_b)
    want_color = face_colors is not None
    bsz = uv_b.shape[0]
    if want_color:
        face_colors = torch.as_tensor(face_colors, dtype=uv.dtype)
        _check_colors(face_colors)
        if face_colors.dim() == 2:
            face_colors = face_colors.expand(bsz, -1, -1)
        d_b = torch.as_tensor(depth, dtype=uv.dtype)
        d_b = d_b if batched else d_b[None]
    occ = {}
    if cfg.backend == "numba":
        if want_color:
            sil, color = _SoftRasterFunction.apply(uv_b, d_b, face_colors, faces, cfg, True)
        else:
            dummy = torch.zeros(0, dtype=uv.dtype)
            sil, _ = _SoftRasterFunction.apply(uv_b, dummy, dummy, faces, cfg, False)
            color = None
    else:
        geom = _pair_geometry(uv_b, faces, cfg) if faces.shape[0] else None
        if geom is None:
            sil = torch.zeros(bsz, cfg.image_h, cfg.image_w, dtype=uv.dtype)
        else:
            sil = _torch_silhouette(uv_b, faces, cfg, geom)
            occ = {"pix_idx": geom["pix_idx"], "face_idx": geom["face_idx"], "coverage": torch.sigmoid(geom["logit"])}
        color = _torch_textured(uv_b, d_b, faces, face_colors, cfg, geom) if want_color else None
    if not batched:
        sil = sil[0]
        color = color[0] if color is not None else None
    return RenderOutput(sil, color, occ)


def render_gradients(output: RenderOutput, inputs, grad_silhouette=None, grad_color=None):
    """Backpropagate upstream gradients through a retained forward pass.

    ``inputs`` is a sequence of tensors (e.g. uv, depth, face colors) that
    required grad during the forward; returns one gradient per input
    (zeros where the output does not depend on it).
    """
    outs, grads = [], []
    if grad_silhouette is not None:
        outs.append(output.silhouette)
        grads.append(torch.as_tensor(grad_silhouette, dtype=output.silhouette.dtype))
    if grad_color is not None:
        if output.color is None:
            raise InvalidArgumentError("forward pass did not produce a color image")
        outs.append(output.color)
        grads.append(torch.as_tensor(grad_color, dtype=output.color.dtype))
    res = torch.autograd.grad(outs, list(inputs), grads, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(x) if r is None else r for x, r in zip(inputs, res)]


def _as_index(faces) -> torch.Tensor:
    if isinstance(faces, torch.Tensor):
        return faces.long()
    return torch.tensor(np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def face_colors_from_vertices(vertex_colors, faces):
    """Flat shading: each face takes the mean of its three vertex colors."""
    faces = _as_index(faces)
    return vertex_colors[..., faces, :].mean(dim=-2)
