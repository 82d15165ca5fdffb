"""Appearance-flow resampling into the canonical frame.

A flow field holds, for every canonical cell, the normalized source
coordinates ``(x, y)`` to read from, with ``(-1, -1)`` the top-left corner and
``(1, 1)`` the bottom-right corner of the source image (pixel centers at
``-1 + (2i + 1)/n``). Samples outside the source read zeros.

Canonical maps (texture, positional encoding) place column j at
``u = -1 + 2j/(W - 1)`` and row i at ``v = 1 - 2i/(H - 1)``, so the seam
``u = +-1`` and the poles ``v = +-1`` sit on pixel centers.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError


def bilinear_sample(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` (..., H, W, K) at ``flow`` (..., Hw, Ww, 2) with zero padding."""
    h, w = src.shape[-3], src.shape[-2]
    x = ((flow[..., 0] + 1.0) * w - 1.0) / 2.0
    y = ((flow[..., 1] + 1.0) * h - 1.0) / 2.0
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.long()
    y0 = y0.long()
    batch_shape = flow.shape[:-3]
    flat = src.reshape(batch_shape + (h * w, src.shape[-1]))
    out = 0.0
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(batch_shape + (-1,))
            vals = torch.gather(flat, -2, idx[..., None].expand(idx.shape + (src.shape[-1],)))
            vals = vals.reshape(flow.shape[:-1] + (src.shape[-1],))
            out = out + (wx * wy * inb.to(src.dtype))[..., None] * vals
    return out


def identity_flow(h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """Flow whose samples land on the pixel centers of an (h, w) source."""
    xs = -1.0 + (2.0 * torch.arange(w, dtype=dtype) + 1.0) / w
    ys = -1.0 + (2.0 * torch.arange(h, dtype=dtype) + 1.0) / h
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def canonical_grid(h: int, w: int, dtype=torch.float64):
    """(u, v) chart coordinates of every canonical cell, each (h, w)."""
    if h < 2 or w < 2:
        raise InvalidArgumentError("canonical maps need at least 2 rows and 2 columns")
    u = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    v = torch.linspace(1.0, -1.0, h, dtype=dtype)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return uu, vv


def positional_encoding(h: int, w: int, mode: str = "pe4", dtype=torch.float64) -> torch.Tensor:
    """Canonical position map (h, w, C).

    ``pe4``: (cos pi u, sin pi u, cos pi v, sin pi v), continuous across the seam.
    ``pe2``: raw (u, v) coordinates. ``none``: zero channels.
    """
    uu, vv = canonical_grid(h, w, dtype)
    if mode == "pe4":
        return torch.stack(
            [torch.cos(torch.pi * uu), torch.sin(torch.pi * uu), torch.cos(torch.pi * vv), torch.sin(torch.pi * vv)],
            dim=-1,
        )
    if mode == "pe2":
        return torch.stack([uu, vv], dim=-1)
    if mode == "none":
        return torch.zeros(h, w, 0, dtype=dtype)
    raise InvalidArgumentError(f"unknown positional encoding {mode!r}")


def pe_channels(mode: str) -> int:
    return {"pe4": 4, "pe2": 2, "none": 0}[mode]


def build_texture(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Canonical texture (Hw, Ww, 3) read from ``image`` (H, W, 3) along ``flow``."""
    return bilinear_sample(image, flow)


def downsample_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool a (..., Hw, Ww, 2) flow by ``factor`` for feature warping."""
    if factor == 1:
        return flow
    x = flow.movedim(-1, -3)
    lead = x.shape[:-3]
    x = x.reshape((-1,) + x.shape[-3:])
    x = F.avg_pool2d(x, factor)
    return x.reshape(lead + x.shape[-3:]).movedim(-3, -1)


def chart_to_grid(uv: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Convert chart (u, v) to sampler coordinates of an (h, w) canonical map."""
    gx = uv[..., 0] * (w - 1) / w
    gy = -uv[..., 1] * (h - 1) / h
    return torch.stack([gx, gy], dim=-1)


def sample_vertex_colors(texture: torch.Tensor, uv_template) -> torch.Tensor:
    """Per-vertex colors (V, 3) read from a canonical texture at fixed chart coords."""
    h, w = texture.shape[-3], texture.shape[-2]
    uv = torch.as_tensor(uv_template, dtype=texture.dtype)
    grid = chart_to_grid(uv, h, w)
    # sample as a (V, 1) "image" of grid points
    return bilinear_sample(texture, grid[:, None, :])[:, 0, :]
