"""Training objectives: reconstruction, priors, camera posterior and task losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from numba import njit

from .errors import InvalidArgumentError

_INF = 1e20


@njit(cache=True)
def _edt_1d(f, n, out, v, z):
    # lower envelope of parabolas (Felzenszwalb & Huttenlocher)
    k = 0
    v[0] = 0
    z[0] = -_INF
    z[1] = _INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@njit(cache=True)
def _edt_squared(mask):
    h, w = mask.shape
    n = max(h, w)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    g = np.empty((h, w))
    for c in range(w):
        for r in range(h):
            f[r] = 0.0 if mask[r, c] else _INF
        _edt_1d(f, h, out, v, z)
        for r in range(h):
            g[r, c] = out[r]
    res = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            f[c] = g[r, c]
        _edt_1d(f, w, out, v, z)
        for c in range(w):
            res[r, c] = out[c]
    return res


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance (pixels) from each pixel to the nearest foreground pixel.

    Foreground pixels get 0. An all-background mask returns H + W everywhere.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidArgumentError("mask must be 2-D")
    m = m > 0.5
    h, w = m.shape
    if not m.any():
        return np.full((h, w), float(h + w))
    return np.sqrt(_edt_squared(np.ascontiguousarray(m)))


def mask_loss(target, silhouette, dt=None):
    """Squared silhouette error plus distance-transform penalty, both pixel means.

    ``silhouette`` may carry leading batch dims (one entry per camera);
    returns a tensor of matching leading shape.
    """
    target = torch.as_tensor(target, dtype=silhouette.dtype)
    if target.shape != silhouette.shape[-2:]:
        raise InvalidArgumentError(f"mask {tuple(target.shape)} vs silhouette {tuple(silhouette.shape)}")
    if dt is None:
        dt = distance_transform(target.detach().cpu().numpy())
    dt = torch.as_tensor(dt, dtype=silhouette.dtype)
    sq = ((target - silhouette) ** 2).mean(dim=(-2, -1))
    leak = (dt * silhouette).mean(dim=(-2, -1))
    return sq + leak


def _pool(x, k):
    # x: (..., H, W, C) -> average pooled by k
    if k == 1:
        return x
    lead = x.shape[:-3]
    y = x.movedim(-1, -3).reshape((-1,) + (x.shape[-1], x.shape[-3], x.shape[-2]))
    y = F.avg_pool2d(y, k)
    return y.reshape(lead + y.shape[-3:]).movedim(-3, -1)


def multiscale_masked_l1(rendered, image, mask, scales=(1, 2, 4)):
    """Masked mean absolute error averaged over average-pooled pyramid levels."""
    m = mask[..., None]
    a_full = rendered * m
    b_full = image * m
    total = 0.0
    for k in scales:
        a = _pool(a_full, k)
        b = _pool(b_full, k)
        w = _pool(m, k)
        denom = w.sum(dim=(-3, -2, -1)) * rendered.shape[-1]
        err = (a - b).abs().sum(dim=(-3, -2, -1))
        total = total + torch.where(denom > 0, err / denom.clamp_min(1e-12), torch.zeros_like(err))
    return total / len(scales)


def pixel_loss(rendered, image, mask, dist=multiscale_masked_l1):
    """Distance between foreground-masked rendered and observed images.

    ``rendered`` (..., H, W, 3), ``image`` (H, W, 3), ``mask`` (H, W). Any
    callable with the signature of :func:`multiscale_masked_l1` can be used.
    """
    image = torch.as_tensor(image, dtype=rendered.dtype)
    mask = torch.as_tensor(mask, dtype=rendered.dtype)
    return dist(rendered, image, mask)


def smoothness_loss(laplacian, vertices):
    """Mean squared norm of the Laplacian coordinates."""
    lv = laplacian.apply(vertices)
    return (lv ** 2).sum(-1).mean()


def deformation_reg(deform):
    return (deform ** 2).mean()


def camera_posterior(per_camera_loss, sigma_temp):
    """Softmin ``p_m = exp(-L_m/s) / sum_n exp(-L_n/s)``."""
    if not sigma_temp > 0:
        raise InvalidArgumentError("posterior temperature must be positive")
    losses = torch.as_tensor(per_camera_loss)
    if losses.numel() < 1:
        raise InvalidArgumentError("need at least one camera loss")
    return torch.softmax(-losses / sigma_temp, dim=-1)


@dataclass
class LossWeights:
    render: float = 1.0
    smooth: float = 0.1
    reg: float = 0.05
    task: float = 1.0


@dataclass
class LossBreakdown:
    mask: torch.Tensor  # (M,)
    pixel: torch.Tensor  # (M,)
    posterior: torch.Tensor  # (M,)
    smooth: torch.Tensor
    reg: torch.Tensor
    task: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def per_camera(self):
        return self.mask + self.pixel

    def as_record(self) -> dict:
        def vec(t):
            return [float(x) for x in t.detach().reshape(-1)]

        return {
            "mask": vec(self.mask),
            "pixel": vec(self.pixel),
            "p": vec(self.posterior),
            "smooth": float(self.smooth.detach()),
            "reg": float(self.reg.detach()),
            "task": float(self.task.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(mask_l, pixel_l, smooth, reg, task=None, weights: LossWeights | None = None,
               sigma_temp=None, posterior=None) -> LossBreakdown:
    """Posterior-weighted render loss plus weighted priors and task loss.

    The posterior is computed from the detached per-camera losses and never
    receives gradient. Pass ``posterior`` to reuse a fixed one.
    """
    weights = weights or LossWeights()
    per_cam = mask_l + pixel_l
    if posterior is None:
        if sigma_temp is None:
            sigma_temp = float(per_cam.detach().mean()) * 0.1 or 1.0
        posterior = camera_posterior(per_cam.detach(), sigma_temp)
    posterior = posterior.detach().to(per_cam.dtype)
    if task is None:
        task = torch.zeros((), dtype=per_cam.dtype)
    total = (
        weights.render * (posterior * per_cam).sum()
        + weights.smooth * smooth
        + weights.reg * reg
        + weights.task * task
    )
    return LossBreakdown(mask_l, pixel_l, posterior, smooth, reg, task, total, weights)


def cross_entropy(logits, label: int):
    c = logits.shape[-1]
    if not 0 <= int(label) < c:
        raise InvalidArgumentError(f"label {label} outside [0, {c})")
    return -torch.log_softmax(logits, dim=-1)[..., int(label)]


def triplet_loss(anchor, positive, negative, margin: float = 0.3):
    if margin < 0:
        raise InvalidArgumentError("margin must be non-negative")
    d_ap = (anchor - positive).norm(dim=-1)
    d_an = (anchor - negative).norm(dim=-1)
    return torch.clamp(d_ap - d_an + margin, min=0.0)
