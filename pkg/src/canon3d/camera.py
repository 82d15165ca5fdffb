"""Weak-perspective cameras with quaternion rotation.

A pose is stored as a 7-vector ``(log s, tx, ty, qw, qx, qy, qz)`` so that the
scale stays positive under unconstrained optimization. The quaternion may be
unnormalized in storage; every rotation path normalizes it first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateRotationError, InvalidArgumentError

DEFAULT_SCALE = 0.9
RIG_ELEVATIONS = (-20.0, 20.0)


@dataclass(frozen=True)
class CameraPose:
    s: float
    t: tuple[float, float]
    r: tuple[float, float, float, float]  # (w, x, y, z)

    def __post_init__(self):
        if not self.s > 0:
            raise InvalidArgumentError(f"camera scale must be positive, got {self.s}")

    def as_tuple(self):
        """The 7-number serialization (s, tx, ty, w, x, y, z)."""
        return (float(self.s), *map(float, self.t), *map(float, self.r))

    @classmethod
    def from_tuple(cls, values):
        v = [float(x) for x in values]
        if len(v) != 7:
            raise InvalidArgumentError("a pose needs exactly 7 numbers")
        return cls(v[0], (v[1], v[2]), (v[3], v[4], v[5], v[6]))

    def to_params(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([math.log(self.s), *self.t, *self.r], dtype=dtype)

    @classmethod
    def from_params(cls, params) -> "CameraPose":
        p = [float(x) for x in torch.as_tensor(params).detach().reshape(-1)]
        return cls(math.exp(p[0]), (p[1], p[2]), (p[3], p[4], p[5], p[6]))


def normalize_quaternion(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = q.norm(dim=-1, keepdim=True)
    if bool((norm.detach() <= eps).any()):
        raise DegenerateRotationError("quaternion norm is numerically zero")
    return q / norm


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix of a unit quaternion (w, x, y, z); column-vector convention."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a * b (rotate by b first, then a)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def rotate(q: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Rotate (..., N, 3) points by unit quaternion(s) (..., 4)."""
    rot = quaternion_to_matrix(q)
    return points @ rot.transpose(-1, -2)


def project(params: torch.Tensor, vertices: torch.Tensor):
    """Weak-perspective projection of ``vertices`` (N, 3) by poses (..., 7).

    Returns ``uv`` (..., N, 2) in NDC and camera-frame ``depth`` (..., N);
    larger depth is nearer to the viewer.
    """
    log_s = params[..., 0:1]
    t = params[..., 1:3]
    q = normalize_quaternion(params[..., 3:7])
    p = rotate(q, vertices)
    uv = torch.exp(log_s)[..., None, :] * p[..., :2] + t[..., None, :]
    return uv, p[..., 2]


def project_pose(pose: CameraPose, vertices):
    """Convenience wrapper: project with a :class:`CameraPose`."""
    v = torch.as_tensor(vertices)
    return project(pose.to_params(v.dtype), v)


def axis_angle_quaternion(axis, angle_rad, dtype=torch.float64) -> torch.Tensor:
    axis = torch.as_tensor(axis, dtype=dtype)
    axis = axis / axis.norm()
    half = torch.as_tensor(angle_rad, dtype=dtype) / 2
    return torch.cat([torch.cos(half).reshape(1), torch.sin(half) * axis])


def view_quaternion(azimuth_deg: float, elevation_deg: float, dtype=torch.float64) -> torch.Tensor:
    """Object rotation seen by a camera at the given azimuth/elevation.

    Azimuth turns about +y; positive elevation tilts the top of the object
    toward the viewer (camera above).
    """
    qa = axis_angle_quaternion([0.0, 1.0, 0.0], math.radians(azimuth_deg), dtype)
    qe = axis_angle_quaternion([1.0, 0.0, 0.0], math.radians(elevation_deg), dtype)
    return quaternion_multiply(qe, qa)


def pose_params(scale, tx, ty, quaternion, dtype=torch.float64) -> torch.Tensor:
    q = torch.as_tensor(quaternion, dtype=dtype)
    return torch.cat([torch.tensor([math.log(scale), tx, ty], dtype=dtype), q])


def init_multiplex(num_cameras: int, seed: int = 0, jitter_deg: float = 0.0, dtype=torch.float64):
    """Per-instance camera hypotheses on a fixed rig, as an (M, 7) tensor.

    Azimuths are uniform on [0, 360), elevations alternate -20/+20 degrees,
    scale 0.9 and zero translation. ``jitter_deg`` adds seeded azimuth noise.
    """
    if num_cameras < 1:
        raise InvalidArgumentError("need at least one camera hypothesis")
    rng = np.random.default_rng(seed)
    out = []
    for m in range(num_cameras):
        az = 360.0 * m / num_cameras
        if jitter_deg:
            az += float(rng.uniform(-jitter_deg, jitter_deg))
        el = RIG_ELEVATIONS[m % 2] if num_cameras > 1 else 0.0
        out.append(pose_params(DEFAULT_SCALE, 0.0, 0.0, view_quaternion(az, el, dtype), dtype))
    return torch.stack(out)


def geodesic_angle(q1, q2) -> torch.Tensor:
    """Rotation angle (radians) between two quaternions; q and -q coincide."""
    q1 = torch.as_tensor(q1, dtype=torch.float64)
    q2 = torch.as_tensor(q2, dtype=torch.float64)
    q1 = q1 / q1.norm(dim=-1, keepdim=True)
    q2 = q2 / q2.norm(dim=-1, keepdim=True)
    dot = (q1 * q2).sum(-1).abs().clamp(max=1.0)
    return 2.0 * torch.acos(dot)
