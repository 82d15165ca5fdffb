"""Synthetic datasets with exact ground truth, plus verification oracles.

Every record is a deformed template rendered at a random weak-perspective
camera by the hard rasterizer, so masks, cameras, deformations and keypoint
locations are known exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import mesh as mesh_mod
from .camera import project, view_quaternion
from .errors import DataValidationError, InvalidArgumentError, NumericalError

DATASET_FORMAT = "canon3d-dataset"
DATASET_VERSION = 1

ARCHETYPES = ("beak", "tail", "body", "crest", "belly", "flat")
PALETTE = (
    ((0.85, 0.35, 0.20), (0.95, 0.85, 0.30)),
    ((0.20, 0.45, 0.80), (0.90, 0.90, 0.90)),
    ((0.25, 0.65, 0.30), (0.55, 0.25, 0.60)),
    ((0.60, 0.60, 0.60), (0.15, 0.15, 0.15)),
    ((0.90, 0.55, 0.70), (0.30, 0.70, 0.75)),
    ((0.55, 0.40, 0.25), (0.80, 0.80, 0.50)),
)
PATCH_DIRECTIONS = (
    (0.0, 0.0, 1.0),
    (0.0, 0.0, -1.0),
    (0.0, 1.0, 0.0),
    (0.0, -1.0, 0.0),
    (1.0, 0.0, 0.0),  # mirrored onto both flanks
    (0.0, 0.7071, 0.7071),
)


# ---------------------------------------------------------------- oracles


def finite_difference(f, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat float vector."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def brute_force_dt(mask) -> np.ndarray:
    """Distance to the nearest foreground pixel by scanning every pair."""
    m = np.asarray(mask) > 0.5
    h, w = m.shape
    if not m.any():
        return np.full((h, w), float(h + w))
    fg = np.argwhere(m).astype(np.float64)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h, w))
    for r in range(h):
        d2 = (rr[r][:, None] - fg[None, :, 0]) ** 2 + (cc[r][:, None] - fg[None, :, 1]) ** 2
        out[r] = np.sqrt(d2.min(axis=1))
    return out


def hard_rasterize(uv, depth, faces, colors=None, h: int = 64, w: int = 64, background=(0.0, 0.0, 0.0)):
    """Point-in-triangle coverage at pixel centers with a z-buffer (larger depth wins).

    Returns ``(image (h, w, 3), mask (h, w) bool, zbuffer (h, w))``; the
    z-buffer is ``-inf`` on background.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    xs = -1.0 + (2.0 * np.arange(w) + 1.0) / w
    ys = 1.0 - (2.0 * np.arange(h) + 1.0) / h
    zbuf = np.full((h, w), -np.inf)
    image = np.empty((h, w, 3))
    image[:] = np.asarray(background, dtype=np.float64)
    fid = np.full((h, w), -1, dtype=np.int64)
    for f, (a, b, c) in enumerate(faces):
        pa, pb, pc = uv[a], uv[b], uv[c]
        area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(area) < 1e-14:
            continue
        lo = np.minimum(np.minimum(pa, pb), pc)
        hi = np.maximum(np.maximum(pa, pb), pc)
        c0 = max(0, int(math.ceil((lo[0] + 1.0) * w / 2.0 - 0.5)))
        c1 = min(w - 1, int(math.floor((hi[0] + 1.0) * w / 2.0 - 0.5)))
        r0 = max(0, int(math.ceil((1.0 - hi[1]) * h / 2.0 - 0.5)))
        r1 = min(h - 1, int(math.floor((1.0 - lo[1]) * h / 2.0 - 0.5)))
        if c0 > c1 or r0 > r1:
            continue
        px, py = np.meshgrid(xs[c0:c1 + 1], ys[r0:r1 + 1])
        # barycentric weights of a, b, c
        wa = ((pb[0] - px) * (pc[1] - py) - (pb[1] - py) * (pc[0] - px)) / area
        wb = ((pc[0] - px) * (pa[1] - py) - (pc[1] - py) * (pa[0] - px)) / area
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        z = wa * depth[a] + wb * depth[b] + wc * depth[c]
        sub = zbuf[r0:r1 + 1, c0:c1 + 1]
        win = inside & (z > sub)
        sub[win] = z[win]
        fid[r0:r1 + 1, c0:c1 + 1][win] = f
    mask = fid >= 0
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64)
        image[mask] = colors[fid[mask]]
    return image, mask, zbuf


def vertex_visibility(uv, depth, faces, h: int, w: int, tol: float = 0.05) -> np.ndarray:
    """A vertex is visible when the z-buffer at its nearest pixel is not in front of it."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    _, _, zbuf = hard_rasterize(uv, depth, faces, None, h, w)
    col = np.rint(((uv[:, 0] + 1.0) * w - 1.0) / 2.0).astype(np.int64)
    row = np.rint(((1.0 - uv[:, 1]) * h - 1.0) / 2.0).astype(np.int64)
    inb = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    vis = np.zeros(len(uv), dtype=bool)
    z = zbuf[row[inb], col[inb]]
    vis[inb] = np.isfinite(z) & (z - depth[inb] <= tol)
    return vis


def ndc_to_pixel(uv, h: int, w: int) -> np.ndarray:
    """NDC (x right, y up) to (col, row) pixel coordinates of pixel centers."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([((uv[..., 0] + 1.0) * w - 1.0) / 2.0, ((1.0 - uv[..., 1]) * h - 1.0) / 2.0], axis=-1)


def farthest_point_keypoints(vertices, k: int = 12) -> np.ndarray:
    """Greedy farthest-point subset, seeded at the vertex furthest along +z."""
    v = np.asarray(vertices, dtype=np.float64)
    if not 1 <= k <= len(v):
        raise InvalidArgumentError("keypoint count out of range")
    chosen = [int(np.argmax(v[:, 2] - 1e-9 * np.arange(len(v))))]
    d = np.linalg.norm(v - v[chosen[0]], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(v - v[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


# --------------------------------------------------------- ground truth


def archetype_field(name: str, points: np.ndarray) -> np.ndarray:
    """Unit-peak smooth displacement field on unit-sphere points, mirror-symmetric in x."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    one = np.ones_like(x)
    if name == "beak":
        d = np.exp(-(1.0 - z) / 0.3)[:, None] * p
    elif name == "tail":
        d = np.exp(-(1.0 + z) / 0.3)[:, None] * p * np.array([1.0, 0.3, 1.0])
    elif name == "body":
        d = np.stack([x * (1.0 - 0.5 * y * y), 0 * one, 0 * one], axis=1)
    elif name == "crest":
        d = np.exp(-(1.0 - y) / 0.3)[:, None] * p
    elif name == "belly":
        d = np.exp(-(1.0 + y) / 0.4)[:, None] * p
    elif name == "flat":
        d = np.stack([0 * one, -y, 0 * one], axis=1)
    else:
        raise InvalidArgumentError(f"unknown deformation archetype {name!r}")
    peak = np.linalg.norm(d, axis=1).max()
    return d / peak


def _noise_field(points, rng, scale):
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    basis = np.stack([y, z, y * z, x * x - 1.0 / 3.0, y * y - 1.0 / 3.0], axis=1)
    c = rng.normal(size=basis.shape[1]) * scale
    return (basis @ c)[:, None] * p


def _to_free(full, sym: mesh_mod.SymmetryMap) -> np.ndarray:
    """Free coefficients of an (already symmetric) full field."""
    n = len(sym.pairs)
    free = np.zeros((sym.num_free, 3))
    free[:n] = full[sym.pairs[:, 0]]
    free[n:] = full[sym.fixed]
    free[n:, 0] = 0.0
    return free


def _vertex_colors(points, label: int, spec: "SynthSpec") -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if spec.texture_mode == "positional":
        c1, c2 = (np.array(c) for c in PALETTE[0])
        d = np.array(PATCH_DIRECTIONS[label % len(PATCH_DIRECTIONS)])
        d = d / np.linalg.norm(d)
        q = p.copy()
        if d[0] != 0:
            q[:, 0] = np.abs(q[:, 0])
        on = (q @ d) > math.cos(spec.patch_radius)
    else:
        k = 0 if spec.texture_mode == "shared" else label % len(PALETTE)
        c1, c2 = (np.array(c) for c in PALETTE[k])
        on = p[:, 1] > 0.35
    return np.where(on[:, None], c2, c1)


@dataclass
class SynthSpec:
    num_classes: int = 4
    instances_per_class: int = 32
    test_fraction: float = 0.25
    shape_mode: str = "per_class"  # per_class | shared
    archetypes: list = field(default_factory=lambda: list(ARCHETYPES[:4]))
    shared_archetype: str = "beak"
    magnitude: float = 0.3
    noise: float = 0.02
    texture_mode: str = "per_class"  # per_class | shared | positional
    patch_radius: float = 0.7
    azimuth: tuple = (0.0, 360.0)
    elevation: tuple = (-15.0, 15.0)
    scale: tuple = (0.8, 0.95)
    translation: float = 0.05
    image_size: int = 64
    mesh_level: int = 3
    num_keypoints: int = 12
    background: tuple = (0.0, 0.0, 0.0)
    clutter: float = 0.0  # blend weight of a per-instance random background
    clutter_cells: int = 4
    seed: int = 0

    def __post_init__(self):
        self.archetypes = list(self.archetypes)
        self.azimuth = tuple(self.azimuth)
        self.elevation = tuple(self.elevation)
        self.scale = tuple(self.scale)
        self.background = tuple(self.background)

    def class_archetype(self, label: int) -> str:
        if self.shape_mode == "shared":
            return self.shared_archetype
        return self.archetypes[label % len(self.archetypes)]

    def validate(self):
        if self.num_classes < 1 or self.instances_per_class < 1:
            raise InvalidArgumentError("need at least one class and one instance per class")
        if not 0.0 <= self.test_fraction < 1.0:
            raise InvalidArgumentError("test_fraction must lie in [0, 1)")
        if self.shape_mode not in ("per_class", "shared"):
            raise InvalidArgumentError(f"unknown shape_mode {self.shape_mode!r}")
        if self.texture_mode not in ("per_class", "shared", "positional"):
            raise InvalidArgumentError(f"unknown texture_mode {self.texture_mode!r}")
        if self.texture_mode == "positional" and self.num_classes > len(PATCH_DIRECTIONS):
            raise InvalidArgumentError(f"positional textures support at most {len(PATCH_DIRECTIONS)} classes")
        if self.texture_mode == "per_class" and self.num_classes > len(PALETTE):
            raise InvalidArgumentError(f"per-class textures support at most {len(PALETTE)} classes")
        for name in [self.shared_archetype] + self.archetypes:
            if name not in ARCHETYPES:
                raise InvalidArgumentError(f"unknown deformation archetype {name!r}")
        if not 0.0 <= self.clutter <= 1.0 or self.clutter_cells < 1:
            raise InvalidArgumentError("clutter must lie in [0, 1] with at least one cell")
        if not 0.0 < self.magnitude <= 1.0 or self.noise < 0:
            raise InvalidArgumentError("magnitude must be in (0, 1] and noise non-negative")
        # classes must be told apart by shape or by texture
        tpl = mesh_mod.template(self.mesh_level)
        pts = tpl.mesh.vertices
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                da = archetype_field(self.class_archetype(a), pts)
                db = archetype_field(self.class_archetype(b), pts)
                shape_gap = np.abs(da - db).max()
                tex_gap = np.abs(_vertex_colors(pts, a, self) - _vertex_colors(pts, b, self)).max()
                if shape_gap == 0 and tex_gap == 0:
                    raise InvalidArgumentError(f"classes {a} and {b} collide (identical shape and texture)")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("azimuth", "elevation", "scale", "background"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthRecord:
    id: str
    split: str
    label: int
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) bool
    camera: np.ndarray  # (7,)
    free_deform: np.ndarray  # (P + Q, 3)
    keypoint_vertices: np.ndarray  # (K,)
    keypoints: np.ndarray  # (K, 2) pixel (col, row)
    keypoint_visible: np.ndarray  # (K,) bool


def instance_geometry(spec: SynthSpec, label: int, rng):
    """Free deformation (P + Q, 3) for one instance of ``label``."""
    tpl = mesh_mod.template(spec.mesh_level)
    pts = tpl.mesh.vertices
    amp = spec.magnitude
    if spec.noise > 0:
        amp = amp * float(np.clip(1.0 + rng.normal() * 2.0 * spec.noise, 0.5, 1.5))
    full = amp * archetype_field(spec.class_archetype(label), pts)
    if spec.noise > 0:
        full = full + _noise_field(pts, rng, spec.noise)
    full = 0.5 * (full + mesh_mod.reflect_vertices(full, tpl.symmetry))
    return _to_free(full, tpl.symmetry)


def random_camera(spec: SynthSpec, rng) -> np.ndarray:
    az = rng.uniform(*spec.azimuth)
    el = rng.uniform(*spec.elevation)
    s = rng.uniform(*spec.scale)
    tx, ty = rng.uniform(-spec.translation, spec.translation, size=2)
    q = view_quaternion(az, el).numpy()
    if q[0] < 0:
        q = -q
    return np.array([s, tx, ty, *q], dtype=np.float64)


def camera_to_params(camera) -> torch.Tensor:
    """(s, tx, ty, qw, qx, qy, qz) -> projection params (log s, tx, ty, q)."""
    c = torch.as_tensor(np.asarray(camera, dtype=np.float64))
    return torch.cat([torch.log(c[:1]), c[1:]])


def render_record(spec: SynthSpec, label: int, camera, free_deform):
    """Hard render of a ground-truth instance; returns (image, mask, uv, depth)."""
    tpl = mesh_mod.template(spec.mesh_level)
    verts = tpl.initial_vertices + mesh_mod.expand_symmetric(np.asarray(free_deform), tpl.symmetry)
    uv, depth = project(camera_to_params(camera), torch.as_tensor(verts))
    uv = uv.numpy()
    depth = depth.numpy()
    vcol = _vertex_colors(tpl.mesh.vertices, label, spec)
    fcol = vcol[tpl.mesh.faces].mean(axis=1)
    image, mask, _ = hard_rasterize(uv, depth, tpl.mesh.faces, fcol, spec.image_size, spec.image_size, spec.background)
    return image, mask, uv, depth


def clutter_field(spec: SynthSpec, rng) -> np.ndarray:
    """Smooth random color field (H, W, 3): bilinear upsampling of a coarse random grid."""
    n = spec.clutter_cells
    grid = torch.as_tensor(rng.uniform(size=(1, 3, n, n)))
    size = spec.image_size
    up = torch.nn.functional.interpolate(grid, size=(size, size), mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0).numpy()


def generate_records(spec: SynthSpec):
    spec.validate()
    tpl = mesh_mod.template(spec.mesh_level)
    kp_ids = farthest_point_keypoints(tpl.mesh.vertices, spec.num_keypoints)
    n_test = int(round(spec.instances_per_class * spec.test_fraction))
    n_train = spec.instances_per_class - n_test
    records = []
    index = 0
    for label in range(spec.num_classes):
        for i in range(spec.instances_per_class):
            rng = np.random.default_rng([spec.seed, index])
            index += 1
            free = instance_geometry(spec, label, rng)
            camera = random_camera(spec, rng)
            image, mask, uv, depth = render_record(spec, label, camera, free)
            if spec.clutter > 0:
                bg = (1.0 - spec.clutter) * np.asarray(spec.background) + spec.clutter * clutter_field(spec, rng)
                image = np.where(mask[..., None], image, bg)
            if not mask.any():
                raise DataValidationError(f"record {label}/{i} rendered an empty mask")
            vis = vertex_visibility(uv, depth, tpl.mesh.faces, spec.image_size, spec.image_size)
            records.append(
                SynthRecord(
                    id=f"c{label}_{i:04d}",
                    split="train" if i < n_train else "test",
                    label=label,
                    image=image,
                    mask=mask,
                    camera=camera,
                    free_deform=free,
                    keypoint_vertices=kp_ids,
                    keypoints=ndc_to_pixel(uv[kp_ids], spec.image_size, spec.image_size),
                    keypoint_visible=vis[kp_ids],
                )
            )
    return records


def _to_u8(x):
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, array):
    a = np.asarray(array)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    elif a.dtype != np.uint8:
        a = _to_u8(a)
    Image.fromarray(a).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def generate_dataset(spec: SynthSpec, out_dir) -> list:
    """Write a dataset to ``out_dir`` and return its records.

    Layout: ``manifest.json`` plus one directory per split holding
    ``<id>.png``, ``<id>_mask.png``, ``<id>_deform.npy`` and ``<id>.json``.
    """
    out = Path(out_dir)
    records = generate_records(spec)
    entries = []
    for r in records:
        d = out / r.split
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / f"{r.id}.png", r.image)
        save_png(d / f"{r.id}_mask.png", r.mask)
        np.save(d / f"{r.id}_deform.npy", r.free_deform)
        side = {
            "id": r.id,
            "label": r.label,
            "camera": [float(c) for c in r.camera],
            "deformation": f"{r.id}_deform.npy",
            "keypoint_vertices": [int(k) for k in r.keypoint_vertices],
            "keypoints": [[float(a), float(b)] for a, b in r.keypoints],
            "keypoint_visible": [bool(v) for v in r.keypoint_visible],
        }
        (d / f"{r.id}.json").write_text(json.dumps(side, indent=1) + "\n")
        entries.append({"id": r.id, "split": r.split, "label": r.label})
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": spec.to_dict(),
        "num_classes": spec.num_classes,
        "image_size": spec.image_size,
        "mesh_level": spec.mesh_level,
        "records": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return records


@dataclass
class Dataset:
    root: Path
    spec: SynthSpec
    num_classes: int
    records: list

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]


def load_dataset(root, splits=("train", "test")) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DataValidationError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataValidationError(f"{path} is not a canon3d dataset manifest")
    spec = SynthSpec.from_dict(manifest["spec"])
    n_cls = int(manifest["num_classes"])
    records = []
    for e in manifest["records"]:
        if e["split"] not in splits:
            continue
        d = root / e["split"]
        side = json.loads((d / f"{e['id']}.json").read_text())
        label = int(side["label"])
        if not 0 <= label < n_cls:
            raise DataValidationError(f"record {e['id']}: label {label} outside [0, {n_cls})")
        image = load_png(d / f"{e['id']}.png").astype(np.float64) / 255.0
        mask = load_png(d / f"{e['id']}_mask.png") > 127
        if not mask.any():
            raise DataValidationError(f"record {e['id']}: empty mask")
        records.append(
            SynthRecord(
                id=e["id"],
                split=e["split"],
                label=label,
                image=image,
                mask=mask,
                camera=np.asarray(side["camera"], dtype=np.float64),
                free_deform=np.load(d / side["deformation"]),
                keypoint_vertices=np.asarray(side["keypoint_vertices"], dtype=np.int64),
                keypoints=np.asarray(side["keypoints"], dtype=np.float64).reshape(-1, 2),
                keypoint_visible=np.asarray(side["keypoint_visible"], dtype=bool),
            )
        )
    return Dataset(root, spec, n_cls, records)
