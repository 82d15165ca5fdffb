"""Template mesh: icosphere construction, mirror symmetry and the Laplacian.

The template lives in canonical coordinates with the bilateral symmetry plane
at x = 0. Topology is fixed after construction; only vertex positions vary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
import torch

from .errors import DegenerateMeshError, InvalidArgumentError, SymmetryViolationError

PHI = (1.0 + 5.0 ** 0.5) / 2.0
MAX_LEVEL = 6
TEMPLATE_SCALE = 0.8


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64, counter-clockwise seen from outside

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise InvalidArgumentError("vertices must be (V, 3) and faces (F, 3)")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidArgumentError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidArgumentError("degenerate face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_faces(self):
        return len(self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        out = np.unique(e, axis=0)
        out.setflags(write=False)
        return out

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.edges) + self.num_faces

    def is_closed_manifold(self) -> bool:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces)


def _base_icosahedron():
    verts = []
    for a in (-1.0, 1.0):
        for b in (-PHI, PHI):
            verts.append((0.0, a, b))
            verts.append((a, b, 0.0))
            verts.append((b, 0.0, a))
    verts = np.array(sorted(verts), dtype=np.float64)
    n = len(verts)
    faces = []
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                d = [
                    np.linalg.norm(verts[i] - verts[j]),
                    np.linalg.norm(verts[j] - verts[k]),
                    np.linalg.norm(verts[i] - verts[k]),
                ]
                if np.allclose(d, 2.0):
                    a, b, c = verts[i], verts[j], verts[k]
                    normal = np.cross(b - a, c - a)
                    if normal @ (a + b + c) > 0:
                        faces.append((i, j, k))
                    else:
                        faces.append((i, k, j))
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return verts, np.array(faces, dtype=np.int64)


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        idx = cache.get(key)
        if idx is None:
            p = np.asarray(verts[key[0]]) + np.asarray(verts[key[1]])
            p = p / np.sqrt(p @ p)
            idx = len(verts)
            verts.append(tuple(p))
            cache[key] = idx
        return idx

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts, dtype=np.float64), np.array(out, dtype=np.int64)


def icosphere(level: int) -> Mesh:
    """Unit icosphere after ``level`` rounds of 4-to-1 subdivision.

    The base icosahedron uses cyclic permutations of (0, +-1, +-phi), so the
    vertex set is exactly invariant under x -> -x at every level.
    """
    if not isinstance(level, (int, np.integer)) or level < 0 or level > MAX_LEVEL:
        raise InvalidArgumentError(f"icosphere level must be an integer in [0, {MAX_LEVEL}], got {level!r}")
    verts, faces = _base_icosahedron()
    for _ in range(int(level)):
        verts, faces = _subdivide(verts, faces)
    return Mesh(verts, faces)


@dataclass(frozen=True, eq=False)
class SymmetryMap:
    """Partition of the template vertices into mirror pairs and on-plane vertices.

    ``pairs[k] = (i, j)`` with x_i > 0 and vertex j the reflection of i.
    Free deformation rows are ordered pairs first, then fixed vertices.
    """

    pairs: np.ndarray  # (P, 2)
    fixed: np.ndarray  # (Q,)
    num_vertices: int
    plane: str = "x=0"

    @property
    def num_free(self):
        return len(self.pairs) + len(self.fixed)

    @cached_property
    def partner(self) -> np.ndarray:
        """Involution mapping each vertex to its mirror image (fixed -> itself)."""
        p = np.arange(self.num_vertices)
        p[self.pairs[:, 0]] = self.pairs[:, 1]
        p[self.pairs[:, 1]] = self.pairs[:, 0]
        return p

    @cached_property
    def _expansion(self):
        # full[v] = free[src[v]] * sign[v]
        n_pairs = len(self.pairs)
        src = np.empty(self.num_vertices, dtype=np.int64)
        sign = np.ones((self.num_vertices, 3), dtype=np.float64)
        src[self.pairs[:, 0]] = np.arange(n_pairs)
        src[self.pairs[:, 1]] = np.arange(n_pairs)
        sign[self.pairs[:, 1], 0] = -1.0
        src[self.fixed] = n_pairs + np.arange(len(self.fixed))
        sign[self.fixed, 0] = 0.0
        return src, sign


def build_symmetry(mesh: Mesh, tol: float = 1e-6) -> SymmetryMap:
    verts = mesh.vertices
    mirrored = verts * np.array([-1.0, 1.0, 1.0])
    best, match = cKDTree(verts).query(mirrored)
    for i in range(len(verts)):
        if best[i] > tol:
            raise SymmetryViolationError(i)
        if match[match[i]] != i:
            raise SymmetryViolationError(i, f"vertex {i} mirror matching is not an involution")
    pairs = [(i, int(match[i])) for i in range(len(verts)) if match[i] != i and verts[i, 0] > 0]
    fixed = [i for i in range(len(verts)) if match[i] == i]
    for i in fixed:
        if abs(verts[i, 0]) > tol:
            raise SymmetryViolationError(i, f"vertex {i} maps to itself but is off the plane")
    return SymmetryMap(
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        fixed=np.array(fixed, dtype=np.int64),
        num_vertices=len(verts),
    )


def expand_symmetric(free_deform, sym: SymmetryMap):
    """Expand (P + Q, 3) free coefficients to a mirror-symmetric (V, 3) field.

    Works on numpy arrays and torch tensors; for tensors the gradient is the
    adjoint of this gather.
    """
    if free_deform.shape[-2] != sym.num_free or free_deform.shape[-1] != 3:
        raise InvalidArgumentError(
            f"free deformation must have shape (..., {sym.num_free}, 3), got {tuple(free_deform.shape)}"
        )
    src, sign = sym._expansion
    if isinstance(free_deform, torch.Tensor):
        idx = torch.as_tensor(src, device=free_deform.device)
        s = torch.as_tensor(sign, dtype=free_deform.dtype, device=free_deform.device)
        return free_deform[..., idx, :] * s
    return np.asarray(free_deform)[..., src, :] * sign


def reflect_vertices(values, sym: SymmetryMap):
    """Reflect a per-vertex field across x = 0 and permute by the pairing."""
    out = values[..., sym.partner, :]
    if isinstance(out, torch.Tensor):
        return out * torch.tensor([-1.0, 1.0, 1.0], dtype=out.dtype)
    return out * np.array([-1.0, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    """Uniform graph Laplacian: 1 on the diagonal, -1/deg(i) on neighbours."""

    matrix: sp.csr_matrix
    _dense_cache: dict = field(default_factory=dict, repr=False)

    def apply(self, values):
        if isinstance(values, torch.Tensor):
            return self.torch_dense(values.dtype) @ values
        return self.matrix @ values

    def torch_dense(self, dtype=torch.float32) -> torch.Tensor:
        m = self._dense_cache.get(dtype)
        if m is None:
            m = torch.as_tensor(self.matrix.toarray(), dtype=dtype)
            self._dense_cache[dtype] = m
        return m


def build_laplacian(mesh: Mesh) -> LaplacianOperator:
    n = mesh.num_vertices
    e = mesh.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise DegenerateMeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])}")
    lap = sp.identity(n, format="csr") - sp.diags(1.0 / deg) @ adj
    return LaplacianOperator(lap.tocsr())


def compose_shape(template, deform):
    """V = template + deformation (numpy or torch)."""
    if tuple(template.shape) != tuple(deform.shape[-2:]):
        raise InvalidArgumentError(
            f"template {tuple(template.shape)} and deformation {tuple(deform.shape)} disagree"
        )
    return template + deform


def canonical_uv(vertices) -> np.ndarray:
    """Equirectangular chart of the unit template: u = azimuth/pi, v = 2*elevation/pi.

    Azimuth is measured from +z toward +x, so mirroring x -> -x maps u -> -u.
    """
    v = np.asarray(vertices, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    x = np.where(np.abs(v[:, 0]) < 1e-12, 0.0, v[:, 0])
    u = np.arctan2(x, v[:, 2]) / np.pi
    # on-plane back vertices: pick +1 so that the chart is deterministic
    u = np.where((x == 0.0) & (v[:, 2] < 0), 1.0, u)
    el = np.arcsin(np.clip(v[:, 1], -1.0, 1.0))
    return np.stack([u, 2.0 * el / np.pi], axis=1)


@dataclass(frozen=True, eq=False)
class Template:
    """Everything derived once from the template topology."""

    level: int
    mesh: Mesh
    symmetry: SymmetryMap
    laplacian: LaplacianOperator
    uv: np.ndarray

    @property
    def initial_vertices(self):
        return TEMPLATE_SCALE * self.mesh.vertices


_TEMPLATES: dict[int, Template] = {}


def template(level: int = 3) -> Template:
    t = _TEMPLATES.get(level)
    if t is None:
        m = icosphere(level)
        t = Template(level, m, build_symmetry(m), build_laplacian(m), canonical_uv(m.vertices))
        _TEMPLATES[level] = t
    return t


def write_obj(path, vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)
