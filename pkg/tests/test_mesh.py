import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from canon3d import mesh
from canon3d.errors import DegenerateMeshError, InvalidArgumentError, SymmetryViolationError
from canon3d.synth import finite_difference
from conftest import rel_err

floats = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("level,nv,nf", [(0, 12, 20), (1, 42, 80), (3, 642, 1280)])
def test_icosphere_counts(level, nv, nf):
    m = mesh.icosphere(level)
    assert (m.num_vertices, m.num_faces) == (nv, nf)


def test_counts_follow_euler_relation():
    # F quadruples per level; E = 3F/2; V = E - F + 2
    for level in range(5):
        f = 20 * 4 ** level
        e = 3 * f // 2
        m = mesh.icosphere(level)
        assert m.num_faces == f
        assert len(m.edges) == e
        assert m.num_vertices == e - f + 2


@pytest.mark.parametrize("level", range(7))
def test_closed_manifold_euler_two(level):
    m = mesh.icosphere(level)
    assert m.euler_characteristic() == 2
    assert m.is_closed_manifold()
    assert m.faces.min() >= 0 and m.faces.max() < m.num_vertices
    f = m.faces
    assert np.all((f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2]))


def test_faces_outward_oriented():
    m = mesh.icosphere(2)
    v = m.vertices[m.faces]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all((normal * v.mean(1)).sum(1) > 0)


@pytest.mark.parametrize("level", [-1, 7, 1.5])
def test_icosphere_bad_level(level):
    with pytest.raises(InvalidArgumentError):
        mesh.icosphere(level)


def test_symmetry_counts_level3():
    sym = mesh.template(3).symmetry
    assert len(sym.pairs) == 305
    assert len(sym.fixed) == 32
    assert sym.num_free == 337
    assert 2 * len(sym.pairs) + len(sym.fixed) == 642


def test_symmetry_level0_brute_force():
    m = mesh.icosphere(0)
    sym = mesh.build_symmetry(m)
    v = m.vertices
    # brute-force reflection matching
    for i in range(len(v)):
        d = np.linalg.norm(v - v[i] * np.array([-1.0, 1.0, 1.0]), axis=1)
        j = int(np.argmin(d))
        assert d[j] < 1e-12
        assert sym.partner[i] == j
    assert 2 * len(sym.pairs) + len(sym.fixed) == 12
    assert np.array_equal(sym.partner[sym.partner], np.arange(12))


@pytest.mark.parametrize("level", [1, 3])
def test_symmetry_geometry(level):
    m = mesh.icosphere(level)
    sym = mesh.build_symmetry(m)
    v = m.vertices
    i, j = sym.pairs[:, 0], sym.pairs[:, 1]
    assert np.abs(v[i] * np.array([-1.0, 1.0, 1.0]) - v[j]).max() < 1e-9
    assert np.abs(v[sym.fixed, 0]).max() < 1e-9


def test_symmetry_violation_names_vertex():
    m = mesh.icosphere(0)
    v = m.vertices.copy()
    v[3] += np.array([0.05, 0.0, 0.0])
    with pytest.raises(SymmetryViolationError) as err:
        mesh.build_symmetry(mesh.Mesh(v, m.faces))
    assert err.value.index in (3, int(mesh.build_symmetry(m).partner[3]))


def test_expand_examples():
    sym = mesh.template(3).symmetry
    assert np.all(mesh.expand_symmetric(np.zeros((337, 3)), sym) == 0)
    free = np.zeros((337, 3))
    free[0] = (0.1, 0.2, 0.3)
    full = mesh.expand_symmetric(free, sym)
    a, b = sym.pairs[0]
    assert np.allclose(full[a], (0.1, 0.2, 0.3))
    assert np.allclose(full[b], (-0.1, 0.2, 0.3))
    with pytest.raises(InvalidArgumentError):
        mesh.expand_symmetric(np.zeros((336, 3)), sym)


def test_expand_fixed_x_clamped(rng):
    sym = mesh.template(3).symmetry
    full = mesh.expand_symmetric(rng.normal(size=(337, 3)), sym)
    assert np.all(full[sym.fixed, 0] == 0)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (337, 3), elements=floats))
def test_expand_reflection_invariant(free):
    sym = mesh.template(3).symmetry
    tpl = mesh.template(3).initial_vertices
    v = mesh.compose_shape(tpl, mesh.expand_symmetric(free, sym))
    assert np.array_equal(mesh.reflect_vertices(v, sym), v)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (337, 3), elements=floats), arrays(np.float64, (337, 3), elements=floats), floats, floats)
def test_expand_linear(x, y, a, b):
    sym = mesh.template(3).symmetry
    lhs = mesh.expand_symmetric(a * x + b * y, sym)
    rhs = a * mesh.expand_symmetric(x, sym) + b * mesh.expand_symmetric(y, sym)
    # a signed gather: exact up to the rounding of a*x + b*y itself
    assert np.abs(lhs - rhs).max() <= 1e-12 * (1 + np.abs(rhs).max())


def test_expand_exact_linearity_on_gather():
    # with exactly representable inputs the identity holds bit for bit
    sym = mesh.template(3).symmetry
    x = np.arange(337 * 3, dtype=np.float64).reshape(337, 3) / 8.0
    y = -np.arange(337 * 3, dtype=np.float64).reshape(337, 3) / 4.0
    assert np.array_equal(mesh.expand_symmetric(2 * x + 3 * y, sym),
                          2 * mesh.expand_symmetric(x, sym) + 3 * mesh.expand_symmetric(y, sym))


def test_laplacian_examples():
    lap0 = mesh.build_laplacian(mesh.icosphere(0)).matrix.toarray()
    off = lap0 - np.diag(np.diag(lap0))
    assert np.allclose(np.diag(lap0), 1.0)
    for row in off:
        nz = row[row != 0]
        assert len(nz) == 5 and np.allclose(nz, -0.2)
    t = mesh.template(3)
    const = np.tile([0.3, -1.0, 2.0], (642, 1))
    assert np.abs(t.laplacian.apply(const)).max() < 1e-12
    lv = t.laplacian.apply(t.mesh.vertices)
    assert np.linalg.norm(lv, axis=1).max() < 0.1


def test_laplacian_isolated_vertex():
    m = mesh.icosphere(0)
    v = np.vstack([m.vertices, [[0.0, 0.0, 0.0]]])
    with pytest.raises(DegenerateMeshError):
        mesh.build_laplacian(mesh.Mesh(v, m.faces))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 3, elements=floats))
def test_laplacian_translation_invariance(c):
    t = mesh.template(2)
    v = t.initial_vertices
    assert np.abs(t.laplacian.apply(v + c) - t.laplacian.apply(v)).max() < 1e-12


def test_compose_shape():
    tpl = mesh.template(1).initial_vertices
    assert np.array_equal(mesh.compose_shape(tpl, np.zeros_like(tpl)), tpl)
    d = np.random.default_rng(0).normal(size=tpl.shape)
    assert np.array_equal(mesh.compose_shape(np.zeros_like(tpl), d), d)
    with pytest.raises(InvalidArgumentError):
        mesh.compose_shape(tpl, d[:-1])


def test_compose_gradient_fd(rng):
    t = mesh.template(1)
    sym = t.symmetry
    tpl = torch.tensor(t.initial_vertices)
    x0 = rng.normal(size=(sym.num_free, 3)) * 0.1

    def f(x):
        v = mesh.compose_shape(tpl, mesh.expand_symmetric(torch.as_tensor(x).reshape(sym.num_free, 3), sym))
        return (v ** 2).sum()

    x = torch.tensor(x0, requires_grad=True)
    f(x).backward()
    fd = finite_difference(lambda z: float(f(z)), x0.ravel())
    assert rel_err(x.grad.numpy().ravel(), fd) <= 1e-3


def test_canonical_uv_mirror():
    t = mesh.template(3)
    uv = t.uv
    i, j = t.symmetry.pairs[:, 0], t.symmetry.pairs[:, 1]
    assert np.allclose(uv[i, 0], -uv[j, 0])
    assert np.allclose(uv[i, 1], uv[j, 1])
    assert np.all(np.abs(uv) <= 1.0)


def test_obj_round_trip(tmp_path):
    m = mesh.icosphere(1)
    mesh.write_obj(tmp_path / "m.obj", m.vertices, m.faces)
    v, f = mesh.read_obj(tmp_path / "m.obj")
    assert np.allclose(v, m.vertices, atol=1e-8)
    assert np.array_equal(f, m.faces)
