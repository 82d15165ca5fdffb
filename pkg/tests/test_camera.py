import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from canon3d import camera
from canon3d.errors import DegenerateRotationError, InvalidArgumentError
from canon3d.synth import finite_difference
from conftest import rel_err

floats = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=floats).filter(lambda q: np.linalg.norm(q) > 0.1)


def matrix_oracle(q):
    # rotation matrix via the sandwich product q p q*, column by column
    q = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)

    def mul(a, b):
        aw, ax, ay, az = a
        bw, bx, by, bz = b
        return np.array([
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ])

    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    cols = [mul(mul(q, np.r_[0.0, e]), conj)[1:] for e in np.eye(3)]
    return np.stack(cols, axis=1)


def test_normalize_examples():
    assert torch.equal(camera.normalize_quaternion(torch.tensor([2.0, 0, 0, 0], dtype=torch.float64)),
                       torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
    q = camera.normalize_quaternion(torch.tensor([0.3, -0.2, 0.5, 0.1], dtype=torch.float64))
    assert torch.allclose(camera.normalize_quaternion(q), q, atol=1e-15)
    with pytest.raises(DegenerateRotationError):
        camera.normalize_quaternion(torch.zeros(4, dtype=torch.float64))


def test_normalize_jacobian_fd(rng):
    q0 = rng.normal(size=4)
    w = rng.normal(size=4)
    q = torch.tensor(q0, requires_grad=True)
    (camera.normalize_quaternion(q) * torch.tensor(w)).sum().backward()
    fd = finite_difference(lambda x: float((camera.normalize_quaternion(torch.tensor(x)) * torch.tensor(w)).sum()), q0)
    assert rel_err(q.grad.numpy(), fd) <= 1e-3


def test_rotate_examples():
    p = torch.tensor([[1.0, 0.0, 0.0], [0.3, -2.0, 0.5]], dtype=torch.float64)
    assert torch.equal(camera.rotate(torch.tensor([1.0, 0, 0, 0], dtype=torch.float64), p), p)
    h = math.sqrt(2) / 2
    out = camera.rotate(torch.tensor([h, 0, 0, h], dtype=torch.float64), p[:1])
    assert torch.allclose(out, torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(quats)
def test_matrix_matches_sandwich_oracle(q):
    qn = camera.normalize_quaternion(torch.tensor(q))
    assert np.abs(camera.quaternion_to_matrix(qn).numpy() - matrix_oracle(q)).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(quats, arrays(np.float64, (5, 3), elements=floats))
def test_rotate_isometry(q, p):
    qn = camera.normalize_quaternion(torch.tensor(q))
    out = camera.rotate(qn, torch.tensor(p))
    assert np.allclose(np.linalg.norm(out.numpy(), axis=1), np.linalg.norm(p, axis=1), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(quats, quats, arrays(np.float64, (4, 3), elements=floats))
def test_composition(a, b, p):
    qa = camera.normalize_quaternion(torch.tensor(a))
    qb = camera.normalize_quaternion(torch.tensor(b))
    pts = torch.tensor(p)
    seq = camera.rotate(qa, camera.rotate(qb, pts))
    comp = camera.rotate(camera.quaternion_multiply(qa, qb), pts)
    assert (seq - comp).abs().max() <= 1e-9


@settings(max_examples=50, deadline=None)
@given(quats)
def test_geodesic_double_cover(q):
    assert float(camera.geodesic_angle(q, -q)) == pytest.approx(0.0, abs=1e-6)


def test_geodesic_known_angle():
    a = camera.view_quaternion(0.0, 0.0)
    b = camera.view_quaternion(90.0, 0.0)
    assert math.degrees(float(camera.geodesic_angle(a, b))) == pytest.approx(90.0, abs=1e-9)


def test_project_examples():
    v = torch.tensor([[0.1, 0.2, 0.3], [-0.5, 0.4, -0.7]], dtype=torch.float64)
    p1 = camera.pose_params(1.0, 0.0, 0.0, [1.0, 0, 0, 0])
    uv, depth = camera.project(p1, v)
    assert torch.equal(uv, v[:, :2]) and torch.equal(depth, v[:, 2])
    p2 = camera.pose_params(2.0, 0.0, 0.0, [1.0, 0, 0, 0])
    uv2, depth2 = camera.project(p2, v)
    assert torch.allclose(uv2, 2 * uv, atol=1e-15) and torch.equal(depth2, depth)


@settings(max_examples=50, deadline=None)
@given(quats, st.floats(0.1, 3.0), arrays(np.float64, 2, elements=floats), arrays(np.float64, 2, elements=floats))
def test_projection_translation_equivariance(q, s, t, delta):
    v = torch.tensor(np.random.default_rng(0).normal(size=(6, 3)))
    a = camera.pose_params(s, t[0], t[1], q)
    b = camera.pose_params(s, t[0] + delta[0], t[1] + delta[1], q)
    uva, da = camera.project(a, v)
    uvb, db = camera.project(b, v)
    shifted = uva - torch.tensor(t) + torch.tensor(t + delta)
    assert torch.allclose(uvb, shifted, atol=1e-12, rtol=0)
    assert torch.equal(da, db)


def test_project_gradient_fd(rng):
    v = torch.tensor(rng.normal(size=(7, 3)))
    p0 = np.r_[math.log(0.8), 0.1, -0.2, rng.normal(size=4)]

    def f(p):
        uv, _ = camera.project(torch.as_tensor(p), v)
        return (uv ** 2).sum()

    p = torch.tensor(p0, requires_grad=True)
    f(p).backward()
    assert rel_err(p.grad.numpy(), finite_difference(lambda x: float(f(x)), p0)) <= 1e-3


def test_multiplex_rig():
    one = camera.init_multiplex(1)
    assert one.shape == (1, 7)
    assert torch.allclose(one[0, 3:], torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
    mp = camera.init_multiplex(8)
    assert torch.allclose(mp[:, 3:].norm(dim=1), torch.ones(8, dtype=torch.float64))
    assert torch.allclose(mp[:, 0], torch.full((8,), math.log(camera.DEFAULT_SCALE), dtype=torch.float64))
    for m in range(8):
        want = camera.view_quaternion(45.0 * m, (-20.0, 20.0)[m % 2])
        assert float(camera.geodesic_angle(mp[m, 3:], want)) < 1e-12
    with pytest.raises(InvalidArgumentError):
        camera.init_multiplex(0)


def test_multiplex_azimuth_spacing():
    # front direction (0, 0, 1) of the object lands at the rig azimuth, measured in the camera frame
    mp = camera.init_multiplex(8)
    for m in range(8):
        q = camera.view_quaternion(45.0 * m, 0.0)
        d = camera.rotate(q, torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64))[0]
        assert math.degrees(math.atan2(float(d[0]), float(d[2]))) % 360 == pytest.approx(45.0 * m % 360, abs=1e-9)


def test_camera_pose_round_trip():
    pose = camera.CameraPose(0.7, (0.1, -0.2), (1.0, 0.0, 0.0, 0.0))
    assert camera.CameraPose.from_tuple(pose.as_tuple()) == pose
    back = camera.CameraPose.from_params(pose.to_params())
    assert back.s == pytest.approx(0.7, rel=1e-15)
    with pytest.raises(InvalidArgumentError):
        camera.CameraPose(0.0, (0.0, 0.0), (1.0, 0.0, 0.0, 0.0))
