import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from canon3d import mesh, warp
from canon3d.errors import InvalidArgumentError
from canon3d.synth import finite_difference
from conftest import rel_err

floats = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def test_identity_flow_reproduces_source(rng):
    src = torch.tensor(rng.uniform(size=(6, 9, 3)))
    out = warp.bilinear_sample(src, warp.identity_flow(6, 9))
    assert (out - src).abs().max() < 1e-6


def test_integer_shift(rng):
    h, w = 7, 8
    src = torch.tensor(rng.uniform(size=(h, w, 2)))
    flow = warp.identity_flow(h, w).clone()
    flow[..., 0] += 2.0 / w  # read one pixel to the right
    out = warp.bilinear_sample(src, flow)
    assert torch.allclose(out[:, :-1], src[:, 1:], atol=1e-12)
    assert torch.all(out[:, -1] == 0)  # zero padding beyond the border


def test_off_image_reads_zero():
    src = torch.ones(4, 4, 1, dtype=torch.float64)
    flow = torch.full((2, 2, 2), 3.0, dtype=torch.float64)
    assert torch.all(warp.bilinear_sample(src, flow) == 0)


@settings(max_examples=30, deadline=None)
@given(floats, floats, st.integers(0, 10_000))
def test_bilinear_linear_in_source(a, b, seed):
    g = np.random.default_rng(seed)
    x = torch.tensor(g.uniform(size=(5, 6, 2)))
    y = torch.tensor(g.uniform(size=(5, 6, 2)))
    flow = torch.tensor(g.uniform(-1.2, 1.2, size=(3, 4, 2)))
    lhs = warp.bilinear_sample(a * x + b * y, flow)
    rhs = a * warp.bilinear_sample(x, flow) + b * warp.bilinear_sample(y, flow)
    assert (lhs - rhs).abs().max() <= 1e-12 * (1 + rhs.abs().max())


def test_bilinear_linear_exact_on_dyadic():
    x = torch.arange(30, dtype=torch.float64).reshape(5, 3, 2) / 4
    y = torch.arange(30, dtype=torch.float64).reshape(5, 3, 2).flip(0) / 8
    flow = torch.tensor([[[0.25, -0.5], [-0.75, 0.5]]], dtype=torch.float64)
    assert torch.equal(warp.bilinear_sample(2 * x + 4 * y, flow),
                       2 * warp.bilinear_sample(x, flow) + 4 * warp.bilinear_sample(y, flow))


def test_flow_gradient_fd(rng):
    src = torch.tensor(rng.uniform(size=(6, 6, 3)))
    f0 = rng.uniform(-0.7, 0.7, size=(2, 3, 2))
    wts = torch.tensor(rng.normal(size=(2, 3, 3)))

    def f(fl):
        return (warp.bilinear_sample(src, torch.as_tensor(fl).reshape(2, 3, 2)) * wts).sum()

    fl = torch.tensor(f0, requires_grad=True)
    f(fl).backward()
    assert rel_err(fl.grad.numpy().ravel(), finite_difference(lambda x: float(f(x)), f0.ravel())) <= 1e-3


def test_texture_gradients_fd(rng):
    img0 = rng.uniform(size=(5, 5, 3))
    f0 = rng.uniform(-0.6, 0.6, size=(2, 4, 2))
    wts = torch.tensor(rng.normal(size=(2, 4, 3)))

    def loss(img, fl):
        return (warp.build_texture(img, fl) * wts).sum()

    img = torch.tensor(img0, requires_grad=True)
    fl = torch.tensor(f0, requires_grad=True)
    loss(img, fl).backward()
    g_img = finite_difference(lambda x: float(loss(torch.tensor(x.reshape(5, 5, 3)), torch.tensor(f0))), img0.ravel())
    g_fl = finite_difference(lambda x: float(loss(torch.tensor(img0), torch.tensor(x.reshape(2, 4, 2)))), f0.ravel())
    assert rel_err(img.grad.numpy().ravel(), g_img) <= 1e-3
    assert rel_err(fl.grad.numpy().ravel(), g_fl) <= 1e-3
    assert img.grad.abs().sum() > 0 and fl.grad.abs().sum() > 0


def test_constant_image_constant_texture():
    img = torch.full((8, 8, 3), 0.4, dtype=torch.float64)
    flow = torch.tensor(np.random.default_rng(0).uniform(-0.8, 0.8, size=(4, 6, 2)))
    assert torch.allclose(warp.build_texture(img, flow), torch.full((4, 6, 3), 0.4, dtype=torch.float64))


def test_positional_encoding_examples():
    pe = warp.positional_encoding(5, 9)
    # center cell is (u, v) = (0, 0)
    assert torch.allclose(pe[2, 4], torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-15)
    # seam columns u = -1 and u = +1 agree
    assert torch.allclose(pe[:, 0], pe[:, -1], atol=1e-15)
    assert pe.abs().max() <= 1.0
    assert warp.positional_encoding(4, 8, "pe2").shape == (4, 8, 2)
    assert warp.positional_encoding(4, 8, "none").shape == (4, 8, 0)
    with pytest.raises(InvalidArgumentError):
        warp.positional_encoding(4, 8, "pe3")


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.integers(-3, 3))
def test_pe4_periodic_in_u(u, v, k):
    def enc(uu, vv):
        return np.array([math.cos(math.pi * uu), math.sin(math.pi * uu), math.cos(math.pi * vv), math.sin(math.pi * vv)])

    assert np.allclose(enc(u, v), enc(u + 2 * k, v), atol=1e-9)


def test_sample_vertex_colors():
    tex = torch.full((4, 8, 3), 0.25, dtype=torch.float64)
    uv = mesh.template(2).uv
    assert torch.allclose(warp.sample_vertex_colors(tex, uv), torch.full((len(uv), 3), 0.25, dtype=torch.float64))
    # a chart point on a cell center returns that cell
    tex = torch.tensor(np.random.default_rng(3).uniform(size=(4, 8, 3)))
    uu, vv = warp.canonical_grid(4, 8)
    pts = np.stack([uu.numpy().ravel(), vv.numpy().ravel()], axis=1)
    out = warp.sample_vertex_colors(tex, pts)
    assert torch.allclose(out, tex.reshape(-1, 3), atol=1e-12)


def test_mirror_pairs_sample_mirrored_u():
    t = mesh.template(3)
    h, w = 16, 32
    g = np.random.default_rng(5).uniform(size=(h, w, 3))
    tex = torch.tensor(0.5 * (g + g[:, ::-1]))  # u-mirror symmetric texture
    col = warp.sample_vertex_colors(tex, t.uv).numpy()
    i, j = t.symmetry.pairs[:, 0], t.symmetry.pairs[:, 1]
    assert np.abs(col[i] - col[j]).max() < 1e-12


def test_downsample_flow_average_pool():
    flow = warp.identity_flow(8, 16)
    small = warp.downsample_flow(flow, 4)
    assert small.shape == (2, 4, 2)
    assert torch.allclose(small[0, 0], flow[:4, :4].reshape(-1, 2).mean(0))
    assert warp.downsample_flow(flow, 1) is flow
