"""Networks, parameter store and optimizer.

Pipeline per image::

    image -> backbone -> X -> latent z -> {free deformation, camera, flow}
    flow  -> canonical texture (from the image) and warped features (from X)
    warped features + position map -> appearance vector
    full deformation                -> shape vector
    [appearance, shape]             -> embedding -> class logits
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import mesh as mesh_mod
from . import warp
from .camera import DEFAULT_SCALE
from .errors import CompatibilityError, InvalidArgumentError, MissingAdjointError, NumericalError
from .renderer import face_colors_from_vertices

CHECKPOINT_FORMAT = "canon3d-checkpoint"
CHECKPOINT_VERSION = 1
LEAKY = 0.1


@dataclass
class ModelConfig:
    image_size: int = 64
    canonical_h: int = 32
    canonical_w: int = 64
    feature_downsample: int = 8
    latent_dim: int = 200
    mesh_level: int = 3
    num_classes: int = 4
    backbone_channels: tuple = (16, 32, 64, 128)
    reduce_channels: int = 32
    flow_channels: tuple = (64, 32, 16, 8)
    appearance_dim: int = 128
    shape_hidden: int = 512
    shape_layers: int = 3
    fusion_hidden: int = 256
    deform_scale: float = 0.1
    flow_base_scale: float = 0.7
    pe: str = "pe4"
    use_shape_encoder: bool = True

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        self.flow_channels = tuple(self.flow_channels)
        if self.pe not in ("pe4", "pe2", "none"):
            raise InvalidArgumentError(f"unknown positional encoding {self.pe!r}")
        n = len(self.backbone_channels)
        if self.image_size % (2 ** n):
            raise InvalidArgumentError("image size must be divisible by the backbone stride")
        if self.canonical_h % 32 or self.canonical_w % 32:
            raise InvalidArgumentError("canonical dims must be multiples of 32 (five 2x upsamplings)")
        seed = (self.canonical_h // 32) * (self.canonical_w // 32)
        if self.latent_dim % seed:
            raise InvalidArgumentError("latent size must split evenly over the flow seed grid")


def _init_linear(layer: nn.Module):
    # He-style uniform fan-in init, zero bias
    fan_in = layer.weight[0].numel()
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound)
        layer.bias.zero_()


class Backbone(nn.Module):
    def __init__(self, channels=(16, 32, 64, 128), in_channels=3):
        super().__init__()
        layers = []
        c_in = in_channels
        for c in channels:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1)
            _init_linear(conv)
            layers += [conv, nn.LeakyReLU(LEAKY)]
            c_in = c
        self.net = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, image):
        """(B, H, W, 3) image in [0, 1] -> (B, C, H/16, W/16) features."""
        return self.net(image.permute(0, 3, 1, 2))


class LatentEncoder(nn.Module):
    def __init__(self, in_channels, spatial, reduce_channels=32, latent_dim=200):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, reduce_channels, 3, padding=1)
        self.fc1 = nn.Linear(reduce_channels * spatial * spatial, latent_dim)
        self.fc2 = nn.Linear(latent_dim, latent_dim)
        for layer in (self.reduce, self.fc1, self.fc2):
            _init_linear(layer)
        self.act = nn.LeakyReLU(LEAKY)

    def forward(self, x):
        h = self.act(self.reduce(x)).flatten(1)
        return self.act(self.fc2(self.act(self.fc1(h))))


class ShapeDecoder(nn.Module):
    def __init__(self, latent_dim, num_free, scale=0.1):
        super().__init__()
        self.fc = nn.Linear(latent_dim, num_free * 3)
        _init_linear(self.fc)
        self.num_free = num_free
        self.scale = scale

    def forward(self, z):
        return (self.scale * self.fc(z)).reshape(z.shape[0], self.num_free, 3)


class CameraDecoder(nn.Module):
    """Linear head to (log s, tx, ty, qw, qx, qy, qz), biased to the identity pose."""

    def __init__(self, latent_dim):
        super().__init__()
        self.fc = nn.Linear(latent_dim, 7)
        with torch.no_grad():
            self.fc.weight.zero_()
            self.fc.bias.copy_(torch.tensor([math.log(DEFAULT_SCALE), 0, 0, 1, 0, 0, 0], dtype=torch.float32))

    def forward(self, z):
        return self.fc(z)


def base_flow(h, w, scale=0.7, dtype=torch.float32):
    """Initial flow: the canonical sphere seen from the identity camera.

    Front hemisphere cells land on their orthographic image position; back
    cells fold onto the mirrored front position.
    """
    uu, vv = warp.canonical_grid(h, w, torch.float64)
    x = scale * torch.sin(torch.pi * uu) * torch.cos(torch.pi * vv / 2)
    y = -scale * torch.sin(torch.pi * vv / 2)
    return torch.stack([x, y], dim=-1).to(dtype)


class FlowDecoder(nn.Module):
    def __init__(self, latent_dim, canonical_h=32, canonical_w=64, channels=(64, 32, 16, 8), base_scale=0.7):
        super().__init__()
        self.seed_hw = (canonical_h // 32, canonical_w // 32)
        self.seed_c = latent_dim // (self.seed_hw[0] * self.seed_hw[1])
        convs = []
        c_in = self.seed_c
        for c in tuple(channels) + (2,):
            conv = nn.Conv2d(c_in, c, 3, padding=1)
            _init_linear(conv)
            convs.append(conv)
            c_in = c
        with torch.no_grad():
            convs[-1].weight.mul_(0.1)
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(LEAKY)
        base = base_flow(canonical_h, canonical_w, base_scale).clamp(-0.999, 0.999)
        self.register_buffer("base_logits", torch.atanh(base).permute(2, 0, 1).contiguous())

    def forward(self, z):
        h = z.reshape(z.shape[0], self.seed_c, *self.seed_hw)
        for i, conv in enumerate(self.convs):
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = conv(h)
            if i < len(self.convs) - 1:
                h = self.act(h)
        return torch.tanh(h + self.base_logits).permute(0, 2, 3, 1)


class AppearanceEncoder(nn.Module):
    def __init__(self, in_channels, dim=128):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        _init_linear(self.conv1)
        _init_linear(self.conv2)
        self.act = nn.LeakyReLU(LEAKY)

    def forward(self, x):
        """(B, C, h, w) warped features + position map -> (B, dim)."""
        return self.act(self.conv2(self.act(self.conv1(x)))).mean(dim=(2, 3))


class ShapeEncoder(nn.Module):
    def __init__(self, in_dim, hidden=512, layers=3):
        super().__init__()
        dims = [in_dim] + [hidden] * layers
        self.fcs = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        for fc in self.fcs:
            _init_linear(fc)

    def forward(self, deform):
        h = deform.flatten(1)
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = torch.relu(h)
        return h


class FusionClassifier(nn.Module):
    def __init__(self, appearance_dim, shape_dim, num_classes, hidden=256):
        super().__init__()
        self.fc1 = nn.Linear(appearance_dim + shape_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        _init_linear(self.fc1)
        _init_linear(self.fc2)
        self.shape_dim = shape_dim

    def forward(self, y_a, y_s=None):
        if y_s is None:
            y_s = y_a.new_zeros(y_a.shape[0], self.shape_dim)
        emb = torch.relu(self.fc1(torch.cat([y_a, y_s], dim=1)))
        return self.fc2(emb), emb


class CanonicalModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        tpl = mesh_mod.template(cfg.mesh_level)
        self.tpl = tpl
        self.template_vertices = nn.Parameter(torch.tensor(tpl.initial_vertices, dtype=torch.float32))
        self.backbone = Backbone(cfg.backbone_channels)
        spatial = cfg.image_size // (2 ** len(cfg.backbone_channels))
        self.encoder = LatentEncoder(self.backbone.out_channels, spatial, cfg.reduce_channels, cfg.latent_dim)
        self.shape_decoder = ShapeDecoder(cfg.latent_dim, tpl.symmetry.num_free, cfg.deform_scale)
        self.camera_decoder = CameraDecoder(cfg.latent_dim)
        self.flow_decoder = FlowDecoder(
            cfg.latent_dim, cfg.canonical_h, cfg.canonical_w, cfg.flow_channels, cfg.flow_base_scale
        )
        n_pe = warp.pe_channels(cfg.pe)
        self.appearance = AppearanceEncoder(self.backbone.out_channels + n_pe, cfg.appearance_dim)
        self.shape_encoder = ShapeEncoder(3 * tpl.mesh.num_vertices, cfg.shape_hidden, cfg.shape_layers)
        self.classifier = FusionClassifier(cfg.appearance_dim, cfg.shape_hidden, cfg.num_classes, cfg.fusion_hidden)
        fh = cfg.canonical_h // cfg.feature_downsample
        fw = cfg.canonical_w // cfg.feature_downsample
        self.register_buffer("pos_map", warp.positional_encoding(fh, fw, cfg.pe, torch.float32).permute(2, 0, 1))
        self.register_buffer("uv_template", torch.tensor(tpl.uv, dtype=torch.float32))
        self.register_buffer("faces", torch.tensor(tpl.mesh.faces), persistent=False)

    def camera_free_names(self):
        return [n for n, _ in self.named_parameters() if not n.startswith("camera_decoder.")]

    def forward(self, image):
        """Run every head on a batch of images (B, H, W, 3)."""
        if image.dim() == 3:
            image = image[None]
        cfg = self.config
        if tuple(image.shape[1:]) != (cfg.image_size, cfg.image_size, 3):
            raise InvalidArgumentError(
                f"expected images of shape ({cfg.image_size}, {cfg.image_size}, 3), got {tuple(image.shape[1:])}"
            )
        feats = self.backbone(image)
        z = self.encoder(feats)
        free = self.shape_decoder(z)
        deform = mesh_mod.expand_symmetric(free, self.tpl.symmetry)
        vertices = self.template_vertices + deform
        camera = self.camera_decoder(z)
        flow = self.flow_decoder(z)
        texture = warp.build_texture(image, flow)
        vcol = torch.stack([warp.sample_vertex_colors(t, self.uv_template) for t in texture])
        fcol = face_colors_from_vertices(vcol, self.faces).clamp(0.0, 1.0)
        small = warp.downsample_flow(flow, cfg.feature_downsample)
        warped = warp.bilinear_sample(feats.permute(0, 2, 3, 1), small).permute(0, 3, 1, 2)
        pos = self.pos_map.expand(warped.shape[0], -1, -1, -1)
        y_a = self.appearance(torch.cat([warped, pos], dim=1))
        y_s = self.shape_encoder(deform) if cfg.use_shape_encoder else None
        logits, emb = self.classifier(y_a, y_s)
        return dict(
            features=feats, latent=z, free_deform=free, deform=deform, vertices=vertices,
            camera=camera, flow=flow, texture=texture, vertex_colors=vcol, face_colors=fcol,
            appearance=y_a, shape=y_s, embedding=emb, logits=logits,
        )


class ParamStore:
    """Named trainable tensors with gradient slots and Adam state.

    Network parameters are registered by module path; per-instance camera
    multiplexes as ``multiplex/<instance id>``.
    """

    def __init__(self):
        self.params: dict[str, torch.Tensor] = {}
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t: dict[str, int] = {}
        self.extra: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: torch.Tensor):
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.params[name] = tensor
        return tensor

    def add_module(self, module: nn.Module, prefix: str = ""):
        for name, p in module.named_parameters():
            self.add(prefix + name, p)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self, names=None):
        for n in names if names is not None else self.params:
            self.params[n].grad = None

    def adam_step(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, names=None, lr_overrides=None):
        """One Adam update for every selected parameter that received a gradient.

        Parameters without gradient are left untouched (their moments do not
        decay). Gradients are cleared afterwards.
        """
        b1, b2 = betas
        names = list(self.params) if names is None else list(names)
        for n in names:
            g = self.params[n].grad
            if g is not None and not bool(torch.isfinite(g).all()):
                raise NumericalError(f"non-finite gradient for parameter '{n}'")
        with torch.no_grad():
            for n in names:
                p = self.params[n]
                g = p.grad
                if g is None:
                    continue
                step_lr = lr
                if lr_overrides:
                    for prefix, value in lr_overrides.items():
                        if n.startswith(prefix):
                            step_lr = value
                if n not in self.m:
                    self.m[n] = torch.zeros_like(p)
                    self.v[n] = torch.zeros_like(p)
                    self.t[n] = 0
                self.t[n] += 1
                t = self.t[n]
                self.m[n].mul_(b1).add_(g, alpha=1 - b1)
                self.v[n].mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = self.m[n] / (1 - b1 ** t)
                v_hat = self.v[n] / (1 - b2 ** t)
                p.sub_(step_lr * m_hat / (v_hat.sqrt() + eps))
                p.grad = None

    def check_connected(self, names=None):
        """Raise if a selected parameter got no gradient from the last backward."""
        for n in names if names is not None else self.params:
            g = self.params[n].grad
            if g is None or not bool(g.abs().sum() > 0):
                raise MissingAdjointError(n)

    def save(self, path, meta=None):
        arrays = {}
        for n, p in self.params.items():
            arrays[f"param::{n}"] = p.detach().cpu().numpy()
            if n in self.m:
                arrays[f"adam_m::{n}"] = self.m[n].cpu().numpy()
                arrays[f"adam_v::{n}"] = self.v[n].cpu().numpy()
                arrays[f"adam_t::{n}"] = np.array(self.t[n], dtype=np.int64)
        for k, a in self.extra.items():
            arrays[f"extra::{k}"] = np.asarray(a)
        header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {}}
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @staticmethod
    def read_header(path) -> dict:
        with np.load(path) as data:
            if "__header__" not in data:
                raise CompatibilityError(f"{path} is not a canon3d checkpoint")
            header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise CompatibilityError(f"unsupported checkpoint format {header.get('format')} v{header.get('version')}")
        return header

    def load(self, path, strict=True):
        """Copy values (and optimizer state) from ``path`` into registered tensors.

        Unknown ``multiplex/*`` entries are created; other unknown names fail
        in strict mode.
        """
        header = self.read_header(path)
        with np.load(path) as data:
            for key in data.files:
                if not key.startswith("param::"):
                    continue
                n = key[len("param::"):]
                arr = torch.from_numpy(data[key].copy())
                if n not in self.params:
                    if n.startswith("multiplex/"):
                        self.add(n, arr.clone())
                    elif strict:
                        raise CompatibilityError(f"checkpoint parameter {n!r} not present in the model")
                    else:
                        continue
                p = self.params[n]
                if tuple(p.shape) != tuple(arr.shape):
                    raise CompatibilityError(f"shape mismatch for {n!r}: {tuple(p.shape)} vs {tuple(arr.shape)}")
                with torch.no_grad():
                    p.copy_(arr.to(p.dtype))
                if f"adam_m::{n}" in data.files:
                    self.m[n] = torch.from_numpy(data[f"adam_m::{n}"].copy()).to(p.dtype)
                    self.v[n] = torch.from_numpy(data[f"adam_v::{n}"].copy()).to(p.dtype)
                    self.t[n] = int(data[f"adam_t::{n}"])
            if strict:
                missing = [n for n in self.params if f"param::{n}" not in data.files]
                if missing:
                    raise CompatibilityError(f"checkpoint lacks parameters: {missing[:5]}")
            for key in data.files:
                if key.startswith("extra::"):
                    self.extra[key[len("extra::"):]] = data[key].copy()
        return header


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["backbone_channels"] = list(cfg.backbone_channels)
    d["flow_channels"] = list(cfg.flow_channels)
    return d
