"""Training, single-instance fitting and evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import mesh as mesh_mod
from . import warp
from .camera import geodesic_angle, init_multiplex, normalize_quaternion, project
from .errors import CompatibilityError, DataValidationError, InvalidArgumentError, NumericalError
from .losses import (
    LossWeights,
    camera_posterior,
    cross_entropy,
    deformation_reg,
    distance_transform,
    mask_loss,
    pixel_loss,
    smoothness_loss,
    total_loss,
)
from .model import CanonicalModel, ModelConfig, ParamStore, base_flow, model_config_to_dict
from .renderer import RasterConfig, face_colors_from_vertices, render
from .synth import camera_to_params, hard_rasterize, ndc_to_pixel, vertex_visibility


# ------------------------------------------------------------ targets


@dataclass
class Target:
    image: torch.Tensor  # full-resolution network input (H, W, 3)
    render_image: torch.Tensor  # (h, w, 3) at render size
    render_mask: torch.Tensor  # (h, w)
    dt: torch.Tensor  # (h, w)


def make_target(image, mask, render_size: int, dtype=torch.float32) -> Target:
    img = torch.as_tensor(np.asarray(image, dtype=np.float64)).to(dtype)
    m = torch.as_tensor(np.asarray(mask, dtype=np.float64)).to(dtype)
    if img.dim() != 3 or img.shape[-1] != 3 or m.shape != img.shape[:2]:
        raise InvalidArgumentError("image must be (H, W, 3) and mask (H, W)")
    if not bool((m > 0.5).any()):
        raise DataValidationError("empty foreground mask")
    h = img.shape[0]
    if h % render_size or img.shape[1] != h:
        raise InvalidArgumentError("render size must divide the (square) image size")
    k = h // render_size
    if k > 1:
        img_r = F.avg_pool2d(img.permute(2, 0, 1)[None], k)[0].permute(1, 2, 0)
        m_r = (F.avg_pool2d(m[None, None], k)[0, 0] >= 0.5).to(dtype)
    else:
        img_r, m_r = img, (m > 0.5).to(dtype)
    dt = torch.as_tensor(distance_transform(m_r.numpy())).to(dtype)
    return Target(img, img_r, m_r, dt)


def reconstruction_losses(params, vertices, faces, face_colors, target: Target, raster: RasterConfig):
    """Per-camera (mask, pixel) losses and the renders for an (M, 7) multiplex."""
    uv, depth = project(params, vertices)
    out = render(uv, depth, faces, face_colors, raster)
    mask_l = mask_loss(target.render_mask, out.silhouette, target.dt)
    pix_l = pixel_loss(out.color, target.render_image, target.render_mask)
    return mask_l, pix_l, out


def best_hypothesis(posterior) -> int:
    """argmax with ties going to the lowest index."""
    return int(np.argmax(np.asarray(torch.as_tensor(posterior).detach())))


def mask_iou(a, b) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


def hard_silhouette(vertices, params, faces, size: int) -> np.ndarray:
    params = torch.as_tensor(params).detach().double()
    vertices = torch.as_tensor(vertices).detach().double()
    uv, depth = project(params, vertices)
    _, m, _ = hard_rasterize(uv.numpy(), depth.numpy(), faces, None, size, size)
    return m


# ------------------------------------------------------------ training


@dataclass
class TrainConfig:
    num_cameras: int = 8
    epochs_a: int = 10
    epochs_b: int = 20
    max_steps_a: int | None = None
    lr: float = 1e-4
    camera_lr: float = 1e-3
    phase_b_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    render_size: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    temp_factor: float = 0.1
    temp_momentum: float = 0.9
    multiplex_jitter: float = 0.0
    pe: str = "pe4"
    use_shape_encoder: bool = True
    model: dict = field(default_factory=dict)
    seed: int = 0
    dataset: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.num_cameras < 1:
            raise InvalidArgumentError("need at least one camera hypothesis")
        if self.pe not in ("pe4", "pe2", "none"):
            raise InvalidArgumentError(f"unknown positional encoding {self.pe!r}")

    def model_config(self, num_classes: int) -> ModelConfig:
        kw = dict(self.model)
        kw.update(pe=self.pe, use_shape_encoder=self.use_shape_encoder, num_classes=num_classes)
        return ModelConfig(**kw)

    def raster(self) -> RasterConfig:
        return RasterConfig(self.render_size, self.render_size, self.sigma, self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class InstanceState:
    id: str
    loss_mean: float | None = None  # running mean of the per-camera losses

    def update(self, value: float, momentum: float) -> float:
        if self.loss_mean is None:
            self.loss_mean = value
        else:
            self.loss_mean = momentum * self.loss_mean + (1.0 - momentum) * value
        return self.loss_mean


class Trainer:
    """Owns the model, the parameter store and per-instance camera multiplexes."""

    def __init__(self, config: TrainConfig, records, num_classes: int, dtype=torch.float32):
        self.config = config
        self.dtype = dtype
        self.records = list(records)
        if not self.records:
            raise DataValidationError("no training records")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataValidationError("duplicate record ids")
        for r in self.records:
            if not 0 <= r.label < num_classes:
                raise DataValidationError(f"record {r.id}: label {r.label} outside [0, {num_classes})")
        torch.manual_seed(config.seed)
        self.model = CanonicalModel(config.model_config(num_classes)).to(dtype)
        self.faces = torch.tensor(self.model.tpl.mesh.faces)
        self.store = ParamStore()
        self.store.add_module(self.model)
        for i, r in enumerate(self.records):
            mp = init_multiplex(config.num_cameras, seed=config.seed + i, jitter_deg=config.multiplex_jitter, dtype=dtype)
            self.store.add(f"multiplex/{r.id}", mp.clone())
        self.states = {r.id: InstanceState(r.id) for r in self.records}
        size = self.model.config.image_size
        for r in self.records:
            if r.image.shape[:2] != (size, size):
                raise DataValidationError(f"record {r.id}: image size {r.image.shape[:2]} != {size}")
        self.targets = {r.id: make_target(r.image, r.mask, config.render_size, dtype) for r in self.records}
        self.raster = config.raster()
        self.step = 0
        self.epoch = 0
        self.position = 0  # index into the current epoch order
        self.phase = "A"

    # ---- bookkeeping

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.config.seed, epoch])
        return rng.permutation(len(self.records))

    def network_names(self):
        return [n for n in self.store.names() if not n.startswith("multiplex/")]

    def save(self, path, extra_meta=None):
        self.store.extra["state/counters"] = np.array([self.step, self.epoch, self.position], dtype=np.int64)
        self.store.extra["state/phase"] = np.frombuffer(self.phase.encode(), dtype=np.uint8)
        ids = [r.id for r in self.records]
        means = [np.nan if self.states[i].loss_mean is None else self.states[i].loss_mean for i in ids]
        self.store.extra["state/loss_mean"] = np.array(means, dtype=np.float64)
        meta = {
            "train_config": self.config.to_dict(),
            "model_config": model_config_to_dict(self.model.config),
            "instances": ids,
            "dtype": str(self.dtype).replace("torch.", ""),
        }
        meta.update(extra_meta or {})
        self.store.save(path, meta)

    def load(self, path):
        header = self.store.load(path)
        counters = self.store.extra.get("state/counters")
        if counters is not None:
            self.step, self.epoch, self.position = (int(c) for c in counters)
        if "state/phase" in self.store.extra:
            self.phase = bytes(self.store.extra["state/phase"]).decode()
        means = self.store.extra.get("state/loss_mean")
        ids = header["meta"].get("instances", [])
        if means is not None:
            for i, m in zip(ids, means):
                if i in self.states:
                    self.states[i].loss_mean = None if np.isnan(m) else float(m)
        return header

    # ---- phase A

    def instance_losses(self, rec, out=None, task=True, sigma_temp=None, posterior=None):
        """Loss breakdown for one record with the current parameters."""
        cfg = self.config
        if out is None:
            out = self.model(self.targets[rec.id].image)
        params = self.store[f"multiplex/{rec.id}"]
        mask_l, pix_l, _ = reconstruction_losses(
            params, out["vertices"][0], self.faces, out["face_colors"][0], self.targets[rec.id], self.raster
        )
        smooth = smoothness_loss(self.model.tpl.laplacian, out["vertices"][0])
        reg = deformation_reg(out["deform"][0])
        task_l = cross_entropy(out["logits"][0], rec.label) if task else None
        if sigma_temp is None:
            sigma_temp = max(cfg.temp_factor * float((mask_l + pix_l).detach().mean()), 1e-12)
        return total_loss(mask_l, pix_l, smooth, reg, task_l, cfg.weights, sigma_temp=sigma_temp, posterior=posterior)

    def phase_a_step(self, rec):
        cfg = self.config
        state = self.states[rec.id]
        out = self.model(self.targets[rec.id].image)
        params = self.store[f"multiplex/{rec.id}"]
        mask_l, pix_l, _ = reconstruction_losses(
            params, out["vertices"][0], self.faces, out["face_colors"][0], self.targets[rec.id], self.raster
        )
        per_cam = (mask_l + pix_l).detach()
        if not bool(torch.isfinite(per_cam).all()):
            raise NumericalError(f"non-finite rendering loss at step {self.step} for instance {rec.id}")
        mean = state.update(float(per_cam.mean()), cfg.temp_momentum)
        sigma_temp = max(cfg.temp_factor * mean, 1e-12)
        smooth = smoothness_loss(self.model.tpl.laplacian, out["vertices"][0])
        reg = deformation_reg(out["deform"][0])
        task_l = cross_entropy(out["logits"][0], rec.label)
        bd = total_loss(mask_l, pix_l, smooth, reg, task_l, cfg.weights, sigma_temp=sigma_temp)
        if not math.isfinite(float(bd.total.detach())):
            raise NumericalError(f"non-finite loss at step {self.step} for instance {rec.id}")
        bd.total.backward()
        names = self.network_names() + [f"multiplex/{rec.id}"]
        self.store.adam_step(cfg.lr, cfg.betas, cfg.eps, names=names, lr_overrides={"multiplex/": cfg.camera_lr})
        # keep the quaternion part on the unit sphere
        with torch.no_grad():
            params[:, 3:] = normalize_quaternion(params[:, 3:])
        self.step += 1
        return bd, sigma_temp

    def train_phase_a(self, epochs=None, max_steps=None, log=None, on_epoch_end=None, on_step=None):
        """Run phase A from the current position; ``log`` receives one dict per step."""
        cfg = self.config
        epochs = cfg.epochs_a if epochs is None else epochs
        max_steps = cfg.max_steps_a if max_steps is None else max_steps
        self.phase = "A"
        while self.epoch < epochs:
            order = self.epoch_order(self.epoch)
            while self.position < len(order):
                if max_steps is not None and self.step >= max_steps:
                    return
                rec = self.records[order[self.position]]
                bd, sigma_temp = self.phase_a_step(rec)
                self.position += 1
                if log is not None:
                    row = {"phase": "A", "step": self.step, "epoch": self.epoch, "instance": rec.id}
                    row.update(bd.as_record())
                    row["sigma_temp"] = sigma_temp
                    log(row)
                if on_step is not None:
                    on_step(self)
            self.epoch += 1
            self.position = 0
            if on_epoch_end is not None:
                on_epoch_end(self)

    @torch.no_grad()
    def dataset_loss(self) -> float:
        """Mean total loss over the training records at the current parameters (no update)."""
        vals = []
        for rec in self.records:
            vals.append(float(self.instance_losses(rec).total.detach()))
        return float(np.mean(vals))

    # ---- phase B

    @torch.no_grad()
    def best_hypotheses(self) -> dict:
        """Each instance's best camera (as projection params) under the current model."""
        best = {}
        for rec in self.records:
            bd = self.instance_losses(rec, task=False)
            best[rec.id] = self.store[f"multiplex/{rec.id}"][best_hypothesis(bd.posterior)].clone()
        return best

    def decoder_cameras(self, latents) -> torch.Tensor:
        return self.model.camera_decoder(latents)

    @staticmethod
    def camera_regression_loss(pred, target):
        """|log s - log s*| + |t - t*|^2 + (1 - |<q, q*>|) with unit quaternions."""
        q = normalize_quaternion(pred[..., 3:])
        qt = normalize_quaternion(target[..., 3:])
        return (
            (pred[..., 0] - target[..., 0]).abs()
            + ((pred[..., 1:3] - target[..., 1:3]) ** 2).sum(-1)
            + (1.0 - (q * qt).sum(-1).abs())
        )

    @torch.no_grad()
    def latents(self):
        return torch.cat([self.model(self.targets[r.id].image)["latent"] for r in self.records])

    def mean_geodesic_error(self, targets=None, latents=None) -> float:
        targets = targets if targets is not None else self.best_hypotheses()
        latents = latents if latents is not None else self.latents()
        with torch.no_grad():
            pred = self.decoder_cameras(latents)
            tgt = torch.stack([targets[r.id] for r in self.records])
            ang = geodesic_angle(normalize_quaternion(pred[:, 3:]), normalize_quaternion(tgt[:, 3:]))
        return float(ang.mean())

    def train_phase_b(self, epochs=None, log=None):
        """Distil best hypotheses into the camera decoder; everything else stays frozen."""
        cfg = self.config
        epochs = cfg.epochs_b if epochs is None else epochs
        self.phase = "B"
        targets = self.best_hypotheses()
        latents = self.latents()
        names = [n for n in self.store.names() if n.startswith("camera_decoder.")]
        err0 = self.mean_geodesic_error(targets, latents)
        for ep in range(epochs):
            order = self.epoch_order(10_000 + ep)
            for i in order:
                rec = self.records[i]
                pred = self.model.camera_decoder(latents[i:i + 1])[0]
                loss = self.camera_regression_loss(pred, targets[rec.id])
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite phase-B loss for instance {rec.id}")
                loss.backward()
                self.store.adam_step(cfg.phase_b_lr, cfg.betas, cfg.eps, names=names)
                self.step += 1
                if log is not None:
                    log({"phase": "B", "step": self.step, "epoch": ep, "instance": rec.id, "camera_loss": value})
        err1 = self.mean_geodesic_error(targets, latents)
        return {"geodesic_before": err0, "geodesic_after": err1}


def load_model(path):
    """Rebuild the network stored in a checkpoint; returns ``(model, header)``."""
    header = ParamStore.read_header(path)
    meta = header.get("meta", {})
    if "model_config" not in meta:
        raise CompatibilityError(f"{path} carries no model configuration")
    try:
        model = CanonicalModel(ModelConfig(**meta["model_config"]))
    except (TypeError, InvalidArgumentError) as exc:
        raise CompatibilityError(f"incompatible model configuration: {exc}") from exc
    model = model.to(getattr(torch, meta.get("dtype", "float32")))
    store = ParamStore()
    store.add_module(model)
    store.load(path)
    return model, header


def metrics_writer(path):
    """Append-mode JSONL logger."""
    fh = open(path, "a", encoding="utf-8")

    def log(row):
        fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.flush()

    log.close = fh.close
    return log


# ------------------------------------------------------------ fitting


@dataclass
class FitConfig:
    num_cameras: int = 8
    steps: int = 500
    lr_deform: float = 1e-2
    lr_flow: float = 2e-2
    lr_camera: float = 1e-2
    weights: LossWeights = field(default_factory=lambda: LossWeights(task=0.0))
    render_size: int = 64
    coarse_size: int | None = 32  # render size while the full multiplex is alive
    sigma: float = 1e-3
    sigma_end: float | None = 1e-5  # geometric anneal from ``sigma`` when set
    anneal_steps: int = 400
    gamma: float = 1e-4
    temp_factor: float = 0.1
    canonical_h: int = 32
    canonical_w: int = 64
    mesh_level: int = 3
    multiplex_jitter: float = 0.0
    prune_after: int | None = 100
    keep_cameras: int = 2
    stop_iou: float | None = None
    check_every: int = 25
    init_cameras: list | None = None  # explicit (M, 7) projection params
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.num_cameras < 1 or self.steps < 0:
            raise InvalidArgumentError("invalid camera count or step count")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown fit config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitResult:
    free_deform: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray
    multiplex: np.ndarray  # (M', 7) surviving hypotheses
    camera_ids: list  # original hypothesis index of each surviving row
    posterior: np.ndarray
    best: int  # row into ``multiplex``
    flow: np.ndarray
    texture: np.ndarray
    loss_curve: list
    iou: float
    steps: int
    renders: np.ndarray  # (M', h, w, 3)
    silhouettes: np.ndarray  # (M', h, w)

    @property
    def best_camera(self) -> np.ndarray:
        return self.multiplex[self.best]


def fit_single(image, mask, config: FitConfig | None = None, log=None) -> FitResult:
    """Fit deformation, appearance flow and a camera multiplex to one image."""
    cfg = config or FitConfig()
    dtype = torch.float64
    tpl = mesh_mod.template(cfg.mesh_level)
    fine = make_target(image, mask, cfg.render_size, dtype)
    coarse = make_target(image, mask, cfg.coarse_size, dtype) if cfg.coarse_size else fine
    gt_mask = np.asarray(mask) > 0.5
    raster = RasterConfig(cfg.render_size, cfg.render_size, cfg.sigma, cfg.gamma)
    target = fine
    faces = torch.tensor(tpl.mesh.faces)
    uv_tpl = torch.as_tensor(tpl.uv, dtype=dtype)
    template_v = torch.as_tensor(tpl.initial_vertices, dtype=dtype)
    lap = tpl.laplacian

    store = ParamStore()
    free = store.add("deform", torch.zeros(tpl.symmetry.num_free, 3, dtype=dtype))
    flow0 = base_flow(cfg.canonical_h, cfg.canonical_w, 0.7, dtype).clamp(-0.999, 0.999)
    flow_logits = store.add("flow", torch.atanh(flow0).clone())
    if cfg.init_cameras is not None:
        init = torch.as_tensor(np.asarray(cfg.init_cameras, dtype=np.float64)).reshape(-1, 7).clone()
    else:
        init = init_multiplex(cfg.num_cameras, seed=cfg.seed, jitter_deg=cfg.multiplex_jitter, dtype=dtype)
    cams = store.add("multiplex", init)
    cam_ids = list(range(init.shape[0]))
    lrs = {"deform": cfg.lr_deform, "flow": cfg.lr_flow, "multiplex": cfg.lr_camera}

    def sigma_at(it):
        if cfg.sigma_end is None:
            return cfg.sigma
        frac = min(it / max(cfg.anneal_steps, 1), 1.0)
        return cfg.sigma * (cfg.sigma_end / cfg.sigma) ** frac

    def forward():
        deform = mesh_mod.expand_symmetric(free, tpl.symmetry)
        verts = template_v + deform
        flow = torch.tanh(flow_logits)
        tex = warp.build_texture(target.image, flow)
        vcol = warp.sample_vertex_colors(tex, uv_tpl)
        fcol = face_colors_from_vertices(vcol, faces).clamp(0.0, 1.0)
        mask_l, pix_l, out = reconstruction_losses(cams, verts, faces, fcol, target, raster)
        smooth = smoothness_loss(lap, verts)
        reg = deformation_reg(deform)
        per_cam = (mask_l + pix_l).detach()
        if not bool(torch.isfinite(per_cam).all()):
            raise NumericalError("non-finite fitting loss")
        sigma_temp = max(cfg.temp_factor * float(per_cam.mean()), 1e-12)
        bd = total_loss(mask_l, pix_l, smooth, reg, None, cfg.weights, sigma_temp=sigma_temp)
        return bd, verts, flow, tex, out

    curve = []
    iou = 0.0
    steps = 0
    for it in range(cfg.steps):
        early = cfg.prune_after is not None and it < cfg.prune_after
        target = coarse if early else fine
        size = target.render_mask.shape[0]
        raster = replace(raster, sigma=sigma_at(it), image_h=size, image_w=size)
        bd, verts, _, _, _ = forward()
        total = float(bd.total.detach())
        if not math.isfinite(total):
            raise NumericalError(f"non-finite fitting loss at step {it}")
        curve.append(total)
        bd.total.backward()
        store.adam_step(1.0, names=["deform", "flow", "multiplex"], lr_overrides=lrs)
        with torch.no_grad():
            cams[:, 3:] = normalize_quaternion(cams[:, 3:])
        steps = it + 1
        if log is not None:
            log({"step": steps, **bd.as_record()})
        if cfg.prune_after is not None and steps == cfg.prune_after and cams.shape[0] > cfg.keep_cameras:
            keep = np.argsort(-bd.posterior.numpy(), kind="stable")[: cfg.keep_cameras]
            keep = np.sort(keep)
            with torch.no_grad():
                kept = cams[torch.as_tensor(keep)].clone()
            state = (store.m["multiplex"][keep].clone(), store.v["multiplex"][keep].clone())
            del store.params["multiplex"]
            cams = store.add("multiplex", kept)
            store.m["multiplex"], store.v["multiplex"] = state
            cam_ids = [cam_ids[k] for k in keep]
        if cfg.stop_iou is not None and steps % cfg.check_every == 0:
            b = best_hypothesis(bd.posterior) if bd.posterior.shape[0] == cams.shape[0] else 0
            iou = mask_iou(hard_silhouette(verts.detach(), cams[b].detach(), tpl.mesh.faces, gt_mask.shape[0]), gt_mask)
            if iou >= cfg.stop_iou:
                break

    target = fine
    raster = replace(raster, sigma=sigma_at(steps), image_h=cfg.render_size, image_w=cfg.render_size)
    with torch.no_grad():
        bd, verts, flow, tex, out = forward()
    best = best_hypothesis(bd.posterior)
    iou = mask_iou(hard_silhouette(verts, cams[best], tpl.mesh.faces, gt_mask.shape[0]), gt_mask)
    return FitResult(
        free_deform=free.detach().numpy().copy(),
        vertices=verts.numpy().copy(),
        faces=tpl.mesh.faces.copy(),
        multiplex=cams.detach().numpy().copy(),
        camera_ids=cam_ids,
        posterior=bd.posterior.numpy().copy(),
        best=best,
        flow=flow.numpy().copy(),
        texture=tex.numpy().copy(),
        loss_curve=curve,
        iou=iou,
        steps=steps,
        renders=out.color.numpy().copy(),
        silhouettes=out.silhouette.numpy().copy(),
    )


def rotation_error_deg(params_a, params_b) -> float:
    qa = normalize_quaternion(torch.as_tensor(np.asarray(params_a)[3:7], dtype=torch.float64))
    qb = normalize_quaternion(torch.as_tensor(np.asarray(params_b)[3:7], dtype=torch.float64))
    return float(geodesic_angle(qa, qb)) * 180.0 / math.pi


# ------------------------------------------------------------ evaluation


@dataclass
class Prediction:
    vertices: np.ndarray  # (V, 3)
    camera: np.ndarray  # projection params (log s, tx, ty, qw, qx, qy, qz)
    logits: np.ndarray | None = None


def oracle_predictor(mesh_level: int = 3):
    """Ground-truth 'model': GT deformation and camera, one-hot logits."""
    tpl = mesh_mod.template(mesh_level)

    def predict(rec, num_classes):
        verts = tpl.initial_vertices + mesh_mod.expand_symmetric(np.asarray(rec.free_deform), tpl.symmetry)
        logits = np.full(num_classes, -1.0)
        logits[rec.label] = 1.0
        return Prediction(verts, camera_to_params(rec.camera).numpy(), logits)

    return predict


def model_predictor(model: CanonicalModel):
    """Network prediction: template + decoded deformation, decoded camera, logits."""

    @torch.no_grad()
    def predict(rec, num_classes):
        dtype = model.template_vertices.dtype
        out = model(torch.as_tensor(np.asarray(rec.image)).to(dtype))
        cam = out["camera"][0].double()
        cam = torch.cat([cam[:3], normalize_quaternion(cam[3:])])
        return Prediction(out["vertices"][0].double().numpy(), cam.numpy(), out["logits"][0].double().numpy())

    return predict


def keypoint_vertices(pred: Prediction, kps, kp_vis, faces, size: int) -> np.ndarray:
    """Nearest visible projected vertex for every visible keypoint (-1 otherwise)."""
    uv, depth = project(torch.as_tensor(pred.camera), torch.as_tensor(pred.vertices))
    uv = uv.numpy()
    vis = vertex_visibility(uv, depth.numpy(), faces, size, size)
    pix = ndc_to_pixel(uv, size, size)
    kps = np.asarray(kps, dtype=np.float64)
    ids = np.full(len(kps), -1, dtype=np.int64)
    cand = np.flatnonzero(vis)
    for k in range(len(kps)):
        if not kp_vis[k] or cand.size == 0:
            continue
        d2 = ((pix[cand] - kps[k]) ** 2).sum(-1)
        ids[k] = cand[int(np.argmin(d2))]
    return ids


def vertex_pixels(pred: Prediction, size: int) -> np.ndarray:
    uv, _ = project(torch.as_tensor(pred.camera), torch.as_tensor(pred.vertices))
    return ndc_to_pixel(uv.numpy(), size, size)


def transfer_keypoints(src_pred: Prediction, src_kps, src_vis, tgt_pred: Prediction, faces, size: int):
    """Map source keypoints onto template vertices and reproject them into the target.

    Returns ``(vertex ids (K,), transferred pixel coords (K, 2))``; invisible
    source keypoints get vertex id -1 and NaN coordinates.
    """
    ids = keypoint_vertices(src_pred, src_kps, src_vis, faces, size)
    return ids, _moved(ids, vertex_pixels(tgt_pred, size))


def _moved(ids, pix_t):
    out = np.full((len(ids), 2), np.nan)
    ok = ids >= 0
    out[ok] = pix_t[ids[ok]]
    return out


def pck_pair(transferred, tgt_kps, tgt_vis, src_vis, size: int, alpha: float = 0.1):
    """(correct, counted) for one ordered pair of instances."""
    thresh = alpha * math.sqrt(2.0) * size
    ok = np.asarray(src_vis, bool) & np.asarray(tgt_vis, bool) & np.isfinite(transferred).all(-1)
    d = np.sqrt(((transferred[ok] - np.asarray(tgt_kps)[ok]) ** 2).sum(-1))
    return int((d <= thresh).sum()), int(ok.sum())


def evaluate(predict, records, num_classes: int, mesh_level: int = 3, metrics=("accuracy", "iou", "pck"),
             alpha: float = 0.1, max_pairs: int | None = None, seed: int = 0) -> dict:
    """Accuracy, best-camera mask IoU and PCK keypoint transfer over ``records``.

    Silhouettes for IoU come from the exact z-buffer rasterizer, so they are
    already binary.
    """
    tpl = mesh_mod.template(mesh_level)
    faces = tpl.mesh.faces
    records = list(records)
    preds = [predict(r, num_classes) for r in records]
    report = {"num_records": len(records), "notices": []}
    rows = []
    for r, p in zip(records, preds):
        row = {"id": r.id, "label": int(r.label)}
        if p.logits is not None:
            row["predicted"] = int(np.argmax(p.logits))
        if "iou" in metrics:
            size = r.mask.shape[0]
            row["iou"] = mask_iou(hard_silhouette(p.vertices, p.camera, faces, size), r.mask)
        rows.append(row)
    if "accuracy" in metrics:
        hits = [row["predicted"] == row["label"] for row in rows if "predicted" in row]
        report["accuracy"] = float(np.mean(hits)) if hits else None
    if "iou" in metrics:
        report["iou"] = float(np.mean([row["iou"] for row in rows])) if rows else None
    if "pck" in metrics:
        if any(getattr(r, "keypoints", None) is None or len(r.keypoints) == 0 for r in records):
            report["pck"] = None
            report["notices"].append("keypoint annotations missing; PCK skipped")
        else:
            pairs = [(i, j) for i in range(len(records)) for j in range(len(records)) if i != j]
            if not pairs and records:
                pairs = [(0, 0)]
            if max_pairs is not None and len(pairs) > max_pairs:
                rng = np.random.default_rng(seed)
                pairs = [pairs[k] for k in sorted(rng.choice(len(pairs), max_pairs, replace=False))]
            correct = counted = 0
            ids, pix = {}, {}
            for i, j in pairs:
                src, tgt = records[i], records[j]
                size = src.mask.shape[0]
                if i not in ids:
                    ids[i] = keypoint_vertices(preds[i], src.keypoints, src.keypoint_visible, faces, size)
                if j not in pix:
                    pix[j] = vertex_pixels(preds[j], size)
                moved = _moved(ids[i], pix[j])
                c, n = pck_pair(moved, tgt.keypoints, tgt.keypoint_visible, src.keypoint_visible, size, alpha)
                correct += c
                counted += n
            report["pck"] = correct / counted if counted else None
            report["pck_pairs"] = len(pairs)
            report["pck_keypoints"] = counted
    report["per_instance"] = rows
    return report
