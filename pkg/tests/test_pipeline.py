import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from canon3d import mesh as mesh_mod
from canon3d import pipeline as P
from canon3d.camera import init_multiplex, project, view_quaternion
from canon3d.errors import DataValidationError, NumericalError
from canon3d.synth import (
    SynthSpec,
    camera_to_params,
    generate_records,
    hard_rasterize,
    ndc_to_pixel,
    render_record,
    vertex_visibility,
)

TINY_MODEL = dict(image_size=32, latent_dim=64, mesh_level=1, backbone_channels=(4, 4, 8, 8), reduce_channels=4,
                  flow_channels=(8, 4, 4, 4), appearance_dim=8, shape_hidden=16, fusion_hidden=8)


@pytest.fixture(scope="module")
def tiny_records():
    spec = SynthSpec(num_classes=2, instances_per_class=2, test_fraction=0.0, image_size=32, mesh_level=2,
                     num_keypoints=6, archetypes=["crest", "belly"])
    return generate_records(spec)


def tiny_config(**kw):
    base = dict(num_cameras=2, render_size=16, model=TINY_MODEL, lr=1e-3, epochs_a=50, epochs_b=30, seed=0)
    base.update(kw)
    return P.TrainConfig(**base)


def run_logged(trainer, max_steps):
    rows = []
    trainer.train_phase_a(max_steps=max_steps, log=rows.append)
    return rows


# ------------------------------------------------------------ small helpers


def test_best_hypothesis_ties_lowest_index():
    assert P.best_hypothesis(torch.tensor([0.2, 0.4, 0.4])) == 1
    assert P.best_hypothesis(torch.tensor([0.5, 0.5])) == 0


def test_mask_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    assert P.mask_iou(a, a) == 1.0
    assert P.mask_iou(a, b) == pytest.approx(4 / 12)
    assert P.mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_make_target_rejects_empty_mask():
    with pytest.raises(DataValidationError):
        P.make_target(np.zeros((8, 8, 3)), np.zeros((8, 8)), 8)


def test_fit_rejects_empty_mask():
    with pytest.raises(DataValidationError):
        P.fit_single(np.zeros((32, 32, 3)), np.zeros((32, 32), bool), P.FitConfig(steps=1, render_size=32))


def test_rotation_error_double_cover():
    a = np.array([0.0, 0, 0, 1.0, 0, 0, 0])
    b = a.copy()
    b[3:] = -b[3:]
    assert P.rotation_error_deg(a, b) == pytest.approx(0.0, abs=1e-6)


# ------------------------------------------------------------ trainer


def test_trainer_rejects_bad_records(tiny_records):
    with pytest.raises(DataValidationError):
        P.Trainer(tiny_config(), [], 2)
    with pytest.raises(DataValidationError, match="duplicate"):
        P.Trainer(tiny_config(), [tiny_records[0], tiny_records[0]], 2)
    with pytest.raises(DataValidationError, match="label"):
        P.Trainer(tiny_config(), tiny_records, 1)


def test_single_camera_posterior_is_one(tiny_records):
    tr = P.Trainer(tiny_config(num_cameras=1), tiny_records, 2)
    with torch.no_grad():
        bd = tr.instance_losses(tiny_records[0])
    assert bd.posterior.shape == (1,)
    assert float(bd.posterior[0]) == 1.0


def test_multiplex_independence(tiny_records):
    tr = P.Trainer(tiny_config(), tiny_records, 2)
    before = {r.id: tr.store[f"multiplex/{r.id}"].detach().clone() for r in tiny_records}
    tr.phase_a_step(tiny_records[0])
    for r in tiny_records:
        after = tr.store[f"multiplex/{r.id}"]
        if r.id == tiny_records[0].id:
            assert not torch.equal(after, before[r.id])
        else:
            assert torch.equal(after, before[r.id])


def test_quaternions_stay_unit(tiny_records):
    tr = P.Trainer(tiny_config(), tiny_records, 2)
    tr.train_phase_a(max_steps=4)
    for r in tiny_records:
        q = tr.store[f"multiplex/{r.id}"][:, 3:]
        torch.testing.assert_close(q.norm(dim=-1), torch.ones(q.shape[0]), atol=1e-6, rtol=0)


def test_non_finite_loss_names_instance(tiny_records):
    tr = P.Trainer(tiny_config(), tiny_records, 2)
    rec = tiny_records[1]
    tr.targets[rec.id].render_image[0, 0, 0] = float("nan")
    tr.targets[rec.id].render_mask[0, 0] = 1.0
    with pytest.raises(NumericalError, match=rec.id):
        tr.phase_a_step(rec)


def test_reproducible_logs(tiny_records):
    a = run_logged(P.Trainer(tiny_config(), tiny_records, 2), 6)
    b = run_logged(P.Trainer(tiny_config(), tiny_records, 2), 6)
    assert a == b


def test_resume_bit_exact(tiny_records, tmp_path):
    ref = P.Trainer(tiny_config(), tiny_records, 2)
    ref.train_phase_a(max_steps=3)
    ref.save(tmp_path / "ckpt.npz")
    expected = run_logged(ref, 5)

    res = P.Trainer(tiny_config(), tiny_records, 2)
    res.load(tmp_path / "ckpt.npz")
    assert res.step == 3
    got = run_logged(res, 5)
    assert got == expected
    for name in ref.store.names():
        assert torch.equal(ref.store[name], res.store[name]), name


def test_epoch_order_is_a_permutation(tiny_records):
    tr = P.Trainer(tiny_config(), tiny_records, 2)
    for e in range(3):
        assert sorted(tr.epoch_order(e)) == list(range(len(tiny_records)))


# ------------------------------------------------------------ phase B


def test_camera_regression_zero_and_double_cover():
    t = torch.tensor([0.1, 0.2, -0.1, 0.5, 0.5, 0.5, 0.5], dtype=torch.float64)
    assert float(P.Trainer.camera_regression_loss(t, t)) == pytest.approx(0.0, abs=1e-12)
    neg = t.clone()
    neg[3:] = -neg[3:]
    pred = t + 0.05
    assert float(P.Trainer.camera_regression_loss(pred, t)) == pytest.approx(
        float(P.Trainer.camera_regression_loss(pred, neg)), abs=1e-12)


def test_phase_b_reduces_error_and_keeps_accuracy(tiny_records):
    tr = P.Trainer(tiny_config(), tiny_records, 2)
    tr.train_phase_a(max_steps=8)
    acc0 = P.evaluate(P.model_predictor(tr.model), tiny_records, 2, metrics=("accuracy",))
    frozen = {n: tr.store[n].detach().clone() for n in tr.store.names() if not n.startswith("camera_decoder.")}
    out = tr.train_phase_b()
    assert out["geodesic_after"] < out["geodesic_before"]
    for n, v in frozen.items():
        assert torch.equal(tr.store[n], v), n
    acc1 = P.evaluate(P.model_predictor(tr.model), tiny_records, 2, metrics=("accuracy",))
    assert acc0["accuracy"] == acc1["accuracy"]
    assert [r["predicted"] for r in acc0["per_instance"]] == [r["predicted"] for r in acc1["per_instance"]]


# ------------------------------------------------------------ fitting


def _template_target(params, size=32, level=2, colors=None):
    tpl = mesh_mod.template(level)
    uv, depth = project(torch.as_tensor(params), torch.as_tensor(tpl.initial_vertices))
    nf = len(tpl.mesh.faces)
    cols = np.tile([0.8, 0.3, 0.2], (nf, 1)) if colors is None else colors
    img, mask, _ = hard_rasterize(uv.numpy(), depth.numpy(), tpl.mesh.faces, cols, size, size)
    return img, mask


def test_fit_self_refit_from_rig_camera():
    rig = init_multiplex(8, dtype=torch.float64)
    img, mask = _template_target(rig[2])
    cfg = P.FitConfig(steps=200, anneal_steps=100, render_size=32, coarse_size=None, mesh_level=2, prune_after=None)
    res = P.fit_single(img, mask, cfg)
    assert res.iou >= 0.95
    assert np.abs(res.free_deform).mean() < 0.05


def test_fit_flat_color_pixel_loss_vanishes():
    rig = init_multiplex(8, dtype=torch.float64)
    img, mask = _template_target(rig[0])
    rows = []
    cfg = P.FitConfig(steps=200, anneal_steps=100, render_size=32, coarse_size=None, mesh_level=2, prune_after=None)
    res = P.fit_single(img, mask, cfg, log=rows.append)
    pix = np.asarray(rows[-1]["pixel"])
    assert pix[res.best] < 1e-3


def test_fit_multi_hypothesis_reaches_azimuth_180():
    spec = SynthSpec(num_classes=1, instances_per_class=1, test_fraction=0.0, archetypes=["beak"], noise=0.0,
                     texture_mode="positional", mesh_level=3)
    rec = generate_records(spec)[0]
    q = view_quaternion(180.0, 0.0).numpy()
    camera = np.array([0.9, 0.0, 0.0, *q])
    img, mask, _, _ = render_record(spec, 0, camera, rec.free_deform)
    res = P.fit_single(img, mask, P.FitConfig(num_cameras=8, seed=0))
    assert res.iou >= 0.9


# ------------------------------------------------------------ evaluation


@pytest.fixture(scope="module")
def eval_records():
    spec = SynthSpec(num_classes=2, instances_per_class=3, test_fraction=0.0, image_size=32, mesh_level=2,
                     num_keypoints=8, archetypes=["crest", "flat"])
    return generate_records(spec)


def test_oracle_metrics_exact(eval_records):
    rep = P.evaluate(P.oracle_predictor(2), eval_records, 2, mesh_level=2)
    assert rep["accuracy"] == 1.0
    assert rep["iou"] == 1.0
    assert rep["pck"] == 1.0


def test_identity_pair_pck(eval_records):
    rep = P.evaluate(P.oracle_predictor(2), eval_records[:1], 2, mesh_level=2, metrics=("pck",))
    assert rep["pck_pairs"] == 1
    assert rep["pck"] == 1.0


def _noisy_predictor(level, scale, seed):
    base = P.oracle_predictor(level)
    rng = np.random.default_rng(seed)
    jitter = {}

    def predict(rec, n):
        p = base(rec, n)
        if rec.id not in jitter:
            jitter[rec.id] = (rng.normal(size=p.vertices.shape) * scale, rng.normal(size=7) * scale)
        dv, dc = jitter[rec.id]
        cam = p.camera + dc
        cam[3:] /= np.linalg.norm(cam[3:])
        return P.Prediction(p.vertices + dv, cam, p.logits)

    return predict


def _brute_force_pck(preds, records, faces, alpha):
    correct = counted = 0
    for i, src in enumerate(records):
        size = src.mask.shape[0]
        ps = preds[i]
        uv_s, d_s = project(torch.as_tensor(ps.camera), torch.as_tensor(ps.vertices))
        vis = vertex_visibility(uv_s.numpy(), d_s.numpy(), faces, size, size)
        pix_s = ndc_to_pixel(uv_s.numpy(), size, size)
        for j, tgt in enumerate(records):
            if i == j:
                continue
            pt = preds[j]
            uv_t, _ = project(torch.as_tensor(pt.camera), torch.as_tensor(pt.vertices))
            pix_t = ndc_to_pixel(uv_t.numpy(), size, size)
            for k in range(len(src.keypoints)):
                if not (src.keypoint_visible[k] and tgt.keypoint_visible[k]):
                    continue
                best, best_d = -1, math.inf
                for v in range(len(pix_s)):
                    if not vis[v]:
                        continue
                    d = (pix_s[v, 0] - src.keypoints[k, 0]) ** 2 + (pix_s[v, 1] - src.keypoints[k, 1]) ** 2
                    if d < best_d:
                        best, best_d = v, d
                if best < 0:
                    continue
                counted += 1
                err = math.hypot(*(pix_t[best] - tgt.keypoints[k]))
                correct += err <= alpha * math.sqrt(2.0) * size
    return correct / counted


@pytest.mark.parametrize("scale", [0.02, 0.08])
def test_pck_matches_brute_force(eval_records, scale):
    predict = _noisy_predictor(2, scale, seed=5)
    preds = [predict(r, 2) for r in eval_records]
    faces = mesh_mod.template(2).mesh.faces
    expected = _brute_force_pck(preds, eval_records, faces, 0.1)
    rep = P.evaluate(lambda r, n: preds[[x.id for x in eval_records].index(r.id)], eval_records, 2,
                     mesh_level=2, metrics=("pck",))
    assert abs(rep["pck"] - expected) <= 1e-6


def test_missing_keypoints_skips_pck(eval_records):
    recs = [replace(r, keypoints=np.zeros((0, 2)), keypoint_visible=np.zeros(0, bool)) for r in eval_records]
    rep = P.evaluate(P.oracle_predictor(2), recs, 2, mesh_level=2)
    assert rep["pck"] is None
    assert any("PCK skipped" in n for n in rep["notices"])
    assert rep["iou"] == 1.0
