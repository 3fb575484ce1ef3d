"""Inference and evaluation plumbing: run the generators over scenes, build
privacy-enhanced and recovered composites, and score image quality plus pose
estimation the way the result tables expect."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .domain import ImageBuffer
from .metrics import ap_ar_at_50, default_sigmas, psnr, ssim
from .nets import (
    decode_detections, generator_forward, images_to_tensor, pose_forward,
    tensor_to_images,
)
from .scene import PortraitBatch, PortraitItem, composite, extract_portraits

PSNR_CAP_DB = 60.0  # finite stand-in for identical portrait pairs when averaging


@dataclass
class SceneRecord:
    """Per-scene artifacts from one enhance/recover pass."""

    scene: object
    enhanced: ImageBuffer
    recovered: ImageBuffer
    boxes: list
    original_portraits: list
    enhanced_portraits: list
    recovered_portraits: list


def _replace_images(batch, images):
    items = [PortraitItem(image=im, annotation=it.annotation, scene_id=it.scene_id,
                          index=it.index, transform=it.transform)
             for it, im in zip(batch.portraits, images)]
    return PortraitBatch(portraits=items, resolution=batch.resolution)


def enhance_and_recover_scene(bundle, config, scene):
    """Run G over one scene's portraits; composite both output domains."""
    batch = extract_portraits(scene, [p.bbox for p in scene.persons],
                              config.portrait_size)
    if not batch.portraits:
        return SceneRecord(scene=scene, enhanced=scene.image,
                           recovered=scene.image, boxes=[],
                           original_portraits=[], enhanced_portraits=[],
                           recovered_portraits=[])
    x = images_to_tensor([it.image for it in batch.portraits])
    with torch.no_grad():
        yp = generator_forward(bundle.models["g_enhance"], config.generator, x)
        xp = generator_forward(bundle.models["g_recover"], config.generator, yp)
    enhanced_portraits = tensor_to_images(yp)
    recovered_portraits = tensor_to_images(xp)
    enhanced = composite(scene, _replace_images(batch, enhanced_portraits))
    recovered = composite(scene, _replace_images(batch, recovered_portraits))
    boxes = [it.transform.box for it in batch.portraits]
    return SceneRecord(scene=scene, enhanced=enhanced, recovered=recovered,
                       boxes=boxes,
                       original_portraits=[it.image for it in batch.portraits],
                       enhanced_portraits=enhanced_portraits,
                       recovered_portraits=recovered_portraits)


def run_scenes(bundle, config, scenes):
    bundle.eval()
    return [enhance_and_recover_scene(bundle, config, s) for s in scenes]


def _mean_quality(pairs):
    psnrs, ssims = [], []
    for a, b in pairs:
        v = psnr(a, b)
        psnrs.append(min(v, PSNR_CAP_DB))
        ssims.append(ssim(a, b))
    if not psnrs:
        return float("nan"), float("nan")
    return float(np.mean(psnrs)), float(np.mean(ssims))


def portrait_image_quality(records):
    """Portrait-level mean PSNR/SSIM for (original, enhanced) and
    (original, recovered)."""
    op = []
    orr = []
    for r in records:
        for o, p, rec in zip(r.original_portraits, r.enhanced_portraits,
                             r.recovered_portraits):
            op.append((o, p))
            orr.append((o, rec))
    psnr_op, ssim_op = _mean_quality(op)
    psnr_or, ssim_or = _mean_quality(orr)
    return {"psnr_op": psnr_op, "ssim_op": ssim_op,
            "psnr_or": psnr_or, "ssim_or": ssim_or}


def detect_scenes(pose_model, pose_config, images_by_scene_id, schema,
                  obj_threshold=0.25):
    """Run the pose estimator over full scene images; decode detections."""
    pose_model.eval()
    detections = {}
    for sid, image in images_by_scene_id.items():
        t = images_to_tensor([image])
        with torch.no_grad():
            grid = pose_forward(pose_model, t)[0]
        dets = decode_detections(grid, pose_config, schema=schema,
                                 obj_threshold=obj_threshold)
        detections[sid] = [{"keypoints": d["keypoints"], "score": d["score"]}
                           for d in dets]
    return detections


def pose_quality(pose_model, pose_config, scenes, images_by_scene_id, schema):
    """mAP@0.5 / mAR@0.5 of a pose estimator on the given scene images."""
    dets = detect_scenes(pose_model, pose_config, images_by_scene_id, schema)
    return ap_ar_at_50(dets, scenes)


def train_pose_estimator(pose_config, scenes, images_by_scene_id, steps,
                         batch_size=8, lr=1e-3, seed=0, model=None):
    """Train (or finetune) a standalone pose estimator on fixed scene images.

    Used for the {pre, *} baselines: an estimator trained on originals or on
    conventionally desensitized images, outside the joint loop.
    """
    from .nets import PoseEstimator
    from .objectives import pose_detection_loss

    if model is None:
        torch.manual_seed(seed)
        model = PoseEstimator(pose_config)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    schema = None
    for s in scenes:
        if s.persons:
            schema = s.persons[0].keypoint_schema
            break
    sigmas = default_sigmas(schema or "synth-13")
    for _ in range(steps):
        idx = rng.choice(len(scenes), size=min(batch_size, len(scenes)),
                         replace=False)
        chosen = [scenes[i] for i in idx]
        t = images_to_tensor([images_by_scene_id[s.id] for s in chosen])
        grids = pose_forward(model, t)
        anns = [list(s.persons) for s in chosen]
        *_, total = pose_detection_loss(grids, anns, pose_config, sigmas.values)
        opt.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 10.0)
        opt.step()
    model.eval()
    return model


def guidance_convergence_flag(history, gate_threshold, window=100):
    """True when the recent raw guidance L1 stays at or above 2x the gate
    threshold: the guidance style was not learned (seen with noise guidance)."""
    l1s = [h.l1_guidance for h in history[-window:] if h.l1_guidance > 0]
    if not l1s:
        return False
    return float(np.mean(l1s)) >= 2.0 * gate_threshold


def evaluate_run(state, scenes, history=None, pretrained_pose=None,
                 schema="synth-13"):
    """Full evaluation of a trained state on held-out scenes.

    Returns a dict shaped for the report tables: portrait image quality plus
    mAP/mAR for the jointly trained estimator on enhanced and recovered scenes,
    and optionally a pretrained estimator on originals and enhanced scenes.
    """
    cfg = state.config
    records = run_scenes(state.bundle, cfg, scenes)
    out = portrait_image_quality(records)
    originals = {r.scene.id: r.scene.image for r in records}
    enhanced = {r.scene.id: r.enhanced for r in records}
    recovered = {r.scene.id: r.recovered for r in records}
    joint = state.bundle.models["pose"]
    out["map50_joint_p"], out["mar50_joint_p"] = pose_quality(
        joint, cfg.pose, scenes, enhanced, schema)
    out["map50_joint_r"], out["mar50_joint_r"] = pose_quality(
        joint, cfg.pose, scenes, recovered, schema)
    if pretrained_pose is not None:
        out["map50_pre_o"], out["mar50_pre_o"] = pose_quality(
            pretrained_pose, cfg.pose, scenes, originals, schema)
        out["map50_pre_p"], out["mar50_pre_p"] = pose_quality(
            pretrained_pose, cfg.pose, scenes, enhanced, schema)
    if history is not None:
        out["guidance_l1_not_converged"] = guidance_convergence_flag(
            history, state.gate_threshold)
        out["gate_threshold"] = state.gate_threshold
    return out
