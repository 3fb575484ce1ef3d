"""Joint end-to-end optimization of both generators, both discriminators, and
the pose estimator.

Update order inside one step is fixed for determinism: D on the enhanced pair,
then the enhancing generator, then D on the recovered pair, then the recovery
generator, then the pose estimator (optionally propagating pose gradients back
into the generators). All randomness is derived from (seed, epoch, batch,
scene id) so interrupted runs resume bit-exactly.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .domain import (
    BoundingBox, ImageBuffer, Keypoint, KEYPOINT_SCHEMAS, PersonAnnotation, Scene,
)
from .guidance import GuidanceSpec, derive_seed, make_guidance
from .metrics import default_sigmas
from .nets import (
    DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, PoseEstimator,
    PoseHeadConfig, build_generator, discriminator_forward, generator_forward,
    images_to_tensor, pose_forward,
)
from .objectives import (
    LossReport, LossWeights, consistency_loss, discriminator_loss,
    enhance_total_loss, gated_l1_loss, generator_adversarial_loss,
    joint_total_loss, l1_guidance_loss, pose_detection_loss, pose_domain_total,
    recovery_total_loss,
)
from .scene import extract_portraits

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 3.5e-5
    lr_pose: float = None       # defaults to lr0
    decay: float = 0.99
    epochs: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    guidance: GuidanceSpec = field(default_factory=lambda: GuidanceSpec("blur", 8))
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    pose: PoseHeadConfig = field(default_factory=PoseHeadConfig)
    portrait_size: tuple = (128, 128)
    augment: bool = True
    propagate_pe_to_generators: bool = True
    warmup_epochs_without_pe: int = 0
    grad_clip: float = 10.0
    gate_threshold: float = None  # None: 0.3 x mean L1(x, guidance) at startup

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return {
            "batch_size": self.batch_size, "lr0": self.lr0, "lr_pose": self.lr_pose,
            "decay": self.decay, "epochs": self.epochs, "seed": self.seed,
            "weights": self.weights.to_dict(), "guidance": self.guidance.to_dict(),
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "pose": self.pose.to_dict(), "portrait_size": list(self.portrait_size),
            "augment": self.augment,
            "propagate_pe_to_generators": self.propagate_pe_to_generators,
            "warmup_epochs_without_pe": self.warmup_epochs_without_pe,
            "grad_clip": self.grad_clip, "gate_threshold": self.gate_threshold,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = LossWeights.from_dict(d["weights"])
        d["guidance"] = GuidanceSpec.from_dict(d["guidance"])
        d["generator"] = GeneratorConfig.from_dict(d["generator"])
        d["discriminator"] = DiscriminatorConfig.from_dict(d["discriminator"])
        d["pose"] = PoseHeadConfig.from_dict(d["pose"])
        d["portrait_size"] = tuple(d["portrait_size"])
        return cls(**d)


class ModelBundle:
    """The five trainable modules plus their optimizers."""

    GEN_DISC = ("g_enhance", "g_recover", "d_enhanced", "d_recovered")

    def __init__(self, config):
        torch.manual_seed(config.seed)
        self.models = {
            "g_enhance": build_generator(config.generator),
            "g_recover": build_generator(config.generator),
            "d_enhanced": PatchDiscriminator(config.discriminator),
            "d_recovered": PatchDiscriminator(config.discriminator),
            "pose": PoseEstimator(config.pose),
        }
        lr_pose = config.lr_pose if config.lr_pose is not None else config.lr0
        self.optimizers = {}
        for name in self.GEN_DISC:
            self.optimizers[name] = torch.optim.Adam(
                self.models[name].parameters(), lr=config.lr0, betas=(0.5, 0.999))
        self.optimizers["pose"] = torch.optim.AdamW(
            self.models["pose"].parameters(), lr=lr_pose, weight_decay=0.01)

    def set_lr(self, factor, config):
        lr_pose = config.lr_pose if config.lr_pose is not None else config.lr0
        for name, opt in self.optimizers.items():
            base = lr_pose if name == "pose" else config.lr0
            for group in opt.param_groups:
                group["lr"] = base * factor

    def train(self):
        for m in self.models.values():
            m.train()

    def eval(self):
        for m in self.models.values():
            m.eval()


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    epoch: int = 0
    step: int = 0
    gate_threshold: float = None


def lr_at(config, epoch):
    """Exponentially decayed learning rate: lr0 * decay^epoch."""
    return config.lr0 * config.decay ** epoch


# --- augmentation ---------------------------------------------------------

def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    rng = maxc - minc
    s = np.where(maxc > 0, rng / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(rng, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(rng > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [
        np.stack([v, t, p], axis=-1), np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1), np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1), np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros_like(hsv)
    for k in range(6):
        out[i == k] = choices[k][i == k]
    return out


def apply_color_jitter(data, hue_shift, sat_scale, bright_scale):
    """Hue shift (wrapping), saturation and brightness scaling on RGB data."""
    if hue_shift == 0.0 and sat_scale == 1.0 and bright_scale == 1.0:
        return data.copy()
    if data.shape[2] != 3:
        return np.clip(data * bright_scale, 0.0, 1.0)
    hsv = _rgb_to_hsv(data.astype(np.float64))
    hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * bright_scale, 0.0, 1.0)
    return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)


def flip_annotation(ann, width):
    """Mirror keypoints (x -> W-1-x) and swap left/right schema labels;
    boxes use the half-open convention."""
    schema = KEYPOINT_SCHEMAS[ann.keypoint_schema]
    kps = [Keypoint(width - 1 - k.x, k.y, k.visibility) for k in ann.keypoints]
    for a, b in schema["flip_pairs"]:
        kps[a], kps[b] = kps[b], kps[a]
    box = BoundingBox(width - ann.bbox.x_max, ann.bbox.y_min,
                      width - ann.bbox.x_min, ann.bbox.y_max)
    return PersonAnnotation(box, tuple(kps), ann.keypoint_schema)


def augment(image, annotations, seed, force_flip=None):
    """Horizontal flip with p=0.5 plus hue/saturation/brightness jitter.

    Deterministic per seed. Returns (image, annotations).
    """
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    if force_flip is not None:
        flip = force_flip
    hue = rng.uniform(-0.05, 0.05)
    sat = rng.uniform(0.8, 1.2)
    bright = rng.uniform(0.8, 1.2)
    data = image.data
    anns = list(annotations)
    if flip:
        data = data[:, ::-1, :].copy()
        anns = [flip_annotation(a, image.width) for a in anns]
    data = apply_color_jitter(data, hue, sat, bright)
    return ImageBuffer(data, tag=image.tag), anns


def augment_scene(scene, seed):
    img, anns = augment(scene.image, scene.persons, seed)
    return Scene(image=img, persons=tuple(anns), id=scene.id)


# --- batch preparation ----------------------------------------------------

@dataclass
class TrainBatch:
    scenes: list                 # augmented scenes
    x: torch.Tensor              # (P, C, Hp, Wp) original portraits
    y: torch.Tensor              # (P, C, Hp, Wp) guidance portraits
    portrait_annotations: list   # per portrait, in portrait coordinates
    portrait_scene_index: list   # which scene each portrait belongs to
    portrait_transforms: list
    batch_id: str = ""


def prepare_batch(config, scenes, epoch, gate_seed_tag="train"):
    """Augment scenes, extract portraits, compute guidance targets."""
    aug_scenes = []
    for s in scenes:
        if config.augment:
            aug_scenes.append(augment_scene(
                s, derive_seed(config.seed, "aug", epoch, s.id)))
        else:
            aug_scenes.append(s)
    xs, ys, anns, scene_idx, transforms = [], [], [], [], []
    for si, s in enumerate(aug_scenes):
        batch = extract_portraits(s, [p.bbox for p in s.persons],
                                  config.portrait_size)
        for item in batch.portraits:
            xs.append(item.image)
            noise_seed = derive_seed(config.seed, "noise", s.id, item.index)
            ys.append(make_guidance(item.image, config.guidance, seed=noise_seed))
            anns.append(item.annotation)
            scene_idx.append(si)
            transforms.append(item.transform)
    if xs:
        x_t = images_to_tensor(xs)
        y_t = images_to_tensor(ys)
    else:
        hp, wp = config.portrait_size
        x_t = torch.zeros((0, 3, hp, wp))
        y_t = torch.zeros((0, 3, hp, wp))
    ids = ",".join(s.id for s in scenes)
    return TrainBatch(scenes=aug_scenes, x=x_t, y=y_t,
                      portrait_annotations=anns,
                      portrait_scene_index=scene_idx,
                      portrait_transforms=transforms,
                      batch_id=f"epoch{epoch}:{ids}")


def composite_batch_torch(batch, enhanced):
    """Differentiable composite of enhanced portraits over their scenes.

    Returns a (B, C, H, W) tensor; all scenes must share one canvas size.
    """
    sizes = {(s.image.height, s.image.width) for s in batch.scenes}
    if len(sizes) != 1:
        raise ValueError("scenes in a batch must share one canvas size")
    outs = []
    for si, s in enumerate(batch.scenes):
        base = torch.from_numpy(
            s.image.data.transpose(2, 0, 1).copy()).to(enhanced.dtype)
        out = base.clone()
        for pi, owner in enumerate(batch.portrait_scene_index):
            if owner != si:
                continue
            box = batch.portrait_transforms[pi].box
            patch = F.interpolate(enhanced[pi:pi + 1],
                                  size=(box.height, box.width),
                                  mode="bilinear", align_corners=True)[0]
            out[:, box.y_min:box.y_max, box.x_min:box.x_max] = patch
        outs.append(out)
    return torch.stack(outs)


# --- the training step ----------------------------------------------------

def _zero_all(bundle):
    for opt in bundle.optimizers.values():
        opt.zero_grad(set_to_none=True)


def _clip_step(bundle, names, clip):
    for name in names:
        torch.nn.utils.clip_grad_norm_(bundle.models[name].parameters(), clip)
        bundle.optimizers[name].step()


def train_step(state, batch):
    """One joint optimization step. Returns (state, LossReport)."""
    cfg = state.config
    w = cfg.weights
    gate_t = state.gate_threshold if state.gate_threshold is not None else w.gate_threshold
    bundle = state.bundle
    bundle.train()
    models = bundle.models
    report = LossReport()
    x, y = batch.x, batch.y

    if x.shape[0] > 0:
        # (1) enhanced portraits
        yp = generator_forward(models["g_enhance"], cfg.generator, x)

        # (2) discriminator on (guidance | enhanced), fake branch detached
        d_real = discriminator_forward(models["d_enhanced"], y, x)
        d_fake = discriminator_forward(models["d_enhanced"], yp.detach(), x)
        l_dy = discriminator_loss(d_real, d_fake)
        _zero_all(bundle)
        l_dy.backward()
        _clip_step(bundle, ["d_enhanced"], cfg.grad_clip)

        # (3) enhancing generator: adversarial + gated guidance L1
        d_fake2 = discriminator_forward(models["d_enhanced"], yp, x)
        l_gx = generator_adversarial_loss(d_fake2)
        l1 = l1_guidance_loss(yp, y)
        l_xy = gated_l1_loss(yp, y, gate_t)
        _zero_all(bundle)
        (l_gx + w.lambda1 * l_xy).backward()
        _clip_step(bundle, ["g_enhance"], cfg.grad_clip)

        # (4) recovered portraits from the updated enhancer
        with torch.no_grad():
            yp2 = generator_forward(models["g_enhance"], cfg.generator, x)
        xp = generator_forward(models["g_recover"], cfg.generator, yp2)

        # (5) discriminator on (original | recovered)
        dx_real = discriminator_forward(models["d_recovered"], x, yp2)
        dx_fake = discriminator_forward(models["d_recovered"], xp.detach(), yp2)
        l_dx = discriminator_loss(dx_real, dx_fake)
        _zero_all(bundle)
        l_dx.backward()
        _clip_step(bundle, ["d_recovered"], cfg.grad_clip)

        # (6) recovery generator: adversarial + cycle consistency
        dx_fake2 = discriminator_forward(models["d_recovered"], xp, yp2)
        l_gy = generator_adversarial_loss(dx_fake2)
        l_cons = consistency_loss(x, xp)
        _zero_all(bundle)
        (l_gy + w.lambda2 * l_cons).backward()
        _clip_step(bundle, ["g_recover"], cfg.grad_clip)

        report.disc_enhanced = float(l_dy.detach())
        report.gen_enhance_adv = float(l_gx.detach())
        report.l1_guidance = float(l1.detach())
        report.gated_guidance = float(l_xy.detach())
        report.disc_recovered = float(l_dx.detach())
        report.gen_recover_adv = float(l_gy.detach())
        report.consistency = float(l_cons.detach())

    report.enhance_total = float(enhance_total_loss(
        report.disc_enhanced, report.gen_enhance_adv,
        report.gated_guidance, w.lambda1))
    report.recovery_total = float(recovery_total_loss(
        report.gen_recover_adv, report.disc_recovered,
        report.consistency, w.lambda2))

    # (7) pose estimator on enhanced scenes and recovered portraits
    run_pe = (w.lambda3 > 0 and state.epoch >= cfg.warmup_epochs_without_pe
              and x.shape[0] > 0)
    if run_pe:
        sigmas = default_sigmas(batch.portrait_annotations[0].keypoint_schema)
        if cfg.propagate_pe_to_generators:
            ypg = generator_forward(models["g_enhance"], cfg.generator, x)
            xpg = generator_forward(models["g_recover"], cfg.generator, ypg)
        else:
            ypg = yp2
            xpg = xp.detach()
        enhanced_scenes = composite_batch_torch(batch, ypg)
        grids_y = pose_forward(models["pose"], enhanced_scenes)
        scene_anns = [list(s.persons) for s in batch.scenes]
        by, py_, oy, cy, ty = pose_detection_loss(
            grids_y, scene_anns, cfg.pose, sigmas.values)
        grids_x = pose_forward(models["pose"], xpg)
        per_portrait = [[a] for a in batch.portrait_annotations]
        bx, px_, ox, cx_, tx = pose_detection_loss(
            grids_x, per_portrait, cfg.pose, sigmas.values)
        pe = pose_domain_total(tx, ty)
        _zero_all(bundle)
        (w.lambda3 * pe).backward()
        step_names = ["pose"]
        if cfg.propagate_pe_to_generators:
            step_names += ["g_enhance", "g_recover"]
        _clip_step(bundle, step_names, cfg.grad_clip)
        report.bbox = float((by + bx).detach())
        report.pose = float((py_ + px_).detach())
        report.objectness = float((oy + ox).detach())
        report.classification = float((cy + cx_).detach())
        report.pe_enhanced = float(ty.detach())
        report.pe_recovered = float(tx.detach())

    report.pe_total = float(pose_domain_total(
        report.pe_recovered, report.pe_enhanced))
    report.total = float(joint_total_loss(
        report.enhance_total, report.recovery_total, report.pe_total, w.lambda3))

    if not report.all_finite():
        raise RuntimeError(
            f"non-finite loss at step {state.step} (batch {batch.batch_id})")
    state.step += 1
    return state, report


# --- the fit loop ---------------------------------------------------------

def compute_gate_threshold(config, scenes, max_scenes=64):
    """0.3 x mean guidance L1 over (a sample of) the training portraits."""
    totals = []
    for s in scenes[:max_scenes]:
        batch = extract_portraits(s, [p.bbox for p in s.persons],
                                  config.portrait_size)
        for item in batch.portraits:
            seed = derive_seed(config.seed, "noise", s.id, item.index)
            g = make_guidance(item.image, config.guidance, seed=seed)
            totals.append(float(np.abs(item.image.data - g.data).mean()))
    if not totals:
        raise ValueError("no portraits available to calibrate the gate threshold")
    return 0.3 * float(np.mean(totals))


def init_state(config, scenes):
    bundle = ModelBundle(config)
    gate = config.gate_threshold
    if gate is None:
        gate = compute_gate_threshold(config, scenes)
    return TrainState(config=config, bundle=bundle, gate_threshold=gate)


def fit(config, scenes, out_dir, state=None, eval_fn=None, eval_every=0,
        log_name="train_log.jsonl"):
    """Run the joint loop for config.epochs epochs over shuffled batches.

    Checkpoints every epoch into out_dir; appends one JSON line per step to the
    training log. Returns (state, history).
    """
    if not scenes:
        raise ValueError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    if state is None:
        state = init_state(config, scenes)
        save_checkpoint(state, os.path.join(out_dir, "checkpoint_epoch0.pt"))
    else:
        # the config argument is authoritative: callers may resume a state
        # under adjusted settings (e.g. a different schedule or loss weights)
        state.config = config
    history = []
    log_path = os.path.join(out_dir, log_name)
    with open(log_path, "a") as log:
        for epoch in range(state.epoch, config.epochs):
            factor = config.decay ** epoch
            state.bundle.set_lr(factor, config)
            order = np.random.default_rng(
                derive_seed(config.seed, "shuffle", epoch)).permutation(len(scenes))
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = prepare_batch(config, [scenes[i] for i in idx], epoch)
                state, report = train_step(state, batch)
                history.append(report)
                rec = {"step": state.step, "epoch": epoch,
                       "lr": lr_at(config, epoch)}
                rec.update(report.to_dict())
                log.write(json.dumps(rec) + "\n")
            state.epoch = epoch + 1
            save_checkpoint(state, os.path.join(
                out_dir, f"checkpoint_epoch{state.epoch}.pt"))
            if eval_fn is not None and eval_every and state.epoch % eval_every == 0:
                eval_fn(state)
    return state, history


# --- checkpointing --------------------------------------------------------

def save_checkpoint(state, path):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "gate_threshold": state.gate_threshold,
        "models": {k: m.state_dict() for k, m in state.bundle.models.items()},
        "optimizers": {k: o.state_dict() for k, o in state.bundle.optimizers.items()},
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as e:
        raise ValueError(f"corrupt checkpoint archive {path}: {e}") from e
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"corrupt checkpoint archive {path}: missing header")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: file has {payload['version']}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    config = TrainConfig.from_dict(payload["config"])
    bundle = ModelBundle(config)
    for k, m in bundle.models.items():
        m.load_state_dict(payload["models"][k])
    for k, o in bundle.optimizers.items():
        o.load_state_dict(payload["optimizers"][k])
    torch.set_rng_state(payload["torch_rng"])
    return TrainState(config=config, bundle=bundle, epoch=payload["epoch"],
                      step=payload["step"],
                      gate_threshold=payload["gate_threshold"])
