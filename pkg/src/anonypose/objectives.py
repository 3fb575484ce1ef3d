"""Every training loss as a pure differentiable function over model outputs.

GAN losses take raw logits and use log-sigmoid internally (natural log) for
numerical stability. The guidance L1 is gated: below the threshold T it
contributes exactly zero value and zero gradient, so the enhancing generator is
free to deviate from the desensitization style once it is close enough.
"""

from dataclasses import dataclass, asdict, fields

import torch
import torch.nn.functional as F

from .domain import Visibility
from .nets import decode_boxes, decode_keypoints


@dataclass(frozen=True)
class LossWeights:
    """Weights for guidance L1 (lambda1), consistency (lambda2), pose feedback
    (lambda3), and the L1 gating threshold (in mean-absolute-difference units
    of [0,1] pixels)."""

    lambda1: float = 100.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    gate_threshold: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValueError(f"{f.name} must be a finite non-negative real")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossReport:
    """Per-term loss values for one training step."""

    disc_enhanced: float = 0.0       # discriminator on guidance vs enhanced
    gen_enhance_adv: float = 0.0     # enhancing generator adversarial term
    l1_guidance: float = 0.0         # raw L1 to the guidance portrait
    gated_guidance: float = 0.0      # L1 after threshold gating
    enhance_total: float = 0.0
    gen_recover_adv: float = 0.0     # recovery generator adversarial term
    disc_recovered: float = 0.0      # discriminator on original vs recovered
    consistency: float = 0.0         # ||recovered - original||_1
    recovery_total: float = 0.0
    bbox: float = 0.0
    pose: float = 0.0
    objectness: float = 0.0
    classification: float = 0.0
    pe_recovered: float = 0.0        # detection loss on recovered images
    pe_enhanced: float = 0.0         # detection loss on enhanced images
    pe_total: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def all_finite(self):
        import math
        return all(math.isfinite(v) for v in self.to_dict().values())


def _check_finite(t, name):
    if not torch.isfinite(t).all():
        raise ValueError(f"non-finite values in {name}")


def discriminator_loss(real_logits, fake_logits):
    """-E[log sigma(real)] - E[log(1 - sigma(fake))], mean over grid and batch.

    The caller detaches the fake image before running the discriminator, so no
    gradient reaches the generator through this loss.
    """
    if real_logits.shape != fake_logits.shape:
        raise ValueError("real and fake logit grids must share a shape")
    _check_finite(real_logits, "real logits")
    _check_finite(fake_logits, "fake logits")
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def generator_adversarial_loss(fake_logits):
    """-E[log sigma(fake)]: the generator tries to make fakes look real."""
    _check_finite(fake_logits, "fake logits")
    return F.softplus(-fake_logits).mean()


def l1_guidance_loss(generated, guidance):
    """Mean absolute difference over all pixels and batch entries."""
    if generated.shape != guidance.shape:
        raise ValueError(
            f"shape mismatch {tuple(generated.shape)} vs {tuple(guidance.shape)}"
        )
    return (generated - guidance).abs().mean()


def gated_l1_loss(generated, guidance, threshold):
    """L1 if L1 >= threshold, else exactly zero (zero gradient too)."""
    if threshold < 0:
        raise ValueError("gate threshold must be >= 0")
    l1 = l1_guidance_loss(generated, guidance)
    if float(l1.detach()) >= threshold:
        return l1
    return torch.zeros((), dtype=l1.dtype)


def enhance_total_loss(disc_term, gen_term, gated_term, lambda1):
    return disc_term + gen_term + lambda1 * gated_term


def consistency_loss(original, recovered):
    """Mean absolute difference between originals and their recovered images."""
    return l1_guidance_loss(recovered, original)


def recovery_total_loss(gen_term, disc_term, consistency_term, lambda2):
    return gen_term + disc_term + lambda2 * consistency_term


def _keypoint_weights(annotation, sigmas):
    """Per-keypoint 1/(2 s^2 k_i^2) weights; s^2 is the GT box area."""
    area = float(annotation.bbox.area)
    return [1.0 / (2.0 * max(area, 1e-6) * k * k) for k in sigmas]


def pose_detection_loss(pred_grids, annotations_per_image, config, sigmas):
    """Four-term detection loss on a batch of pose grids.

    pred_grids: (B, C, Hs, Ws) tensor; annotations_per_image: list (length B)
    of lists of PersonAnnotation in image pixel coordinates.

    Terms: bbox = mean (1 - IoU) over positive cells; pose = normalized squared
    keypoint error (weighted by the OKS exponent 1/(2 s^2 k_i^2)) over visible
    keypoints; objectness = BCE over every cell; classification = BCE of the
    single "human" class over positive cells.
    Returns (bbox, pose, objectness, classification, total) as 0-d tensors.
    """
    from .nets import encode_targets

    b, c, hs, ws = pred_grids.shape
    s = config.grid_stride
    dtype = pred_grids.dtype
    zero = torch.zeros((), dtype=dtype)
    bbox_terms = []
    pose_terms = []
    cls_terms = []
    obj_losses = []
    for bi in range(b):
        grid = pred_grids[bi]
        anns = annotations_per_image[bi]
        obj_target = torch.zeros((hs, ws), dtype=dtype)
        cx, cy, bw, bh = decode_boxes(grid, config)
        kx, ky, kv = decode_keypoints(grid, config)
        for ann in anns:
            box = ann.bbox
            gcx = (box.x_min + box.x_max) / 2.0
            gcy = (box.y_min + box.y_max) / 2.0
            ci = int(gcx // s)
            cj = int(gcy // s)
            if not (0 <= ci < ws and 0 <= cj < hs):
                raise ValueError(f"target center ({gcx}, {gcy}) outside grid")
            obj_target[cj, ci] = 1.0
            # IoU between the decoded box at the assigned cell and the GT box
            px0 = cx[cj, ci] - bw[cj, ci] / 2
            py0 = cy[cj, ci] - bh[cj, ci] / 2
            px1 = cx[cj, ci] + bw[cj, ci] / 2
            py1 = cy[cj, ci] + bh[cj, ci] / 2
            ix0 = torch.maximum(px0, torch.as_tensor(float(box.x_min), dtype=dtype))
            iy0 = torch.maximum(py0, torch.as_tensor(float(box.y_min), dtype=dtype))
            ix1 = torch.minimum(px1, torch.as_tensor(float(box.x_max), dtype=dtype))
            iy1 = torch.minimum(py1, torch.as_tensor(float(box.y_max), dtype=dtype))
            inter = ix1.sub(ix0).clamp(min=0) * iy1.sub(iy0).clamp(min=0)
            union = (px1 - px0) * (py1 - py0) + box.area - inter
            bbox_terms.append(1.0 - inter / union.clamp(min=1e-9))
            cls_terms.append(F.binary_cross_entropy_with_logits(
                grid[5, cj, ci], torch.ones((), dtype=dtype)))
            weights = _keypoint_weights(ann, sigmas)
            for k, kp in enumerate(ann.keypoints):
                if kp.visibility != Visibility.VISIBLE:
                    continue
                d2 = (kx[k, cj, ci] - kp.x) ** 2 + (ky[k, cj, ci] - kp.y) ** 2
                pose_terms.append(weights[k] * d2)
        obj_losses.append(F.binary_cross_entropy_with_logits(grid[4], obj_target))
    bbox_loss = torch.stack(bbox_terms).mean() if bbox_terms else zero
    pose_loss = torch.stack(pose_terms).mean() if pose_terms else zero
    cls_loss = torch.stack(cls_terms).mean() if cls_terms else zero
    obj_loss = torch.stack(obj_losses).mean() if obj_losses else zero
    total = bbox_loss + pose_loss + obj_loss + cls_loss
    return bbox_loss, pose_loss, obj_loss, cls_loss, total


def pose_domain_total(pe_recovered, pe_enhanced):
    """Sum of the detection losses on recovered and enhanced images."""
    return pe_recovered + pe_enhanced


def joint_total_loss(enhance_term, recovery_term, pe_term, lambda3):
    return enhance_term + recovery_term + lambda3 * pe_term
