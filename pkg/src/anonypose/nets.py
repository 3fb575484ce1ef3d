"""Generators, patch discriminators, and the pose estimator head.

Generators map [0,1] images to [0,1] images (sigmoid output). The U-Net
variants keep a skip connection at every level; the ResNet variants downsample
twice, run residual blocks, and upsample. Discriminators emit per-patch logits
(probabilities only at the loss boundary). The pose estimator is a minimal
single-scale anchor-free detector with a per-cell layout of
[tx, ty, tw, th, objectness, class, (kx, ky, kv) * K].
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .domain import BoundingBox, ImageBuffer, Keypoint, Visibility

GENERATOR_BACKBONES = ("unet_7", "unet_8", "resnet_6", "resnet_9")


@dataclass(frozen=True)
class GeneratorConfig:
    backbone: str = "unet_7"
    base_width: int = 16
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.backbone not in GENERATOR_BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")

    @property
    def divisibility(self):
        """Input dims must be divisible by this multiple."""
        if self.backbone.startswith("unet_"):
            return 2 ** int(self.backbone.split("_")[1])
        return 4  # resnet: two stride-2 downsamples

    def to_dict(self):
        return {"backbone": self.backbone, "base_width": self.base_width,
                "in_channels": self.in_channels, "out_channels": self.out_channels}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorConfig:
    patch_levels: int = 3
    base_width: int = 16
    conditional: bool = True
    in_channels: int = 3

    def to_dict(self):
        return {"patch_levels": self.patch_levels, "base_width": self.base_width,
                "conditional": self.conditional, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PoseHeadConfig:
    grid_stride: int = 16
    num_keypoints: int = 13
    base_width: int = 16

    def __post_init__(self):
        if self.grid_stride < 1 or (self.grid_stride & (self.grid_stride - 1)) != 0:
            raise ValueError("grid_stride must be a power of 2")

    @property
    def cell_channels(self):
        # 4 box + 1 objectness + 1 class + 3 per keypoint
        return 6 + 3 * self.num_keypoints

    def to_dict(self):
        return {"grid_stride": self.grid_stride, "num_keypoints": self.num_keypoints,
                "base_width": self.base_width}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _width(base, level, cap=8):
    return base * min(2 ** level, cap)


class UNetBlock(nn.Module):
    """One down/up level of the U-Net, wrapping the next-inner block."""

    def __init__(self, outer_ch, inner_ch, in_ch=None, submodule=None,
                 outermost=False, innermost=False, out_ch=None):
        super().__init__()
        self.outermost = outermost
        if in_ch is None:
            in_ch = outer_ch
        down_conv = nn.Conv2d(in_ch, inner_ch, 4, stride=2, padding=1)
        down_relu = nn.LeakyReLU(0.2)
        down_norm = nn.InstanceNorm2d(inner_ch)
        up_relu = nn.ReLU()
        up_norm = nn.InstanceNorm2d(outer_ch)

        if outermost:
            up_conv = nn.ConvTranspose2d(inner_ch * 2, out_ch, 4, stride=2, padding=1)
            down = [down_conv]
            up = [up_relu, up_conv, nn.Sigmoid()]
        elif innermost:
            # innermost spatial extent can be 1x1, so no normalization here
            up_conv = nn.ConvTranspose2d(inner_ch, outer_ch, 4, stride=2, padding=1)
            down = [down_relu, down_conv]
            up = [up_relu, up_conv, up_norm]
        else:
            up_conv = nn.ConvTranspose2d(inner_ch * 2, outer_ch, 4, stride=2, padding=1)
            down = [down_relu, down_conv, down_norm]
            up = [up_relu, up_conv, up_norm]
        core = down + ([submodule] if submodule is not None else []) + up
        self.model = nn.Sequential(*core)

    def forward(self, x):
        if self.outermost:
            return self.model(x)
        return torch.cat([x, self.model(x)], dim=1)


class UNetGenerator(nn.Module):
    def __init__(self, depth, base_width=16, in_channels=3, out_channels=3):
        super().__init__()
        self.depth = depth
        widths = [_width(base_width, i) for i in range(depth)]
        block = UNetBlock(widths[depth - 2], widths[depth - 1], innermost=True)
        for lvl in range(depth - 2, 0, -1):
            block = UNetBlock(widths[lvl - 1], widths[lvl], submodule=block)
        self.model = UNetBlock(widths[0], widths[0], in_ch=in_channels,
                               submodule=block, outermost=True,
                               out_ch=out_channels)

    def forward(self, x):
        return self.model(x)


class ResnetBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    def __init__(self, n_blocks, base_width=16, in_channels=3, out_channels=3):
        super().__init__()
        w = base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, w, 7),
                  nn.InstanceNorm2d(w), nn.ReLU()]
        for i in range(2):
            layers += [nn.Conv2d(w, w * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * 2), nn.ReLU()]
            w *= 2
        layers += [ResnetBlock(w) for _ in range(n_blocks)]
        for i in range(2):
            layers += [nn.ConvTranspose2d(w, w // 2, 3, stride=2, padding=1,
                                          output_padding=1),
                       nn.InstanceNorm2d(w // 2), nn.ReLU()]
            w //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, out_channels, 7), nn.Sigmoid()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def build_generator(config):
    if config.backbone.startswith("unet_"):
        depth = int(config.backbone.split("_")[1])
        return UNetGenerator(depth, config.base_width,
                             config.in_channels, config.out_channels)
    n_blocks = int(config.backbone.split("_")[1])
    return ResnetGenerator(n_blocks, config.base_width,
                           config.in_channels, config.out_channels)


class PatchDiscriminator(nn.Module):
    """PatchGAN: stride-2 conv stack emitting a grid of per-patch logits."""

    def __init__(self, config):
        super().__init__()
        in_ch = config.in_channels * (2 if config.conditional else 1)
        layers = []
        w_prev = in_ch
        for i in range(config.patch_levels):
            w = _width(config.base_width, i)
            layers.append(nn.Conv2d(w_prev, w, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(w))
            layers.append(nn.LeakyReLU(0.2))
            w_prev = w
        layers.append(nn.Conv2d(w_prev, 1, 3, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        self.config = config

    def forward(self, x):
        return self.model(x)


class PoseEstimator(nn.Module):
    """Single-scale anchor-free person detector with a keypoint head."""

    def __init__(self, config, in_channels=3):
        super().__init__()
        self.config = config
        levels = int(math.log2(config.grid_stride))
        w = config.base_width
        layers = [nn.Conv2d(in_channels, w, 3, padding=1), nn.LeakyReLU(0.1)]
        for i in range(levels):
            w_next = _width(config.base_width, i + 1, cap=4)
            layers += [nn.Conv2d(w, w_next, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.1),
                       nn.Conv2d(w_next, w_next, 3, padding=1),
                       nn.LeakyReLU(0.1)]
            w = w_next
        layers += [nn.Conv2d(w, w, 3, padding=1), nn.LeakyReLU(0.1)]
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(w, config.cell_channels, 1)

    def forward(self, x):
        return self.head(self.backbone(x))


def images_to_tensor(images, dtype=torch.float32):
    """Stack a list of same-shape ImageBuffers into a (B, C, H, W) tensor."""
    arr = np.stack([im.data for im in images], axis=0)
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(dtype)


def tensor_to_images(t, tag=None):
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return [ImageBuffer(np.clip(a, 0.0, 1.0), tag=tag) for a in arr]


def check_divisible(h, w, multiple, what):
    if h % multiple or w % multiple:
        raise ValueError(
            f"{what}: input dims {h}x{w} must be divisible by {multiple}"
        )


def generator_forward(model, config, batch):
    """Run a generator on a (B, C, H, W) tensor after checking divisibility."""
    check_divisible(batch.shape[-2], batch.shape[-1], config.divisibility,
                    config.backbone)
    return model(batch)


def discriminator_forward(model, candidate, condition=None):
    """Per-patch logits; conditional input is channel concatenation."""
    if model.config.conditional:
        if condition is None or condition.shape != candidate.shape:
            raise ValueError("conditional discriminator needs a same-shape condition")
        return model(torch.cat([candidate, condition], dim=1))
    return model(candidate)


def pose_forward(model, batch):
    check_divisible(batch.shape[-2], batch.shape[-1],
                    model.config.grid_stride, "pose estimator")
    return model(batch)


# --- target encoding / decoding for the pose grid -------------------------

_LOGIT_EPS = 1e-4


def _logit(p):
    p = min(max(p, _LOGIT_EPS), 1.0 - _LOGIT_EPS)
    return math.log(p / (1.0 - p))


def encode_targets(annotations, image_hw, config, saturate=8.0):
    """Encode ground-truth annotations onto the detection grid.

    Returns (target, pos_mask): target is a (C, Hs, Ws) float tensor whose
    positive cells hold saturated-logit encodings, pos_mask a bool (Hs, Ws)
    tensor marking cells that own a person (center-cell assignment).
    """
    h, w = image_hw
    s = config.grid_stride
    hs, ws = h // s, w // s
    target = torch.zeros((config.cell_channels, hs, ws), dtype=torch.float64)
    target[4, :, :] = -saturate  # objectness negative everywhere by default
    pos = torch.zeros((hs, ws), dtype=torch.bool)
    for ann in annotations:
        b = ann.bbox
        cx = (b.x_min + b.x_max) / 2.0
        cy = (b.y_min + b.y_max) / 2.0
        ci = int(cx // s)
        cj = int(cy // s)
        if not (0 <= ci < ws and 0 <= cj < hs):
            raise ValueError(f"target center ({cx}, {cy}) outside {hs}x{ws} grid")
        target[0, cj, ci] = _logit(cx / s - ci)
        target[1, cj, ci] = _logit(cy / s - cj)
        target[2, cj, ci] = math.log(max(b.width, 1e-6) / s)
        target[3, cj, ci] = math.log(max(b.height, 1e-6) / s)
        target[4, cj, ci] = saturate
        target[5, cj, ci] = saturate
        cell_cx = (ci + 0.5) * s
        cell_cy = (cj + 0.5) * s
        for k, kp in enumerate(ann.keypoints):
            base = 6 + 3 * k
            target[base + 0, cj, ci] = (kp.x - cell_cx) / s
            target[base + 1, cj, ci] = (kp.y - cell_cy) / s
            vis = saturate if kp.visibility == Visibility.VISIBLE else -saturate
            target[base + 2, cj, ci] = vis
        pos[cj, ci] = True
    return target, pos


def decode_boxes(grid, config):
    """Differentiable decode of per-cell box params to (cx, cy, w, h) in pixels.

    grid: (C, Hs, Ws) tensor. Returns tensors of shape (Hs, Ws).
    """
    s = config.grid_stride
    hs, ws = grid.shape[-2:]
    jj, ii = torch.meshgrid(torch.arange(hs, dtype=grid.dtype),
                            torch.arange(ws, dtype=grid.dtype), indexing="ij")
    cx = (ii + torch.sigmoid(grid[0])) * s
    cy = (jj + torch.sigmoid(grid[1])) * s
    bw = torch.exp(grid[2]) * s
    bh = torch.exp(grid[3]) * s
    return cx, cy, bw, bh


def decode_keypoints(grid, config):
    """Decode keypoint coordinates: (K, Hs, Ws) x/y tensors plus vis logits."""
    s = config.grid_stride
    hs, ws = grid.shape[-2:]
    jj, ii = torch.meshgrid(torch.arange(hs, dtype=grid.dtype),
                            torch.arange(ws, dtype=grid.dtype), indexing="ij")
    k = config.num_keypoints
    kx = grid[6::3][:k] * s + ((ii + 0.5) * s)
    ky = grid[7::3][:k] * s + ((jj + 0.5) * s)
    kv = grid[8::3][:k]
    return kx, ky, kv


def _iou_xyxy(a, b):
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    inter = max(ix1 - ix0, 0.0) * max(iy1 - iy0, 0.0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def decode_detections(grid, config, schema="synth-13", obj_threshold=0.5,
                      nms_iou=0.6, max_detections=20):
    """Decode one image's grid into scored detections with greedy NMS."""
    grid = grid.detach().to(torch.float64)
    cx, cy, bw, bh = decode_boxes(grid, config)
    kx, ky, kv = decode_keypoints(grid, config)
    obj = torch.sigmoid(grid[4])
    hs, ws = obj.shape
    finite = torch.isfinite(grid).all(dim=0)
    cands = []
    for j in range(hs):
        for i in range(ws):
            score = float(obj[j, i])
            if score < obj_threshold or not finite[j, i]:
                continue
            x0 = float(cx[j, i] - bw[j, i] / 2)
            y0 = float(cy[j, i] - bh[j, i] / 2)
            x1 = float(cx[j, i] + bw[j, i] / 2)
            y1 = float(cy[j, i] + bh[j, i] / 2)
            kps = []
            for k in range(config.num_keypoints):
                vis = (Visibility.VISIBLE if float(kv[k, j, i]) > 0
                       else Visibility.LABELED_INVISIBLE)
                kps.append(Keypoint(float(kx[k, j, i]), float(ky[k, j, i]), vis))
            cands.append({"score": score, "xyxy": (x0, y0, x1, y1),
                          "keypoints": kps, "schema": schema})
    cands.sort(key=lambda d: -d["score"])
    kept = []
    for c in cands:
        if any(_iou_xyxy(c["xyxy"], k["xyxy"]) > nms_iou for k in kept):
            continue
        kept.append(c)
        if len(kept) >= max_detections:
            break
    return kept


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())
