"""Image-quality (PSNR, SSIM) and keypoint-detection (OKS, mAP/mAR@0.5) metrics.

PSNR is computed on 8-bit-quantized copies with L=255 so reported dB matches
common tooling. SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with
C1=(0.01 L)^2, C2=(0.03 L)^2, averaged over valid window positions and
channels. Detection quality uses OKS >= 0.5 greedy matching with all-points
interpolated AP.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .domain import Visibility

# Standard per-keypoint OKS constants for the 17-keypoint schema (k_i = 2 sigma_i);
# the synthetic stick-figure schema uses a uniform constant.
COCO17_K = tuple(2 * s for s in (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
))
SYNTH13_K = (0.08,) * 13


@dataclass(frozen=True)
class KeypointSigmas:
    schema: str
    values: tuple

    def __post_init__(self):
        if any(v <= 0 for v in self.values):
            raise ValueError("OKS constants must be positive")


def default_sigmas(schema):
    if schema == "coco-17":
        return KeypointSigmas(schema, COCO17_K)
    if schema == "synth-13":
        return KeypointSigmas(schema, SYNTH13_K)
    raise ValueError(f"no OKS constants registered for schema {schema!r}")


@dataclass
class EvalResult:
    psnr: float = float("nan")
    ssim: float = float("nan")
    map50: float = float("nan")
    mar50: float = float("nan")
    details: dict = field(default_factory=dict)

    @property
    def high_similarity(self):
        """PSNR >= 30 and SSIM >= 0.9: the conventional high-similarity rule."""
        return self.psnr >= 30.0 and self.ssim >= 0.9

    def to_dict(self):
        psnr = "inf" if math.isinf(self.psnr) else self.psnr
        return {"psnr": psnr, "ssim": self.ssim, "map50": self.map50,
                "mar50": self.mar50, "high_similarity": bool(self.high_similarity),
                "details": self.details}


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on 8-bit copies; +inf when identical."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    qa = a.to_uint8().astype(np.float64)
    qb = b.to_uint8().astype(np.float64)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _ssim_window(size=11, sigma=1.5):
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b):
    """Mean local SSIM over valid 11x11 window positions, channel-averaged."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.height, a.width) < 11:
        raise ValueError("image too small for an 11x11 SSIM window")
    L = 255.0
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    w = _ssim_window()
    vals = []
    for c in range(a.channels):
        x = a.data[:, :, c].astype(np.float64) * L
        y = b.data[:, :, c].astype(np.float64) * L
        mu_x = convolve2d(x, w, mode="valid")
        mu_y = convolve2d(y, w, mode="valid")
        sxx = convolve2d(x * x, w, mode="valid") - mu_x ** 2
        syy = convolve2d(y * y, w, mode="valid") - mu_y ** 2
        sxy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def oks(pred_keypoints, gt_annotation, sigmas=None):
    """Object keypoint similarity: mean over labeled GT keypoints of
    exp(-d^2 / (2 s^2 k_i^2)), with s^2 the GT box area."""
    if sigmas is None:
        sigmas = default_sigmas(gt_annotation.keypoint_schema)
    if sigmas.schema != gt_annotation.keypoint_schema:
        raise ValueError("sigma schema does not match annotation schema")
    if len(pred_keypoints) != len(gt_annotation.keypoints):
        raise ValueError("prediction and ground truth keypoint counts differ")
    s2 = float(gt_annotation.bbox.area)
    terms = []
    for p, g, k in zip(pred_keypoints, gt_annotation.keypoints, sigmas.values):
        if g.visibility == Visibility.NOT_LABELED:
            continue
        d2 = (p.x - g.x) ** 2 + (p.y - g.y) ** 2
        terms.append(math.exp(-d2 / (2.0 * s2 * k * k)))
    if not terms:
        raise ValueError("unlabeled instance: ground truth has no labeled keypoints")
    return sum(terms) / len(terms)


def ap_ar_at_50(detections, ground_truth, oks_threshold=0.5):
    """Average precision and recall at an OKS match threshold.

    detections: {scene_id: [{"keypoints": [...], "score": float}, ...]}
    ground_truth: list of Scene. Matching is greedy in global confidence order,
    one-to-one per scene, each prediction taking the highest-OKS unmatched GT.
    AP uses all-points interpolation; AR is the recall at the end of the curve.
    """
    gt_by_scene = {}
    total_gt = 0
    for scene in ground_truth:
        persons = [p for p in scene.persons if p.num_labeled() > 0]
        gt_by_scene[scene.id] = persons
        total_gt += len(persons)
    ranked = []
    for scene_id, dets in detections.items():
        if scene_id not in gt_by_scene:
            raise ValueError(f"detections for unknown scene {scene_id!r}")
        for d in dets:
            ranked.append((float(d["score"]), scene_id, d))
    ranked.sort(key=lambda t: -t[0])
    matched = {sid: [False] * len(persons) for sid, persons in gt_by_scene.items()}
    tp_flags = []
    for score, sid, det in ranked:
        best_oks = -1.0
        best_j = -1
        for j, gt in enumerate(gt_by_scene[sid]):
            if matched[sid][j]:
                continue
            v = oks(det["keypoints"], gt)
            if v > best_oks:
                best_oks = v
                best_j = j
        if best_j >= 0 and best_oks >= oks_threshold:
            matched[sid][best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    if total_gt == 0:
        raise ValueError("no labeled ground truth instances")
    if not tp_flags:
        return 0.0, 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum([not f for f in tp_flags])
    recalls = tp_cum / total_gt
    precisions = tp_cum / (tp_cum + fp_cum)
    # precision envelope + all-points interpolated area
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap), float(recalls[-1])
