"""Dataset ingestion: COCO-keypoints-subset JSON and a seeded synthetic
stick-figure generator for desk-scale experiments.

The JSON subset is: {"images": [{id, file_name, width, height}],
"annotations": [{image_id, bbox [x,y,w,h], keypoints flat triplets,
num_keypoints}]}. Visibility triplet values {0,1,2} map onto the Keypoint
visibility enum; boxes convert to half-open integer corners.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    BoundingBox, ImageBuffer, Keypoint, PersonAnnotation, Scene, Visibility,
)

_SCHEMA_BY_COUNT = {17: "coco-17", 13: "synth-13"}


@dataclass
class DatasetManifest:
    name: str
    schema: str
    root: str
    split_sizes: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return {"name": self.name, "schema": self.schema, "root": self.root,
                "split_sizes": self.split_sizes, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def load_coco_keypoints(annotation_file, image_dir):
    """Load the documented COCO-keypoints JSON subset into Scenes."""
    try:
        with open(annotation_file) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed annotation JSON {annotation_file}: {e}") from e
    anns_by_image = {}
    for ann in doc.get("annotations", []):
        anns_by_image.setdefault(ann["image_id"], []).append(ann)
    scenes = []
    for rec in doc.get("images", []):
        path = os.path.join(image_dir, rec["file_name"])
        if not os.path.exists(path):
            raise FileNotFoundError(f"image file missing for record {rec['id']}: {path}")
        image = ImageBuffer.load_png(path)
        if (image.height, image.width) != (rec["height"], rec["width"]):
            raise ValueError(f"record {rec['id']}: image size does not match manifest")
        persons = []
        for ann in anns_by_image.get(rec["id"], []):
            flat = ann["keypoints"]
            if len(flat) % 3 != 0 or len(flat) // 3 not in _SCHEMA_BY_COUNT:
                raise ValueError(
                    f"record {rec['id']}: keypoint array length {len(flat)} "
                    "is not 3K for a known schema"
                )
            schema = _SCHEMA_BY_COUNT[len(flat) // 3]
            kps = []
            for i in range(0, len(flat), 3):
                kps.append(Keypoint(float(flat[i]), float(flat[i + 1]),
                                    Visibility(int(flat[i + 2]))))
            x, y, w, h = ann["bbox"]
            box = BoundingBox(int(math.floor(x)), int(math.floor(y)),
                              int(math.ceil(x + w)), int(math.ceil(y + h)))
            box = box.clamp(image.width, image.height)
            persons.append(PersonAnnotation(box, tuple(kps), schema))
        scenes.append(Scene(image=image, persons=tuple(persons), id=str(rec["id"])))
    return scenes


def export_coco_keypoints(scenes, annotation_file, image_dir):
    """Write Scenes back out in the same JSON subset (round-trip capable)."""
    os.makedirs(image_dir, exist_ok=True)
    images = []
    annotations = []
    for scene in scenes:
        fname = f"{scene.id}.png"
        scene.image.save_png(os.path.join(image_dir, fname))
        images.append({"id": scene.id, "file_name": fname,
                       "width": scene.image.width, "height": scene.image.height})
        for p in scene.persons:
            flat = []
            for k in p.keypoints:
                flat += [float(k.x), float(k.y), int(k.visibility)]
            b = p.bbox
            annotations.append({
                "image_id": scene.id,
                "bbox": [b.x_min, b.y_min, b.width, b.height],
                "keypoints": flat,
                "num_keypoints": p.num_labeled(),
            })
    with open(annotation_file, "w") as f:
        json.dump({"images": images, "annotations": annotations}, f)


# --- synthetic stick figures ----------------------------------------------

def _draw_segment(canvas, p0, p1, thickness, color):
    h, w = canvas.shape[:2]
    x0, y0 = p0
    x1, y1 = p1
    r = thickness / 2.0
    lo_x = max(int(math.floor(min(x0, x1) - r - 1)), 0)
    hi_x = min(int(math.ceil(max(x0, x1) + r + 1)), w - 1)
    lo_y = max(int(math.floor(min(y0, y1) - r - 1)), 0)
    hi_y = min(int(math.ceil(max(y0, y1) + r + 1)), h - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return
    ys, xs = np.mgrid[lo_y:hi_y + 1, lo_x:hi_x + 1]
    dx = x1 - x0
    dy = y1 - y0
    seg_len2 = dx * dx + dy * dy
    if seg_len2 < 1e-9:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg_len2, 0.0, 1.0)
    px = x0 + t * dx
    py = y0 + t * dy
    dist = np.sqrt((xs - px) ** 2 + (ys - py) ** 2)
    mask = dist <= r
    canvas[lo_y:hi_y + 1, lo_x:hi_x + 1][mask] = color


def _draw_disc(canvas, center, radius, color):
    h, w = canvas.shape[:2]
    cx, cy = center
    lo_x = max(int(math.floor(cx - radius - 1)), 0)
    hi_x = min(int(math.ceil(cx + radius + 1)), w - 1)
    lo_y = max(int(math.floor(cy - radius - 1)), 0)
    hi_y = min(int(math.ceil(cy + radius + 1)), h - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return
    ys, xs = np.mgrid[lo_y:hi_y + 1, lo_x:hi_x + 1]
    mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    canvas[lo_y:hi_y + 1, lo_x:hi_x + 1][mask] = color


def _make_background(rng, h, w):
    top = rng.uniform(0.25, 0.9, size=3)
    bottom = rng.uniform(0.25, 0.9, size=3)
    grad = np.linspace(0, 1, h)[:, None, None]
    bg = top[None, None, :] * (1 - grad) + bottom[None, None, :] * grad
    # coarse texture so backgrounds are not trivially separable from figures
    coarse = rng.uniform(-1, 1, size=(max(h // 8, 2), max(w // 8, 2), 3))
    from .scene import resize_bilinear
    bg = bg + 0.06 * resize_bilinear(coarse, h, w)
    return np.clip(bg, 0.0, 1.0)


def _sample_figure(rng, canvas_h, canvas_w, scale_range):
    """Sample 13 keypoints (synth-13 order) for one stick figure."""
    h = rng.uniform(*scale_range) * canvas_h
    head_r = 0.08 * h
    thickness = max(1.5, 0.05 * h)
    margin = 0.25 * h + thickness
    top = rng.uniform(margin, max(canvas_h - h - margin, margin + 1))
    cx = rng.uniform(margin, max(canvas_w - margin, margin + 1))

    def pt(x, y):
        return (float(np.clip(x, 1, canvas_w - 2)), float(np.clip(y, 1, canvas_h - 2)))

    head = pt(cx + rng.uniform(-0.03, 0.03) * h, top + 0.06 * h)
    sh_y = top + 0.2 * h
    sh_dx = 0.15 * h
    l_sh = pt(cx - sh_dx, sh_y)
    r_sh = pt(cx + sh_dx, sh_y)
    hip_y = top + 0.55 * h
    hip_dx = 0.10 * h
    l_hip = pt(cx - hip_dx, hip_y)
    r_hip = pt(cx + hip_dx, hip_y)

    def limb(origin, length, base_angle, spread):
        a = base_angle + rng.uniform(-spread, spread)
        return pt(origin[0] + length * math.sin(a), origin[1] + length * math.cos(a))

    arm = 0.17 * h
    leg = 0.22 * h
    l_el = limb(l_sh, arm, -0.5, 0.9)
    r_el = limb(r_sh, arm, 0.5, 0.9)
    l_wr = limb(l_el, arm, -0.5, 1.1)
    r_wr = limb(r_el, arm, 0.5, 1.1)
    l_kn = limb(l_hip, leg, -0.15, 0.4)
    r_kn = limb(r_hip, leg, 0.15, 0.4)
    l_an = limb(l_kn, leg, -0.1, 0.45)
    r_an = limb(r_kn, leg, 0.1, 0.45)
    kps = [head, l_sh, r_sh, l_el, r_el, l_wr, r_wr,
           l_hip, r_hip, l_kn, r_kn, l_an, r_an]
    return kps, head_r, thickness


def _figure_bbox(kps, head_r, thickness, canvas_h, canvas_w):
    xs = [p[0] for p in kps]
    ys = [p[1] for p in kps]
    pad = max(head_r, thickness / 2) + 1
    box = BoundingBox(int(math.floor(min(xs) - pad)), int(math.floor(min(ys) - pad)),
                      int(math.ceil(max(xs) + pad)), int(math.ceil(max(ys) + pad)))
    return box.clamp(canvas_w, canvas_h)


def _boxes_overlap(a, b):
    return not (a.x_max <= b.x_min or b.x_max <= a.x_min
                or a.y_max <= b.y_min or b.y_max <= a.y_min)


def synth_generate(count, canvas, seed, scale_range=(0.2, 0.6), max_figures=3):
    """Generate seeded synthetic scenes with exact annotations.

    Each scene holds 1..max_figures stick figures on a textured background;
    figure boxes do not overlap (placements that collide are re-sampled, then
    dropped). Deterministic for a given seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = canvas
    if h < 32 or w < 32:
        raise ValueError(f"canvas {canvas} smaller than the minimum 32x32")
    scenes = []
    for n in range(count):
        rng = np.random.default_rng([int(seed), n])
        img = _make_background(rng, h, w)
        n_fig = int(rng.integers(1, max_figures + 1))
        persons = []
        boxes = []
        for _ in range(n_fig):
            placed = None
            for _attempt in range(20):
                kps, head_r, thickness = _sample_figure(rng, h, w, scale_range)
                box = _figure_bbox(kps, head_r, thickness, h, w)
                if box.is_degenerate():
                    continue
                if all(not _boxes_overlap(box, b) for b in boxes):
                    placed = (kps, head_r, thickness, box)
                    break
            if placed is None:
                continue
            kps, head_r, thickness, box = placed
            skin = rng.uniform(0.55, 0.95, size=3)
            shirt = rng.uniform(0.0, 1.0, size=3)
            pants = rng.uniform(0.0, 1.0, size=3)
            head, l_sh, r_sh, l_el, r_el, l_wr, r_wr, \
                l_hip, r_hip, l_kn, r_kn, l_an, r_an = kps
            neck = ((l_sh[0] + r_sh[0]) / 2, (l_sh[1] + r_sh[1]) / 2)
            for seg in [(l_sh, r_sh), (l_sh, l_hip), (r_sh, r_hip), (l_hip, r_hip),
                        (l_sh, l_el), (l_el, l_wr), (r_sh, r_el), (r_el, r_wr)]:
                _draw_segment(img, seg[0], seg[1], thickness, shirt)
            for seg in [(l_hip, l_kn), (l_kn, l_an), (r_hip, r_kn), (r_kn, r_an)]:
                _draw_segment(img, seg[0], seg[1], thickness, pants)
            _draw_segment(img, neck, head, thickness, skin)
            _draw_disc(img, head, head_r, skin)
            persons.append(PersonAnnotation(
                bbox=box,
                keypoints=tuple(Keypoint(x, y, Visibility.VISIBLE) for x, y in kps),
                keypoint_schema="synth-13",
            ))
            boxes.append(box)
        scenes.append(Scene(image=ImageBuffer(img), persons=tuple(persons),
                            id=f"synth-{seed}-{n}"))
    return scenes


def split(scenes, fractions, seed):
    """Deterministic shuffled split into (train, val, test)."""
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    total = sum(fractions)
    if total <= 0:
        raise ValueError("fractions must sum to a positive value")
    fr = [f / total for f in fractions]
    order = np.random.default_rng(seed).permutation(len(scenes))
    n = len(scenes)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_val = min(n_val, n - n_train)
    idx_train = order[:n_train]
    idx_val = order[n_train:n_train + n_val]
    idx_test = order[n_train + n_val:]
    pick = lambda idx: [scenes[i] for i in idx]
    return pick(idx_train), pick(idx_val), pick(idx_test)
