"""Portrait extraction and background-preserving scene composition.

Portraits are cropped with person boxes, bilinearly resized to one fixed
resolution for the generators, and later inverse-resized and pasted back so
every pixel outside the person boxes stays bit-identical to the source scene.
"""

from dataclasses import dataclass, field

import numpy as np

from .domain import BoundingBox, ImageBuffer, Keypoint, PersonAnnotation, crop, paste


@dataclass(frozen=True)
class ResizeTransform:
    """Affine map from box-local pixel coords to portrait coords: p = c * scale."""

    box: BoundingBox
    scale_x: float
    scale_y: float

    def forward_point(self, x, y):
        return ((x - self.box.x_min) * self.scale_x, (y - self.box.y_min) * self.scale_y)

    def inverse_point(self, px, py):
        return (px / self.scale_x + self.box.x_min, py / self.scale_y + self.box.y_min)


@dataclass(frozen=True)
class PortraitItem:
    image: ImageBuffer
    annotation: PersonAnnotation
    scene_id: str
    index: int
    transform: ResizeTransform


@dataclass
class PortraitBatch:
    portraits: list
    resolution: tuple
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.portraits)


def resize_bilinear(data, out_h, out_w):
    """Corner-aligned bilinear resize of an HxWxC float array."""
    in_h, in_w = data.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return data.copy()
    if in_h == 1:
        ys = np.zeros(out_h)
    else:
        ys = np.linspace(0.0, in_h - 1.0, out_h)
    if in_w == 1:
        xs = np.zeros(out_w)
    else:
        xs = np.linspace(0.0, in_w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = data[y0][:, x0]
    b = data[y0][:, x1]
    c = data[y1][:, x0]
    d = data[y1][:, x1]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def detect_persons(scene, mode="ground_truth", detector=None, confidence_threshold=0.5):
    """Return person boxes either from annotations or a pluggable detector.

    A detector is a callable taking PNG bytes and returning a list of
    {"box": [x_min, y_min, x_max, y_max], "confidence": float} dicts.
    """
    if mode == "ground_truth":
        return [p.bbox for p in scene.persons]
    if mode == "external_detector":
        if detector is None:
            raise RuntimeError(
                "external detector unavailable; fall back to mode='ground_truth'"
            )
        import io
        buf = io.BytesIO()
        scene.image.save_png(buf)
        results = detector(buf.getvalue())
        boxes = []
        for r in results:
            if r["confidence"] >= confidence_threshold:
                boxes.append(BoundingBox(*[int(v) for v in r["box"]]))
        return boxes
    raise ValueError(f"unknown detection mode {mode!r}")


def transform_annotation(annotation, transform, out_w, out_h):
    """Map an annotation through a portrait resize transform."""
    kps = []
    for k in annotation.keypoints:
        px, py = transform.forward_point(k.x, k.y)
        kps.append(Keypoint(px, py, k.visibility))
    bx0, by0 = transform.forward_point(annotation.bbox.x_min, annotation.bbox.y_min)
    bx1, by1 = transform.forward_point(annotation.bbox.x_max, annotation.bbox.y_max)
    box = BoundingBox(
        int(round(max(bx0, 0))), int(round(max(by0, 0))),
        int(round(min(bx1, out_w))), int(round(min(by1, out_h))),
    )
    return PersonAnnotation(box, tuple(kps), annotation.keypoint_schema)


def extract_portraits(scene, boxes, resolution, annotations=None):
    """Crop each box and resize it to a shared portrait resolution.

    Keypoints follow the same affine map as the pixels; the transform is
    recorded so composition can invert it. Degenerate boxes are skipped with a
    warning record rather than failing the batch.
    """
    out_h, out_w = resolution
    if annotations is None:
        annotations = list(scene.persons)
    batch = PortraitBatch(portraits=[], resolution=(out_h, out_w))
    for idx, box in enumerate(boxes):
        b = box.clamp(scene.image.width, scene.image.height)
        if b.is_degenerate():
            batch.warnings.append(f"scene {scene.id}: skipped degenerate box {box}")
            continue
        patch = crop(scene.image, b)
        resized = resize_bilinear(patch.data, out_h, out_w)
        transform = ResizeTransform(box=b, scale_x=out_w / b.width, scale_y=out_h / b.height)
        ann = annotations[idx] if idx < len(annotations) else None
        if ann is not None:
            ann = transform_annotation(ann, transform, out_w, out_h)
        batch.portraits.append(PortraitItem(
            image=ImageBuffer(resized, tag=scene.image.tag),
            annotation=ann,
            scene_id=scene.id,
            index=idx,
            transform=transform,
        ))
    return batch


def composite(scene, processed):
    """Paste processed portraits back over the scene background.

    Each portrait is inverse-resized to its recorded box; pixels outside all
    boxes remain bit-identical to the source image. Later portraits win on
    overlaps (annotation order).
    """
    out = scene.image
    for item in processed.portraits:
        if item.scene_id != scene.id:
            raise ValueError(
                f"portrait from scene {item.scene_id!r} composited into {scene.id!r}"
            )
        t = item.transform
        if t is None:
            raise ValueError("portrait is missing its resize transform")
        patch = resize_bilinear(item.image.data, t.box.height, t.box.width)
        out = paste(out, ImageBuffer(patch), t.box)
    return out
