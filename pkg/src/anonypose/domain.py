"""Core data types shared by every module: images, boxes, keypoints, scenes.

All pixel data lives in [0, 1] as row-major float arrays. Bounding boxes are
half-open pixel intervals [min, max) so crop/paste round trips have no off-by-one
ambiguity.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class Visibility(enum.IntEnum):
    NOT_LABELED = 0
    LABELED_INVISIBLE = 1
    VISIBLE = 2


class DomainTag(enum.Enum):
    ORIGINAL_X = "original_X"
    DESENSITIZED_Y = "desensitized_Y"
    ENHANCED_YPRIME = "enhanced_Yprime"
    RECOVERED_XPRIME = "recovered_Xprime"


# keypoint schema registry: name -> (count, left/right flip pairs)
SYNTH13_NAMES = [
    "head",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
]

KEYPOINT_SCHEMAS = {
    "coco-17": {
        "count": 17,
        "flip_pairs": [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10),
                       (11, 12), (13, 14), (15, 16)],
    },
    "synth-13": {
        "count": 13,
        "flip_pairs": [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12)],
    },
}


class ImageBuffer:
    """H x W x C raster of floats in [0, 1]. Immutable after construction.

    Stores are clamped into [0, 1]; non-finite input is rejected.
    """

    def __init__(self, data, tag=None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be HxW or HxWxC, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dims must be >= 1, got {arr.shape[:2]}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if not np.isfinite(arr).all():
            raise ValueError("image data contains non-finite values")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        self._data = arr
        self.tag = tag

    @property
    def data(self):
        return self._data

    @property
    def height(self):
        return self._data.shape[0]

    @property
    def width(self):
        return self._data.shape[1]

    @property
    def channels(self):
        return self._data.shape[2]

    @property
    def shape(self):
        return self._data.shape

    def with_tag(self, tag):
        return ImageBuffer(self._data, tag=tag)

    def same_as(self, other):
        """Bit-exact equality on pixel data."""
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def to_uint8(self):
        """8-bit quantization with round-half-up and L=255."""
        # quantize in float64: float32 arithmetic lands on the wrong side of
        # the rounding boundary for values within one float32 ulp of a step
        return np.floor(self._data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr, tag=None):
        return cls(np.asarray(arr, dtype=np.float32) / 255.0, tag=tag)

    def save_png(self, path):
        arr = self.to_uint8()
        if arr.shape[2] == 1:
            img = Image.fromarray(arr[:, :, 0], mode="L")
        else:
            img = Image.fromarray(arr, mode="RGB")
        img.save(path, format="PNG")

    @classmethod
    def load_png(cls, path, tag=None):
        img = Image.open(path)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return cls.from_uint8(np.asarray(img), tag=tag)


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not np.isfinite(v):
                raise ValueError("box coordinates must be finite")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return max(self.width, 0) * max(self.height, 0)

    def is_degenerate(self):
        return self.x_min >= self.x_max or self.y_min >= self.y_max

    def clamp(self, image_width, image_height):
        """Intersect with the image frame. May return a degenerate box."""
        return BoundingBox(
            x_min=max(int(self.x_min), 0),
            y_min=max(int(self.y_min), 0),
            x_max=min(int(self.x_max), int(image_width)),
            y_max=min(int(self.y_max), int(image_height)),
        )


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: Visibility = Visibility.VISIBLE

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("keypoint coordinates must be finite")
        if not isinstance(self.visibility, Visibility):
            object.__setattr__(self, "visibility", Visibility(self.visibility))


@dataclass(frozen=True)
class PersonAnnotation:
    bbox: BoundingBox
    keypoints: tuple
    keypoint_schema: str = "coco-17"

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        schema = KEYPOINT_SCHEMAS.get(self.keypoint_schema)
        if schema is None:
            raise ValueError(f"unknown keypoint schema {self.keypoint_schema!r}")
        if len(self.keypoints) != schema["count"]:
            raise ValueError(
                f"schema {self.keypoint_schema} expects {schema['count']} keypoints, "
                f"got {len(self.keypoints)}"
            )

    def num_labeled(self):
        return sum(1 for k in self.keypoints if k.visibility != Visibility.NOT_LABELED)

    def num_visible(self):
        return sum(1 for k in self.keypoints if k.visibility == Visibility.VISIBLE)


@dataclass(frozen=True)
class Scene:
    """Full image plus its person annotations."""

    image: ImageBuffer
    persons: tuple
    id: str

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        for p in self.persons:
            b = p.bbox.clamp(self.image.width, self.image.height)
            if b.is_degenerate():
                raise ValueError(f"scene {self.id}: person box {p.bbox} outside image")


def crop(image, box):
    """Cut out the clamped box region. Raises on empty intersection."""
    b = box.clamp(image.width, image.height)
    if b.is_degenerate():
        raise ValueError("degenerate crop")
    return ImageBuffer(image.data[b.y_min:b.y_max, b.x_min:b.x_max, :], tag=image.tag)


def paste(target, patch, box):
    """Replace the box region of target with patch. Pure: returns a new buffer."""
    b = box.clamp(target.width, target.height)
    if b.is_degenerate():
        raise ValueError("degenerate paste region")
    if (patch.height, patch.width) != (b.height, b.width):
        raise ValueError(
            f"patch shape {(patch.height, patch.width)} does not match "
            f"box shape {(b.height, b.width)}"
        )
    if patch.channels != target.channels:
        raise ValueError("patch channel count does not match target")
    out = target.data.copy()
    out[b.y_min:b.y_max, b.x_min:b.x_max, :] = patch.data
    return ImageBuffer(out, tag=target.tag)
