"""Conventional desensitization operators producing style-guidance portraits.

Three operators: Gaussian blur (kernel radius r, sigma = r/2, edge-mirrored),
pixelation (r x r block means, ragged edge blocks averaged over their actual
size), and seeded Gaussian noise addition.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .domain import DomainTag, ImageBuffer

GUIDANCE_METHODS = ("blur", "pixelate", "noise")


@dataclass(frozen=True)
class GuidanceSpec:
    """Which desensitization operator to apply and how strong.

    strength is the kernel radius for blur, the block side for pixelate,
    and the noise standard deviation for noise.
    """

    method: str
    strength: float

    def __post_init__(self):
        if self.method not in GUIDANCE_METHODS:
            raise ValueError(f"unknown guidance method {self.method!r}")
        if self.method in ("blur", "pixelate"):
            if int(self.strength) != self.strength or self.strength < 1:
                raise ValueError(f"{self.method} strength must be an integer >= 1")
        elif self.strength <= 0:
            raise ValueError("noise sigma must be > 0")

    def to_dict(self):
        return {"method": self.method, "strength": self.strength}

    @classmethod
    def from_dict(cls, d):
        return cls(method=d["method"], strength=d["strength"])


def gaussian_kernel_1d(r):
    """Normalized 1-D Gaussian, sigma = r/2, support 2r+1. Weights sum to 1."""
    sigma = r / 2.0
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(x, r):
    """Separable Gaussian blur with edge-mirrored boundary handling.

    scipy's "reflect" mode repeats the edge sample, which makes the blur
    matrix doubly stochastic: the per-image mean is preserved exactly.
    """
    r = int(r)
    if r < 1:
        raise ValueError("blur radius must be >= 1")
    k = gaussian_kernel_1d(r)
    data = x.data.astype(np.float64)
    out = np.empty_like(data)
    for c in range(data.shape[2]):
        tmp = ndimage.correlate1d(data[:, :, c], k, axis=0, mode="reflect")
        out[:, :, c] = ndimage.correlate1d(tmp, k, axis=1, mode="reflect")
    return ImageBuffer(out, tag=DomainTag.DESENSITIZED_Y)


def pixelate(x, r):
    """Replace each r x r block (from the top-left) by its mean."""
    r = int(r)
    if r < 1:
        raise ValueError("pixel block side must be >= 1")
    data = x.data.astype(np.float64)
    out = np.empty_like(data)
    h, w = data.shape[:2]
    for y0 in range(0, h, r):
        for x0 in range(0, w, r):
            block = data[y0:y0 + r, x0:x0 + r, :]
            out[y0:y0 + r, x0:x0 + r, :] = block.mean(axis=(0, 1))
    return ImageBuffer(out, tag=DomainTag.DESENSITIZED_Y)


def add_gaussian_noise(x, sigma, seed):
    """Add i.i.d. Gaussian(0, sigma^2) noise and clamp to [0, 1]. Deterministic per seed."""
    if sigma <= 0:
        raise ValueError("noise sigma must be > 0")
    rng = np.random.default_rng(seed)
    noisy = x.data.astype(np.float64) + rng.normal(0.0, sigma, size=x.shape)
    return ImageBuffer(np.clip(noisy, 0.0, 1.0), tag=DomainTag.DESENSITIZED_Y)


def derive_seed(seed, *parts):
    """Stable per-portrait seed derived from (seed, scene id, portrait index, ...)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((int(seed),) + tuple(parts)).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def make_guidance(x, spec, seed=0):
    """Dispatch to the operator named by spec. Output is tagged desensitized."""
    if spec.method == "blur":
        return gaussian_blur(x, int(spec.strength))
    if spec.method == "pixelate":
        return pixelate(x, int(spec.strength))
    if spec.method == "noise":
        return add_gaussian_noise(x, float(spec.strength), seed)
    raise ValueError(f"unknown guidance method {spec.method!r}")
