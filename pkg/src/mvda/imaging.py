"""Image decoding, preprocessing, and the weak/strong augmentation pipelines.

Images are numpy arrays of shape (H, W, 3) with float values in [0, 1].
Augmentation runs in that space; normalization to network statistics happens
afterwards via :func:`resize_normalize`. Every augmentation is a pure
function of (image, rng state), so parallel pipelines just need independent
rng streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB PNG into a float (H, W, 3) array in [0, 1]."""
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float image as an 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma grayscale (H, W); weights sum to 1 so values stay in [0, 1]."""
    r, g, b = LUMA_WEIGHTS
    return img[..., 0] * r + img[..., 1] * g + img[..., 2] * b


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment and edge clamping.

    Works on (H, W) or (H, W, C) arrays. At integer downscale factors the
    half-pixel convention averages whole input blocks, e.g. a 4x4 image
    resized to 2x2 yields the mean of each 2x2 block.
    """
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_normalize(
    img: np.ndarray,
    side: int,
    mean: tuple[float, float, float],
    std: tuple[float, float, float],
) -> np.ndarray:
    """Bilinear resize to side x side, then standardize each channel."""
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std components must be positive")
    resized = bilinear_resize(img, side, side)
    return (resized - np.asarray(mean, dtype=np.float64)) / std


def weak_augment(img: np.ndarray, rng) -> np.ndarray:
    """Horizontal flip with probability 0.5; consumes exactly one draw."""
    if rng.random() < 0.5:
        return img[:, ::-1].copy()
    return img.copy()


# --- strong augmentation -------------------------------------------------
#
# The op set follows the common no-search policy for strong augmentation:
# each op maps an integer magnitude 0..10 onto its parameter range, signed
# ops flip direction with probability 0.5, and geometric ops resample
# bilinearly with edge clamping so outputs stay inside [0, 1].

STRONG_OP_RANGES: dict[str, tuple[float, float]] = {
    "identity": (0.0, 0.0),
    "hflip": (0.0, 0.0),
    "rotate": (0.0, 30.0),  # degrees
    "translate_x": (0.0, 0.3),  # fraction of side
    "translate_y": (0.0, 0.3),
    "shear_x": (0.0, 0.3),
    "shear_y": (0.0, 0.3),
    "brightness": (0.0, 0.5),  # additive delta
    "contrast": (0.0, 0.5),  # deviation of the 0.5..1.5x factor
    "posterize": (8.0, 4.0),  # bits kept, interpolated downward
    "solarize": (1.0, 0.5),  # inversion threshold, interpolated downward
    "cutout": (0.0, 0.25),  # square side as fraction of image side
}

_SIGNED_OPS = {"rotate", "translate_x", "translate_y", "shear_x", "shear_y", "brightness", "contrast"}


@dataclass
class AugPolicy:
    """Which ops strong augmentation may draw, and at what strength."""

    kind: str = "strong"
    strong_ops: list[tuple[str, tuple[float, float]]] = field(
        default_factory=lambda: [(name, rng) for name, rng in STRONG_OP_RANGES.items()]
    )
    strong_n: int = 2
    strong_magnitude: int = 9

    def __post_init__(self):
        if self.strong_n < 1:
            raise ValueError("strong_n must be >= 1")
        for name, _ in self.strong_ops:
            if name not in STRONG_OP_RANGES:
                raise ValueError(f"unknown strong op {name!r}")

    @classmethod
    def from_op_names(cls, names, strong_n=2, strong_magnitude=9) -> "AugPolicy":
        ops = [(n, STRONG_OP_RANGES[n]) for n in names]
        return cls(kind="strong", strong_ops=ops, strong_n=strong_n, strong_magnitude=strong_magnitude)


def _affine_sample(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    # inv maps output pixel coords (centered) back to input coords
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_x = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2] + cx
    src_y = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2] + cy
    src_x = np.clip(src_x, 0.0, w - 1.0)
    src_y = np.clip(src_y, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (src_x - x0)[..., None]
    wy = (src_y - y0)[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _rotate(img, degrees):
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    inv = np.array([[c, s, 0.0], [-s, c, 0.0]])
    return _affine_sample(img, inv)


def _translate(img, frac, axis):
    h, w = img.shape[:2]
    shift = frac * (w if axis == "x" else h)
    inv = np.array([[1.0, 0.0, -shift if axis == "x" else 0.0],
                    [0.0, 1.0, -shift if axis == "y" else 0.0]])
    return _affine_sample(img, inv)


def _shear(img, factor, axis):
    if axis == "x":
        inv = np.array([[1.0, -factor, 0.0], [0.0, 1.0, 0.0]])
    else:
        inv = np.array([[1.0, 0.0, 0.0], [-factor, 1.0, 0.0]])
    return _affine_sample(img, inv)


def _contrast(img, factor):
    pivot = to_grayscale(img).mean()
    return pivot + (img - pivot) * factor


def _posterize(img, bits):
    bits = int(round(bits))
    if bits >= 8:
        return img.copy()
    levels = 2 ** bits
    return np.minimum(np.floor(img * levels), levels - 1) / (levels - 1)


def _solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def _cutout(img, frac, rng):
    h, w = img.shape[:2]
    size = int(round(frac * min(h, w)))
    if size == 0:
        return img.copy()
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(0, cy - size // 2), min(h, cy - size // 2 + size)
    x0, x1 = max(0, cx - size // 2), min(w, cx - size // 2 + size)
    out = img.copy()
    out[y0:y1, x0:x1] = 0.5
    return out


def _apply_strong_op(img, name, lo, hi, magnitude, rng):
    level = magnitude / 10.0
    param = lo + level * (hi - lo)
    if name in _SIGNED_OPS and rng.random() < 0.5:
        param = -param
    if name == "identity":
        return img.copy()
    if name == "hflip":
        return img[:, ::-1].copy()
    if name == "rotate":
        return _rotate(img, param)
    if name == "translate_x":
        return _translate(img, param, "x")
    if name == "translate_y":
        return _translate(img, param, "y")
    if name == "shear_x":
        return _shear(img, param, "x")
    if name == "shear_y":
        return _shear(img, param, "y")
    if name == "brightness":
        return img + param
    if name == "contrast":
        return _contrast(img, 1.0 + param)
    if name == "posterize":
        return _posterize(img, param)
    if name == "solarize":
        return _solarize(img, param)
    if name == "cutout":
        return _cutout(img, abs(param), rng)
    raise ValueError(f"unknown strong op {name!r}")


def strong_augment(img: np.ndarray, policy: AugPolicy, rng) -> np.ndarray:
    """Apply ``strong_n`` ops drawn uniformly (with replacement) from the policy.

    Output is clamped to [0, 1]. Deterministic given the rng state.
    """
    if policy.kind != "strong":
        raise ValueError(f"policy kind must be 'strong', got {policy.kind!r}")
    out = img
    for _ in range(policy.strong_n):
        idx = int(rng.integers(0, len(policy.strong_ops)))
        name, (lo, hi) = policy.strong_ops[idx]
        out = _apply_strong_op(out, name, lo, hi, policy.strong_magnitude, rng)
    return np.clip(out, 0.0, 1.0)
