"""Image decoding, color jitter, resize, and normalization.

All transforms operate on float arrays in [0, 1], shape (H, W, 3), RGB
channel order. The training pipeline derives every random decision from
(seed, stream_index) so a given presentation of a given sample is
reproducible regardless of batch composition or worker count.

Jitter factor semantics (img is the input, clamp is to [0, 1]):
  brightness b: clamp(b * img)
  contrast   c: clamp(c * img + (1 - c) * mean_luma)      scalar mean
  saturation s: clamp(s * img + (1 - s) * luma_per_pixel)
  hue        h: rotate hue channel by h (mod 1) in HSV space
Luma is Rec.601: 0.299 R + 0.587 G + 0.114 B. Ops apply in the order
brightness, contrast, saturation, hue. A factor of exactly 1 (or hue 0)
leaves pixels untouched.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class JitterConfig:
    """Magnitudes of the four color jitters plus the flip coin.

    A magnitude m maps to the sampling interval [max(0, 1-m), 1+m] for the
    multiplicative jitters and [-m, m] for hue. Zero magnitudes collapse the
    intervals so the op becomes the identity while still consuming one draw,
    keeping random streams aligned across configs.
    """
    brightness: float = 0.4
    contrast: float = 0.3
    saturation: float = 0.25
    hue: float = 0.5
    flip_probability: float = 0.5

    def __post_init__(self):
        for field in ("brightness", "contrast", "saturation", "hue"):
            v = getattr(self, field)
            if not 0.0 <= v:
                raise ConfigError(f"jitter magnitude {field} must be >= 0, got {v}")
        if self.hue > 0.5:
            raise ConfigError(f"hue magnitude above 0.5 is a full half-turn "
                              f"already; got {self.hue}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability must be in [0, 1], "
                              f"got {self.flip_probability}")

    def intervals(self):
        return {
            "brightness": (max(0.0, 1.0 - self.brightness), 1.0 + self.brightness),
            "contrast": (max(0.0, 1.0 - self.contrast), 1.0 + self.contrast),
            "saturation": (max(0.0, 1.0 - self.saturation), 1.0 + self.saturation),
            "hue": (-self.hue, self.hue),
        }

    def to_dict(self):
        return {"brightness": self.brightness, "contrast": self.contrast,
                "saturation": self.saturation, "hue": self.hue,
                "flip_probability": self.flip_probability}


def sample_factors(config: JitterConfig, rng):
    """Draw (b, c, s, h) uniformly from the config intervals, fixed order."""
    iv = config.intervals()
    b = rng.uniform(*iv["brightness"])
    c = rng.uniform(*iv["contrast"])
    s = rng.uniform(*iv["saturation"])
    h = rng.uniform(*iv["hue"])
    return b, c, s, h


def _check_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected (H, W, 3) image, got shape {img.shape}")
    return img


def luma(img):
    img = _check_image(img)
    r, g, b = LUMA_WEIGHTS
    return r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]


def horizontal_flip(img, flip: bool):
    img = _check_image(img)
    if not flip:
        return img
    return img[:, ::-1, :].copy()


def rgb_to_hsv(img):
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    img = _check_image(img)
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    maxc = img.max(axis=2)
    minc = img.min(axis=2)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    # hue sector by which channel holds the max; gray pixels get hue 0
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / safe) % 6.0, h)
    h = np.where(is_g, (b - r) / safe + 2.0, h)
    h = np.where(is_b, (r - g) / safe + 4.0, h)
    h = h / 6.0
    return np.stack([h, s, v], axis=2)


def hsv_to_rgb(hsv):
    hsv = _check_image(hsv)
    h, s, v = hsv[:, :, 0], hsv[:, :, 1], hsv[:, :, 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=2)


def color_jitter(img, factors):
    """Apply brightness, contrast, saturation, hue in that order.

    Every op clamps its output to [0, 1]. Factors must come from the
    intervals of some JitterConfig; values outside the representable ranges
    are a programming error, not data.
    """
    img = _check_image(img)
    b, c, s, h = factors
    if b < 0 or c < 0 or s < 0 or not -0.5 <= h <= 0.5:
        raise ContractError(f"jitter factors out of range: {(b, c, s, h)}")
    out = np.clip(b * img, 0.0, 1.0)
    mean_luma = luma(out).mean()
    out = np.clip(c * out + (1.0 - c) * mean_luma, 0.0, 1.0)
    lum = luma(out)[:, :, None]
    out = np.clip(s * out + (1.0 - s) * lum, 0.0, 1.0)
    if h != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[:, :, 0] = (hsv[:, :, 0] + h) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def resize_bilinear(img, size: int):
    """Bilinear resize to (size, size) with half-pixel-centered sampling.

    Sampling coordinates are clamped to the source grid, so edge pixels
    replicate. An image already at the target size passes through unchanged.
    """
    img = _check_image(img)
    in_h, in_w = img.shape[:2]
    if size < 1:
        raise ContractError(f"target size must be >= 1, got {size}")
    if (in_h, in_w) == (size, size):
        return img

    def axis_coords(n_in, n_out):
        scale = n_in / n_out
        x = (np.arange(n_out) + 0.5) * scale - 0.5
        lo = np.floor(x)
        frac = x - lo
        lo = np.clip(lo, 0, n_in - 1).astype(np.int64)
        hi = np.clip(lo + 1, 0, n_in - 1)
        return lo, hi, frac

    r0, r1, fy = axis_coords(in_h, size)
    c0, c1, fx = axis_coords(in_w, size)
    rows = img[r0] * (1.0 - fy)[:, None, None] + img[r1] * fy[:, None, None]
    out = (rows[:, c0] * (1.0 - fx)[None, :, None]
           + rows[:, c1] * fx[None, :, None])
    return out


def normalize_to_chw(img, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=np.float32):
    """Per-channel standardize and transpose (H, W, 3) -> (3, H, W)."""
    img = _check_image(img)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise ConfigError(f"mean/std must each have 3 entries, got "
                          f"{mean.shape}/{std.shape}")
    if np.any(std <= 0):
        raise ConfigError(f"std entries must be positive, got {tuple(std)}")
    out = (img - mean) / std
    return np.ascontiguousarray(out.transpose(2, 0, 1).astype(dtype))


def decode_image(path):
    """Read an image file into float32 (H, W, 3) RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


class TrainPipeline:
    """resize -> flip -> color jitter -> normalize, seeded per presentation.

    The rng for presentation `index` is default_rng((seed, index)); draws
    happen in the fixed order flip coin, brightness, contrast, saturation,
    hue, so a pipeline with some magnitudes at zero still consumes the same
    stream.
    """

    def __init__(self, jitter: JitterConfig, size: int,
                 mean=DEFAULT_MEAN, std=DEFAULT_STD, seed: int = 0,
                 dtype=np.float32):
        self.jitter = jitter
        self.size = int(size)
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)
        self.seed = int(seed)
        self.dtype = dtype

    def __call__(self, img, index: int):
        rng = np.random.default_rng((self.seed, int(index)))
        flip = rng.random() < self.jitter.flip_probability
        factors = sample_factors(self.jitter, rng)
        out = resize_bilinear(img, self.size)
        out = horizontal_flip(out, flip)
        out = color_jitter(out, factors)
        return normalize_to_chw(out, self.mean, self.std, self.dtype)


class EvalPipeline:
    """resize -> normalize; no randomness, no flip, no jitter."""

    def __init__(self, size: int, mean=DEFAULT_MEAN, std=DEFAULT_STD,
                 dtype=np.float32):
        self.size = int(size)
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)
        self.dtype = dtype

    def __call__(self, img):
        out = resize_bilinear(img, self.size)
        return normalize_to_chw(out, self.mean, self.std, self.dtype)
