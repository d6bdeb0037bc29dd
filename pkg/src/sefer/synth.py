"""Deterministic synthetic dataset for smoke tests and CI.

Each class gets a fixed mean color spaced evenly around the hue wheel;
images are that color plus Gaussian pixel noise. The signal is strong
enough for a small network to separate quickly yet survives horizontal
flips (color is position-free). Generation is keyed by (seed, class,
index) so reruns produce byte-identical files.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .augment import hsv_to_rgb
from .dataset import DatasetManifest, Sample, write_manifest
from .errors import ConfigError
from .labels import NUM_CLASSES

PALETTE_SATURATION = 0.85
PALETTE_VALUE = 0.75


def class_palette():
    """Mean RGB color per class: hue c/7, fixed saturation and value."""
    hsv = np.zeros((1, NUM_CLASSES, 3), dtype=np.float64)
    hsv[0, :, 0] = np.arange(NUM_CLASSES) / NUM_CLASSES
    hsv[0, :, 1] = PALETTE_SATURATION
    hsv[0, :, 2] = PALETTE_VALUE
    return hsv_to_rgb(hsv)[0]


def generate_synthetic_dataset(out_dir, counts, image_size=32, seed=0,
                               split_name="train", noise=0.05) -> DatasetManifest:
    """Write `counts[c]` PNG images per class under out_dir and a manifest.

    Images land at {split}/class{c}/{i:04d}.png relative to out_dir; the
    manifest stores those relative paths and goes to
    out_dir/{split}_manifest.csv. Returns the manifest.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != NUM_CLASSES or any(c < 0 for c in counts):
        raise ConfigError(f"counts must be {NUM_CLASSES} non-negative integers, "
                          f"got {counts}")
    if image_size < 8:
        raise ConfigError(f"image_size must be >= 8, got {image_size}")
    if not 0.0 <= noise <= 0.5:
        raise ConfigError(f"noise must be in [0, 0.5], got {noise}")
    out_dir = Path(out_dir)
    palette = class_palette()
    samples = []
    for c, n in enumerate(counts):
        class_dir = out_dir / split_name / f"class{c}"
        if n:
            class_dir.mkdir(parents=True, exist_ok=True)
        base = palette[c]
        for i in range(n):
            rng = np.random.default_rng((seed, c, i))
            img = base + rng.normal(0.0, noise, size=(image_size, image_size, 3))
            img = np.clip(img, 0.0, 1.0)
            pixels = np.round(img * 255.0).astype(np.uint8)
            rel = f"{split_name}/class{c}/{i:04d}.png"
            Image.fromarray(pixels, mode="RGB").save(out_dir / rel, format="PNG")
            samples.append(Sample(image_path=rel, label=c, source="synthetic"))
    manifest = DatasetManifest(samples=tuple(samples), split_name=split_name)
    write_manifest(manifest, out_dir / f"{split_name}_manifest.csv")
    return manifest
