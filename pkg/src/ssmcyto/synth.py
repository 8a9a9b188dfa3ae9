"""Synthetic image classes for pipeline rehearsal and benchmarks.

Eight geometric luminance patterns (flat plateau, checkerboard, stripe
orientations, disk, ring, cross, diagonals) rendered with per-sample
color tints, phase jitter, and additive Gaussian noise.  The tint hue is
random, so color carries no class signal; only spatial layout does.
Noise level is the difficulty dial.
"""

from __future__ import annotations

import os

import numpy as np

from .data import _hsv_to_rgb, save_image
from .errors import ConfigError


def _flat(size, r, c, rng):
    return np.full((size, size), 0.85)


def _checker(size, r, c, rng):
    pr, pc = rng.integers(0, 4, size=2)
    return (((r + pr) // 4 + (c + pc) // 4) % 2).astype(float)


def _stripes_h(size, r, c, rng):
    phase = rng.integers(0, 8)
    return (((r + phase) // 4) % 2).astype(float)


def _stripes_v(size, r, c, rng):
    phase = rng.integers(0, 8)
    return (((c + phase) // 4) % 2).astype(float)


def _center(size, rng):
    return (size - 1) / 2 + rng.uniform(-2, 2, size=2)


def _radius(size, r, c, rng):
    cy, cx = _center(size, rng)
    return np.hypot(r - cy, c - cx)


def _disk(size, r, c, rng):
    return (_radius(size, r, c, rng) < size * 0.28 + rng.uniform(-1, 1)).astype(float)


def _ring(size, r, c, rng):
    rad = _radius(size, r, c, rng)
    mid = size * 0.28 + rng.uniform(-1, 1)
    return ((rad > mid - size * 0.07) & (rad < mid + size * 0.07)).astype(float)


def _cross(size, r, c, rng):
    cy, cx = _center(size, rng)
    width = size * 0.09
    return ((np.abs(r - cy) < width) | (np.abs(c - cx) < width)).astype(float)


def _diag(size, r, c, rng):
    phase = rng.integers(0, 8)
    return (((r + c + phase) // 4) % 2).astype(float)


PATTERNS = (
    ("c0_flat", _flat),
    ("c1_checker", _checker),
    ("c2_stripes_h", _stripes_h),
    ("c3_stripes_v", _stripes_v),
    ("c4_disk", _disk),
    ("c5_ring", _ring),
    ("c6_cross", _cross),
    ("c7_diag", _diag),
)


def render_sample(label: int, size: int, rng, noise: float) -> np.ndarray:
    """One H x W x 3 image of the given class in [0, 1]."""
    _, pattern = PATTERNS[label]
    r, c = np.mgrid[0:size, 0:size]
    intensity = pattern(size, r, c, rng)
    hue = rng.uniform()
    fg = _hsv_to_rgb(np.array([hue, 0.55, 0.9]))
    bg = _hsv_to_rgb(np.array([(hue + rng.uniform(0.2, 0.8)) % 1.0, 0.5, 0.3]))
    img = bg + (fg - bg) * intensity[..., None]
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(root, counts, noise: float = 0.1, seed: int = 0, size: int = 32):
    """Write `counts[k]` PNGs per class under root/<class_name>/.

    `counts` may list up to 8 entries (first k patterns used) or be a
    single int applied to all 8 classes.  Sample i of class k is fully
    determined by (seed, k, i).  Returns the list of class names used.
    """
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    if counts.size == 1:
        counts = np.repeat(counts, len(PATTERNS))
    if counts.size > len(PATTERNS):
        raise ConfigError(f"at most {len(PATTERNS)} classes available, got {counts.size}")
    if (counts < 0).any():
        raise ConfigError("per-class counts must be non-negative")
    root = os.fspath(root)
    names = []
    for label, n in enumerate(counts):
        name = PATTERNS[label][0]
        names.append(name)
        class_dir = os.path.join(root, name)
        os.makedirs(class_dir, exist_ok=True)
        for i in range(int(n)):
            rng = np.random.default_rng([seed, label, i])
            save_image(render_sample(label, size, rng, noise),
                       os.path.join(class_dir, f"sample_{i:04d}.png"))
    return names
