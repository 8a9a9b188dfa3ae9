"""Dataset ingestion, splitting, augmentation, balancing, preprocessing.

A dataset on disk is a directory of class subdirectories holding PNG or
JPEG images.  The manifest records every sample as (path, label, split,
origin) and persists as a CSV with exactly that header next to a
``stats.json`` sidecar carrying the class list and normalization
statistics.  All randomness is keyed so that augmenting sample i of
class c under seed s gives the same bytes no matter the worker order.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, FormatError
from .tensor import Tensor

SPLITS = ("train", "holdout", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_HEADER = ["path", "label", "split", "origin"]
STATS_SIDECAR = "stats.json"


class Sample(NamedTuple):
    path: str
    label: int
    split: str
    origin: str = ""


@dataclass
class DatasetManifest:
    classes: list
    samples: list
    stats: Optional[dict] = None
    errors: list = field(default_factory=list)

    def counts(self, split: Optional[str] = None) -> np.ndarray:
        out = np.zeros(len(self.classes), dtype=int)
        for s in self.samples:
            if split is None or s.split == split:
                out[s.label] += 1
        return out

    def subset(self, split: str) -> list:
        return [s for s in self.samples if s.split == split]

    def validate(self):
        seen = {}
        for s in self.samples:
            if not 0 <= s.label < len(self.classes):
                raise ContractError(
                    f"sample {s.path!r} has label {s.label} outside "
                    f"0..{len(self.classes) - 1}"
                )
            if s.split not in SPLITS:
                raise ContractError(f"sample {s.path!r} has unknown split {s.split!r}")
            if s.path in seen and seen[s.path] != s.split:
                raise ContractError(
                    f"path {s.path!r} appears in splits "
                    f"{seen[s.path]!r} and {s.split!r}"
                )
            seen[s.path] = s.split


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray


@dataclass(frozen=True)
class AugmentParams:
    """Jitter amplitudes; every default mirrors the training recipe."""

    rotation_deg: float = 360.0
    translate_frac: float = 0.10
    scale: tuple = (0.90, 1.10)
    shear_deg: float = 5.0
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    brightness: float = 0.10
    contrast: float = 0.10
    saturation: float = 0.05
    hue: float = 0.02
    blur_kernel: int = 3
    blur_sigma: tuple = (0.1, 1.0)

    def __post_init__(self):
        if not 0 <= self.hflip_p <= 1 or not 0 <= self.vflip_p <= 1:
            raise ConfigError("flip probabilities must lie in [0, 1]")
        if not 0 <= self.rotation_deg <= 360:
            raise ConfigError("rotation_deg must lie in [0, 360]")
        if self.scale[0] <= 0 or self.scale[0] > self.scale[1]:
            raise ConfigError(f"invalid scale range {self.scale}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be a positive odd integer")
        if self.blur_sigma[0] < 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise ConfigError(f"invalid blur_sigma range {self.blur_sigma}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(
            rotation_deg=0.0,
            translate_frac=0.0,
            scale=(1.0, 1.0),
            shear_deg=0.0,
            hflip_p=0.0,
            vflip_p=0.0,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            hue=0.0,
            blur_sigma=(0.0, 0.0),
        )


# -- image I/O ----------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode to H x W x 3 float64 in [0, 1]; raises FormatError on failure."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"cannot decode image {path!r}: {exc}") from exc


def save_image(img: np.ndarray, path):
    data = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((data * 255.0).round().astype(np.uint8)).save(path)


# -- manifest construction and persistence ------------------------------------


def load_manifest(root) -> DatasetManifest:
    """Scan `root/<class>/*` image tree into a manifest.

    Classes are the subdirectory names, sorted; samples sort by path.
    Unreadable images are excluded and listed in `manifest.errors`.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise FormatError(f"dataset root {root!r} is not a directory")
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise FormatError(f"dataset root {root!r} contains no class directories")
    samples, errors = [], []
    for label, name in enumerate(classes):
        class_dir = os.path.join(root, name)
        paths = sorted(
            os.path.join(class_dir, f)
            for f in os.listdir(class_dir)
            if f.lower().endswith(IMAGE_SUFFIXES)
        )
        if not paths:
            warnings.warn(f"class directory {class_dir!r} holds no images")
        for p in paths:
            try:
                with Image.open(p) as im:
                    im.verify()
            except Exception as exc:
                errors.append(f"{p}: {exc}")
                continue
            samples.append(Sample(path=p, label=label, split="train"))
    samples.sort(key=lambda s: s.path)
    return DatasetManifest(classes=classes, samples=samples, errors=errors)


def save_manifest(m: DatasetManifest, csv_path):
    """Write the sample table as CSV plus the stats.json sidecar."""
    m.validate()
    csv_path = os.fspath(csv_path)
    base = os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(base, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in m.samples:
            writer.writerow(
                [os.path.relpath(s.path, base), m.classes[s.label], s.split, s.origin]
            )
    sidecar = {"classes": list(m.classes)}
    if m.stats is not None:
        sidecar.update(m.stats)
    with open(os.path.join(base, STATS_SIDECAR), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def read_manifest(csv_path) -> DatasetManifest:
    """Load a CSV manifest; paths resolve relative to the CSV location."""
    csv_path = os.fspath(csv_path)
    base = os.path.dirname(os.path.abspath(csv_path))
    try:
        fh = open(csv_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot open manifest {csv_path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(
                f"manifest {csv_path!r} must start with header "
                f"{','.join(MANIFEST_HEADER)!r}, found {header}"
            )
        rows = [r for r in reader if r]
    stats = None
    classes = None
    sidecar_path = os.path.join(base, STATS_SIDECAR)
    if os.path.exists(sidecar_path):
        with open(sidecar_path, encoding="utf-8") as sfh:
            sidecar = json.load(sfh)
        classes = sidecar.pop("classes", None)
        stats = sidecar or None
    if classes is None:
        classes = sorted({r[1] for r in rows})
    index = {name: i for i, name in enumerate(classes)}
    samples = []
    for r in rows:
        if len(r) != 4:
            raise FormatError(f"manifest row {r} does not have 4 columns")
        path, label, split, origin = r
        if label not in index:
            raise FormatError(f"manifest row for {path!r} names unknown class {label!r}")
        samples.append(
            Sample(os.path.normpath(os.path.join(base, path)), index[label], split, origin)
        )
    m = DatasetManifest(classes=list(classes), samples=samples, stats=stats)
    m.validate()
    return m


# -- splitting ----------------------------------------------------------------

_DEFAULT_SPLIT_NAMES = {
    1: ("train",),
    2: ("train", "test"),
    3: ("train", "val", "test"),
    4: ("train", "holdout", "val", "test"),
}


def _largest_remainder(n: int, ratios: np.ndarray) -> np.ndarray:
    exact = n * ratios
    base = np.floor(exact).astype(int)
    short = n - base.sum()
    # ties resolve to the earlier split: stable sort on descending fraction
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:short]] += 1
    return base


def stratified_split(m: DatasetManifest, ratios, seed: int, splits=None) -> DatasetManifest:
    """Assign splits per class: seeded shuffle, then contiguous slices.

    `ratios` are positive weights, one per split name; they normalize to 1.
    With no explicit `splits`, 2 ratios mean (train, test) and 3 mean
    (train, val, test).  Per-class sizes use largest-remainder rounding.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if splits is None:
        if len(ratios) not in _DEFAULT_SPLIT_NAMES:
            raise ConfigError(f"cannot infer split names for {len(ratios)} ratios")
        splits = _DEFAULT_SPLIT_NAMES[len(ratios)]
    if len(splits) != len(ratios):
        raise ConfigError(f"{len(ratios)} ratios for {len(splits)} split names")
    for name in splits:
        if name not in SPLITS:
            raise ConfigError(f"unknown split name {name!r}; expected one of {SPLITS}")
    if (ratios <= 0).any():
        raise ConfigError(f"ratios must be positive, got {ratios.tolist()}")
    ratios = ratios / ratios.sum()

    assigned = list(m.samples)
    for label in range(len(m.classes)):
        idx = [i for i, s in enumerate(m.samples) if s.label == label]
        if not idx:
            continue
        if len(idx) < len(splits):
            warnings.warn(
                f"class {m.classes[label]!r} has {len(idx)} samples, fewer than "
                f"{len(splits)} splits; keeping all in {splits[0]!r}"
            )
            for i in idx:
                assigned[i] = assigned[i]._replace(split=splits[0])
            continue
        rng = np.random.default_rng([seed, label])
        perm = rng.permutation(len(idx))
        sizes = _largest_remainder(len(idx), ratios)
        bounds = np.cumsum(sizes)
        for pos, j in enumerate(perm):
            split = splits[int(np.searchsorted(bounds, pos, side="right"))]
            assigned[idx[j]] = assigned[idx[j]]._replace(split=split)
    return replace(m, samples=assigned)


# -- augmentation -------------------------------------------------------------

_GRAY = np.array([0.299, 0.587, 0.114])


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    spread = maxc - minc
    v = maxc
    s = np.where(maxc > 0, spread / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(spread, 1e-12)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    h = np.select(
        [maxc == r, maxc == g],
        [(g - b) / safe, 2.0 + (b - r) / safe],
        default=4.0 + (r - g) / safe,
    )
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _random_affine(img, p: AugmentParams, rng) -> np.ndarray:
    angle = np.deg2rad(rng.uniform(0.0, p.rotation_deg))
    h, w = img.shape[:2]
    ty = rng.uniform(-p.translate_frac, p.translate_frac) * h
    tx = rng.uniform(-p.translate_frac, p.translate_frac) * w
    s = rng.uniform(p.scale[0], p.scale[1])
    shear = np.deg2rad(rng.uniform(-p.shear_deg, p.shear_deg))

    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    sh = np.array([[1.0, 0.0], [np.tan(shear), 1.0]])
    forward = s * (sh @ rot)
    if np.allclose(forward, np.eye(2)) and tx == 0 and ty == 0:
        return img
    inv = np.linalg.inv(forward)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ (center + np.array([ty, tx]))
    out = np.empty_like(img)
    for c in range(3):
        out[..., c] = ndimage.affine_transform(
            img[..., c], inv, offset=offset, order=1, mode="nearest"
        )
    return out


def _color_jitter(img, p: AugmentParams, rng) -> np.ndarray:
    # draws happen even for zero amplitudes so the stream stays aligned;
    # zero-amplitude ops are skipped entirely to keep identity exact
    brightness = rng.uniform(1 - p.brightness, 1 + p.brightness)
    if p.brightness:
        img = img * brightness
    contrast = rng.uniform(1 - p.contrast, 1 + p.contrast)
    if p.contrast:
        mean = (img @ _GRAY).mean()
        img = (img - mean) * contrast + mean
    saturation = rng.uniform(1 - p.saturation, 1 + p.saturation)
    if p.saturation:
        gray = (img @ _GRAY)[..., None]
        img = gray + (img - gray) * saturation
    dh = rng.uniform(-p.hue, p.hue)
    if p.hue:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        img = _hsv_to_rgb(hsv)
    return img


def _gaussian_blur(img, p: AugmentParams, rng) -> np.ndarray:
    sigma = rng.uniform(p.blur_sigma[0], p.blur_sigma[1])
    if sigma <= 0.0:
        return img
    radius = p.blur_kernel // 2
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = ndimage.correlate1d(img, taps, axis=0, mode="nearest")
    return ndimage.correlate1d(out, taps, axis=1, mode="nearest")


def augment_image(img: np.ndarray, p: AugmentParams, rng) -> np.ndarray:
    """One random augmentation pass: affine, flips, color jitter, blur.

    `img` is H x W x 3 in [0, 1].  The RNG draw order is fixed (affine
    parameters, flips, jitters, blur sigma) so results are reproducible
    from the generator state alone.
    """
    img = np.asarray(img, dtype=np.float64)
    out = _random_affine(img, p, rng)
    if rng.random() < p.hflip_p:
        out = out[:, ::-1]
    if rng.random() < p.vflip_p:
        out = out[::-1]
    out = _color_jitter(out, p, rng)
    out = _gaussian_blur(out, p, rng)
    return np.clip(out, 0.0, 1.0)


# -- balancing ----------------------------------------------------------------


def balance_plan(m: DatasetManifest, targets) -> np.ndarray:
    """Augmented copies needed per class: max(0, target - train count)."""
    counts = m.counts("train")
    targets = np.broadcast_to(np.asarray(targets, dtype=int), counts.shape)
    for label, (count, target) in enumerate(zip(counts, targets)):
        if count == 0 and target > 0:
            raise ContractError(
                f"class {m.classes[label]!r} has no training images to augment from"
            )
    return np.maximum(0, targets - counts)


def balance_dataset(
    m: DatasetManifest, targets, p: AugmentParams, seed: int, out_dir
) -> DatasetManifest:
    """Top up minority classes with augmented copies until count == target.

    Sources are drawn uniformly with replacement from each class's train
    split; each copy i of class c uses an RNG keyed by (seed, c, i), so
    the output is deterministic and workers could run in any order.
    Classes at or above target are untouched; nothing is ever deleted.
    """
    plan = balance_plan(m, targets)
    out_dir = os.fspath(out_dir)
    new_samples = list(m.samples)
    for label, extra in enumerate(plan):
        if extra == 0:
            continue
        pool = [s for s in m.samples if s.label == label and s.split == "train"]
        class_dir = os.path.join(out_dir, m.classes[label])
        os.makedirs(class_dir, exist_ok=True)
        for i in range(int(extra)):
            rng = np.random.default_rng([seed, label, i])
            src = pool[int(rng.integers(len(pool)))]
            img = augment_image(load_image(src.path), p, rng)
            stem = os.path.splitext(os.path.basename(src.path))[0]
            dest = os.path.join(class_dir, f"{stem}_aug{i}.png")
            save_image(img, dest)
            new_samples.append(
                Sample(path=dest, label=label, split="train", origin=src.path)
            )
    return replace(m, samples=new_samples)


# -- weights and preprocessing ------------------------------------------------


def compute_class_weights(counts, classes=None) -> ClassWeights:
    """w_c = N / (K * n_c): a uniformly drawn sample has mean weight 1."""
    counts = np.asarray(counts, dtype=np.float64)
    for i, n in enumerate(counts):
        if n <= 0:
            name = classes[i] if classes else f"class {i}"
            raise ContractError(f"{name} has zero samples; weights undefined")
    return ClassWeights(w=counts.sum() / (len(counts) * counts))


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centered bilinear resample of H x W x C to size x size."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return np.asarray(img, dtype=np.float64)

    def axis_coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    r0, r1, rf = axis_coords(h, size)
    c0, c1, cf = axis_coords(w, size)
    rf = rf[:, None, None]
    cf = cf[None, :, None]
    img = np.asarray(img, dtype=np.float64)
    top = img[r0][:, c0] * (1 - cf) + img[r0][:, c1] * cf
    bottom = img[r1][:, c0] * (1 - cf) + img[r1][:, c1] * cf
    return top * (1 - rf) + bottom * rf


def compute_channel_stats(m: DatasetManifest, size: int) -> dict:
    """Per-channel mean/std over resized train-split images."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    n = 0
    for s in m.subset("train"):
        img = resize_bilinear(load_image(s.path), size)
        total += img.reshape(-1, 3).sum(axis=0)
        total_sq += (img.reshape(-1, 3) ** 2).sum(axis=0)
        n += size * size
    if n == 0:
        raise ContractError("cannot compute channel statistics: train split is empty")
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0)
    return {"mean": mean.tolist(), "std": np.sqrt(var).tolist()}


def preprocess(img: np.ndarray, size: int, stats: Optional[dict] = None) -> Tensor:
    """Resize, scale to [0, 1], standardize per channel; returns [3, S, S]."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = resize_bilinear(img, size)
    if stats is not None:
        mean = np.asarray(stats["mean"], dtype=np.float64)
        std = np.maximum(np.asarray(stats["std"], dtype=np.float64), 1e-8)
        img = (img - mean) / std
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))
