"""Stacking ensemble: holdout partition, meta-learner, fused inference.

Base models train on the `train` split; a stratified slice of it is
re-tagged `holdout` and only ever feeds the meta-learner, so the two
learners never see each other's data.  The meta-learner is a one-hidden
-layer MLP over the concatenated base softmax outputs, trained for a
fixed, small number of epochs.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .data import _largest_remainder
from .errors import ConfigError, ContractError, FormatError
from .model import ModelConfig, model_forward
from .tensor import Tensor, concat, silu, softmax
from .train import (
    Checkpoint,
    TrainConfig,
    _ensure_stats,
    _preprocess_all,
    _stage_split,
    adamw_step,
    cross_entropy_loss,
    init_adamw_state,
    load_checkpoint,
    params_from_checkpoint,
    save_checkpoint,
)


@dataclass
class EnsembleSpec:
    base_checkpoints: list
    n_classes: int
    holdout_fraction: float = 0.2
    hidden: int = 64
    seed: int = 0
    meta_checkpoint: str = ""

    def __post_init__(self):
        if not self.base_checkpoints:
            raise ConfigError("an ensemble needs at least one base checkpoint")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(
                f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}"
            )
        if self.hidden < 1 or self.n_classes < 2:
            raise ConfigError("hidden width and class count must be positive")

    @property
    def meta_input_width(self) -> int:
        return len(self.base_checkpoints) * self.n_classes


class BaseModel(NamedTuple):
    cfg: ModelConfig
    params: dict
    classes: list
    stats: dict


# -- holdout partition --------------------------------------------------------


def partition_holdout(manifest, fraction: float, seed: int):
    """Stratified re-tag of the train split into train + holdout.

    Other splits are untouched.  Deterministic per seed; per-class sizes
    follow largest-remainder rounding of (1 - fraction, fraction).
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {fraction}")
    samples = list(manifest.samples)
    for label in range(len(manifest.classes)):
        idx = [
            i for i, s in enumerate(samples)
            if s.label == label and s.split == "train"
        ]
        if not idx:
            continue
        sizes = _largest_remainder(len(idx), np.array([1 - fraction, fraction]))
        if sizes[1] == 0:
            warnings.warn(
                f"class {manifest.classes[label]!r} is too small to contribute "
                f"a holdout sample at fraction {fraction}"
            )
        rng = np.random.default_rng([seed, label])
        perm = rng.permutation(len(idx))
        for pos in perm[sizes[0]:]:
            samples[idx[pos]] = samples[idx[pos]]._replace(split="holdout")
    return replace(manifest, samples=samples)


def leakage_check(manifest):
    """Assert base-train and meta-holdout paths are disjoint."""
    train = {s.path for s in manifest.samples if s.split == "train"}
    holdout = {s.path for s in manifest.samples if s.split == "holdout"}
    shared = train & holdout
    if shared:
        raise ContractError(
            f"{len(shared)} paths appear in both train and holdout, "
            f"e.g. {sorted(shared)[0]!r}"
        )


# -- base model loading and prediction assembly -------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_bases(spec: EnsembleSpec) -> list:
    """Load base checkpoints; class lists must agree exactly, in order."""
    bases = []
    for path in spec.base_checkpoints:
        ckpt = load_checkpoint(path)
        cfg = ModelConfig(**ckpt.header["model_config"])
        classes = ckpt.header["classes"]
        if len(classes) != spec.n_classes:
            raise ConfigError(
                f"checkpoint {path!r} has {len(classes)} classes, "
                f"spec expects {spec.n_classes}"
            )
        if bases and classes != bases[0].classes:
            raise ConfigError(
                f"checkpoint {path!r} class list {classes} differs from "
                f"{spec.base_checkpoints[0]!r} ({bases[0].classes})"
            )
        bases.append(
            BaseModel(cfg, params_from_checkpoint(ckpt), classes,
                      ckpt.header.get("stats"))
        )
    return bases


def assemble_meta_inputs(bases, x) -> Tensor:
    """Concatenate softmax probabilities of every base, in listed order."""
    return concat(
        [softmax(model_forward(x, b.cfg, b.params)) for b in bases], axis=-1
    )


# -- meta-learner -------------------------------------------------------------


def init_meta(n_inputs: int, n_classes: int, hidden: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)

    def uniform(f_in, shape):
        bound = 1.0 / np.sqrt(f_in)
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    return {
        "hidden.weight": uniform(n_inputs, (n_inputs, hidden)),
        "hidden.bias": uniform(n_inputs, hidden),
        "out.weight": uniform(hidden, (hidden, n_classes)),
        "out.bias": uniform(hidden, n_classes),
    }


def averaging_meta(n_models: int, n_classes: int, hidden: int = 64) -> dict:
    """Hand-built meta weights computing the mean of the n segments.

    Exploits silu(u) == u for u >= 40 in float64 (sigmoid saturates), so
    the only deviation from the uniform soft-vote average is the rounding
    of the +40/-40 bias detour, a few ulps of 40.
    """
    if hidden < n_classes:
        raise ConfigError(f"need hidden >= {n_classes} for the averaging map")
    w1 = np.zeros((n_models * n_classes, hidden))
    for m in range(n_models):
        for k in range(n_classes):
            w1[m * n_classes + k, k] = 1.0 / n_models
    w2 = np.zeros((hidden, n_classes))
    w2[:n_classes, :] = np.eye(n_classes)
    return {
        "hidden.weight": Tensor(w1),
        "hidden.bias": Tensor(np.full(hidden, 40.0)),
        "out.weight": Tensor(w2),
        "out.bias": Tensor(np.full(n_classes, -40.0)),
    }


def meta_forward(z: Tensor, meta: dict) -> Tensor:
    h = silu(z @ meta["hidden.weight"] + meta["hidden.bias"])
    return h @ meta["out.weight"] + meta["out.bias"]


def train_meta(
    spec: EnsembleSpec,
    manifest,
    epochs: int = 5,
    train_cfg: TrainConfig = None,
    log_fn=None,
):
    """Fit the meta-learner on the holdout split; bases stay frozen.

    Returns (meta params, info) where info carries the per-epoch history
    and the base checkpoint digests taken before and after training.
    """
    leakage_check(manifest)
    if len(manifest.classes) != spec.n_classes:
        raise ConfigError(
            f"manifest has {len(manifest.classes)} classes, "
            f"spec expects {spec.n_classes}"
        )
    raw, labels = _stage_split(manifest, "holdout", 0)
    if not raw:
        raise ContractError("holdout split is empty; cannot fit the meta-learner")
    if train_cfg is None:
        # the meta is a tiny MLP on [0, 1] features with a 5-epoch budget;
        # it needs a far larger step than the base models
        train_cfg = TrainConfig(epochs=epochs, seed=spec.seed, lr=5e-2)

    digests_before = [file_digest(p) for p in spec.base_checkpoints]
    bases = load_bases(spec)
    size = bases[0].cfg.image_size
    stats = bases[0].stats or _ensure_stats(manifest, size)
    x = _preprocess_all(raw, size, stats)

    # base predictions are fixed features; compute once, off the tape
    z = assemble_meta_inputs(bases, x).data

    meta = init_meta(spec.meta_input_width, spec.n_classes, spec.hidden, spec.seed)
    state = init_adamw_state(meta)
    history = []
    step = 0
    for epoch in range(epochs):
        perm = np.random.default_rng([spec.seed, epoch]).permutation(len(labels))
        total, count = 0.0, 0
        for start in range(0, len(perm), train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            loss = cross_entropy_loss(meta_forward(Tensor(z[idx]), meta), labels[idx])
            for p in meta.values():
                p.grad = None
            loss.backward()
            step += 1
            adamw_step(meta, {n: p.grad for n, p in meta.items()}, state,
                       train_cfg, step)
            total += float(loss.data) * len(idx)
            count += len(idx)
        acc = float(
            (np.argmax(meta_forward(Tensor(z), meta).data, axis=-1) == labels).mean()
        )
        history.append({"epoch": epoch, "meta_loss": total / count, "holdout_accuracy": acc})
        if log_fn:
            log_fn(f"meta epoch {epoch}: loss {total / count:.4f} acc {acc:.4f}")

    digests_after = [file_digest(p) for p in spec.base_checkpoints]
    if digests_before != digests_after:
        raise ContractError("base checkpoints changed while the meta-learner trained")
    info = {"history": history, "base_digests": digests_before}
    return meta, info


# -- fused inference ----------------------------------------------------------


def ensemble_predict(bases, meta: dict, x):
    """(probabilities, predicted class) for one image or a batch.

    Ties in the argmax resolve to the lowest class index.
    """
    z = assemble_meta_inputs(bases, x)
    probs = softmax(meta_forward(z, meta))
    pred = np.argmax(probs.data, axis=-1)
    return probs, pred


# -- persistence --------------------------------------------------------------


def save_ensemble(spec: EnsembleSpec, meta: dict, spec_path, meta_path):
    """Spec as JSON; meta parameters in the checkpoint container.

    The binary holds no paths, so it is relocatable and byte-identical
    across runs that differ only in directory layout.
    """
    spec.meta_checkpoint = os.fspath(meta_path)
    ckpt = Checkpoint(
        header={
            "kind": "meta",
            "n_models": len(spec.base_checkpoints),
            "n_classes": spec.n_classes,
            "hidden": spec.hidden,
            "seed": spec.seed,
        },
        tensors={name: p.data.astype("<f4") for name, p in meta.items()},
    )
    save_checkpoint(ckpt, meta_path)
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump(_spec_dict(spec), fh, indent=2, sort_keys=True)


def _spec_dict(spec: EnsembleSpec) -> dict:
    return {
        "base_checkpoints": [os.fspath(p) for p in spec.base_checkpoints],
        "n_classes": spec.n_classes,
        "holdout_fraction": spec.holdout_fraction,
        "hidden": spec.hidden,
        "seed": spec.seed,
        "meta_checkpoint": spec.meta_checkpoint,
    }


def load_ensemble(spec_path):
    """Returns (spec, meta params) from the JSON + checkpoint pair."""
    try:
        with open(spec_path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot open ensemble spec {spec_path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"ensemble spec {spec_path!r} is not valid JSON: {exc}") from exc
    try:
        spec = EnsembleSpec(**payload)
    except TypeError as exc:
        raise FormatError(f"ensemble spec {spec_path!r} has wrong fields: {exc}") from exc
    ckpt = load_checkpoint(spec.meta_checkpoint)
    meta = {name: Tensor(arr.astype(np.float64), requires_grad=True)
            for name, arr in ckpt.tensors.items()}
    expected = {"hidden.weight", "hidden.bias", "out.weight", "out.bias"}
    if set(meta) != expected:
        raise FormatError(
            f"meta checkpoint {spec.meta_checkpoint!r} holds tensors "
            f"{sorted(meta)}, expected {sorted(expected)}"
        )
    if meta["hidden.weight"].shape[0] != spec.meta_input_width:
        raise FormatError(
            f"meta input width {meta['hidden.weight'].shape[0]} does not match "
            f"spec {spec.meta_input_width}"
        )
    return spec, meta
