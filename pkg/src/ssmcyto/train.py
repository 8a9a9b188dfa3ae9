"""Loss, optimizer, training loop, and checkpoint persistence.

Checkpoints are a small binary container: 8-byte magic ``SSMCYTO1``,
a little-endian u64 header length, a UTF-8 JSON header (model config,
class names, train config, epoch, metrics), then one record per tensor:
u32 name length, the name, u32 rank, u64 per-axis dims, and the raw
little-endian float32 payload.  Records are written in sorted name
order and parsed until end of file, so equal runs produce equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .data import (
    AugmentParams,
    ClassWeights,
    augment_image,
    compute_channel_stats,
    compute_class_weights,
    load_image,
    preprocess,
)
from .errors import ConfigError, ContractError, FormatError
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor, log_softmax

MAGIC = b"SSMCYTO1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    seed: int = 0
    use_class_weights: bool = True
    use_augmentation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class Checkpoint:
    header: dict
    tensors: dict


# -- loss ---------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, labels, weights: ClassWeights = None) -> Tensor:
    """Weighted cross entropy, normalized by the sum of sample weights."""
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape[-2], logits.shape[-1]
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels for logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(
            f"labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    nll = -(log_softmax(logits) * Tensor(onehot)).sum(axis=-1)
    w = np.ones(n) if weights is None else np.asarray(weights.w)[labels]
    return (nll * Tensor(w)).sum() * (1.0 / w.sum())


# -- optimizer ----------------------------------------------------------------


def init_adamw_state(params: dict) -> dict:
    return {
        name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        for name, p in params.items()
    }


def adamw_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, step_index: int):
    """One decoupled-decay Adam update, in place.

    Decay touches only names ending in `.weight`; norm scales, biases,
    positional tables, and state-space tensors are exempt.
    """
    b1, b2 = cfg.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        s = state[name]
        s["m"] = b1 * s["m"] + (1 - b1) * g
        s["v"] = b2 * s["v"] + (1 - b2) * g * g
        m_hat = s["m"] / (1 - b1**step_index)
        v_hat = s["v"] / (1 - b2**step_index)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if name.endswith(".weight"):
            update = update + cfg.weight_decay * p.data
        p.data = p.data - cfg.lr * update


# -- data staging -------------------------------------------------------------


def _ensure_stats(manifest, size: int):
    if manifest.stats is None or "mean" not in manifest.stats:
        manifest.stats = compute_channel_stats(manifest, size)
    return manifest.stats


def _stage_split(manifest, split: str, size: int):
    samples = manifest.subset(split)
    raw = [load_image(s.path) for s in samples]
    labels = np.array([s.label for s in samples], dtype=int)
    return raw, labels


def _preprocess_all(raw, size, stats) -> np.ndarray:
    return np.stack([preprocess(img, size, stats).data for img in raw])


def predict_classes(x: np.ndarray, cfg: ModelConfig, params: dict, batch_size=64):
    """Argmax class per image; ties resolve to the lowest index."""
    out = []
    for start in range(0, len(x), batch_size):
        logits = model_forward(x[start:start + batch_size], cfg, params).data
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# -- training loop ------------------------------------------------------------


def train_model(
    manifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    augment_params: AugmentParams = None,
    log_fn=None,
):
    """Train one model on the manifest's train split.

    Returns (Checkpoint, history) where history holds one dict per epoch
    with train loss and, when a val split exists, val accuracy.  Fixed
    seeds give bitwise-identical results.
    """
    raw_train, y_train = _stage_split(manifest, "train", model_cfg.image_size)
    if not raw_train:
        raise ContractError("train split is empty; nothing to fit")
    stats = _ensure_stats(manifest, model_cfg.image_size)
    size = model_cfg.image_size

    weights = None
    if train_cfg.use_class_weights:
        weights = compute_class_weights(
            np.maximum(manifest.counts("train"), 1), classes=manifest.classes
        )

    raw_val, y_val = _stage_split(manifest, "val", size)
    x_val = _preprocess_all(raw_val, size, stats) if raw_val else None

    params = init_params(model_cfg)
    state = init_adamw_state(params)
    if augment_params is None:
        augment_params = AugmentParams()
    x_clean = None
    if not train_cfg.use_augmentation:
        x_clean = _preprocess_all(raw_train, size, stats)

    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        if train_cfg.use_augmentation:
            x_epoch = np.stack([
                preprocess(
                    augment_image(
                        img, augment_params,
                        np.random.default_rng([train_cfg.seed, epoch, i]),
                    ),
                    size, stats,
                ).data
                for i, img in enumerate(raw_train)
            ])
        else:
            x_epoch = x_clean
        perm = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(y_train))
        total_loss, total_n = 0.0, 0
        for start in range(0, len(perm), train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            logits = model_forward(x_epoch[idx], model_cfg, params)
            loss = cross_entropy_loss(logits, y_train[idx], weights)
            for p in params.values():
                p.grad = None
            loss.backward()
            step += 1
            adamw_step(params, {n: p.grad for n, p in params.items()}, state,
                       train_cfg, step)
            total_loss += float(loss.data) * len(idx)
            total_n += len(idx)
        entry = {"epoch": epoch, "train_loss": total_loss / total_n}
        if x_val is not None:
            entry["val_accuracy"] = float(
                (predict_classes(x_val, model_cfg, params) == y_val).mean()
            )
        history.append(entry)
        if log_fn:
            log_fn(
                f"epoch {epoch}: loss {entry['train_loss']:.4f}"
                + (f" val_acc {entry['val_accuracy']:.4f}" if x_val is not None else "")
            )

    ckpt = make_checkpoint(
        model_cfg, train_cfg, manifest.classes, params,
        epoch=train_cfg.epochs,
        metrics=history[-1] if history else {},
        stats=stats,
    )
    return ckpt, history


# -- checkpoints --------------------------------------------------------------


def make_checkpoint(model_cfg, train_cfg, classes, params, epoch, metrics, stats=None):
    header = {
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg),
        "classes": list(classes),
        "epoch": int(epoch),
        "metrics": metrics,
    }
    if stats is not None:
        header["stats"] = stats
    tensors = {name: p.data.astype("<f4") for name, p in params.items()}
    return Checkpoint(header=header, tensors=tensors)


def params_from_checkpoint(ckpt: Checkpoint) -> dict:
    return {
        name: Tensor(arr.astype(np.float64), requires_grad=True)
        for name, arr in ckpt.tensors.items()
    }


def model_config_from_checkpoint(ckpt: Checkpoint) -> ModelConfig:
    return ModelConfig(**ckpt.header["model_config"])


def check_model_config(ckpt: Checkpoint, cfg: ModelConfig):
    stored = model_config_from_checkpoint(ckpt)
    if stored != cfg:
        raise ConfigError(
            f"checkpoint was built for {stored}, which does not match "
            f"the requested configuration {cfg}"
        )


def save_checkpoint(ckpt: Checkpoint, path):
    header = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name].astype("<f4"))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open checkpoint {path!r}: {exc}") from exc
    with fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(
                f"{path!r} is not a checkpoint (bad magic {magic!r})"
            )
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
        tensors = {}
        while True:
            prefix = fh.read(4)
            if not prefix:
                break
            if len(prefix) != 4:
                raise FormatError("checkpoint truncated mid-record")
            (name_len,) = struct.unpack("<I", prefix)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
            dims = struct.unpack(
                f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of {name!r}")
            )
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(fh, 4 * count, f"values of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Checkpoint(header=header, tensors=tensors)
