"""Image classifier: patch embedding, staged blocks, pooled linear head.

Images [3, S, S] become (S/p)^2 tokens, run through per-stage block
stacks with patch-merging downsamples between stages (token count drops
4x, width changes per `stage_dims`), then global mean pool, layer norm,
and a linear head produce the class logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockConfig, block_forward, init_block
from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, layer_norm

DEFAULT_DEPTHS = (1, 1, 2)
DEFAULT_DIMS = (32, 64, 128)


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    image_size: int = 32
    patch_size: int = 4
    stage_depths: tuple = DEFAULT_DEPTHS
    stage_dims: tuple = DEFAULT_DIMS
    n_classes: int = 8
    n_state: int = 8
    conv_kernel: int = 3
    groups: int = 2
    window: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "stage_dims", tuple(self.stage_dims))
        if len(self.stage_depths) != len(self.stage_dims):
            raise ConfigError(
                f"stage_depths {self.stage_depths} and stage_dims "
                f"{self.stage_dims} must have equal length"
            )
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}"
            )
        stride = self.patch_size * 2 ** (len(self.stage_depths) - 1)
        if self.image_size % stride:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by "
                f"{stride} to survive {len(self.stage_depths) - 1} downsamples"
            )
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        # surface per-stage block contract violations at construction time
        for s in range(len(self.stage_dims)):
            self.block_config(s)

    def block_config(self, stage: int) -> BlockConfig:
        return BlockConfig(
            variant=self.variant,
            d_model=self.stage_dims[stage],
            n_state=self.n_state,
            conv_kernel=self.conv_kernel,
            groups=self.groups,
            window=self.window,
        )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def stage_grids(cfg: ModelConfig):
    """Token-grid shape entering each stage; halves per downsample."""
    g = cfg.image_size // cfg.patch_size
    return [(g // 2**s, g // 2**s) for s in range(len(cfg.stage_depths))]


# -- parameters ---------------------------------------------------------------


def _uniform(rng, f_in, shape):
    bound = 1.0 / np.sqrt(f_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_params(cfg: ModelConfig) -> dict:
    """Deterministic parameter dict for `cfg`; same seed, same bits."""
    rng = np.random.default_rng(cfg.seed)
    params: dict = {}
    patch_dim = 3 * cfg.patch_size**2
    params["embed.weight"] = _uniform(rng, patch_dim, (patch_dim, cfg.stage_dims[0]))
    params["embed.bias"] = _uniform(rng, patch_dim, cfg.stage_dims[0])
    params["embed.pos"] = Tensor(
        0.02 * rng.standard_normal((cfg.n_patches, cfg.stage_dims[0])),
        requires_grad=True,
    )
    for s, depth in enumerate(cfg.stage_depths):
        for d in range(depth):
            block = init_block(cfg.block_config(s), rng)
            for name, value in block.items():
                params[f"stage{s}.block{d}.{name}"] = value
        if s + 1 < len(cfg.stage_depths):
            merged = 4 * cfg.stage_dims[s]
            params[f"down{s}.weight"] = _uniform(
                rng, merged, (merged, cfg.stage_dims[s + 1])
            )
            params[f"down{s}.bias"] = _uniform(rng, merged, cfg.stage_dims[s + 1])
    last = cfg.stage_dims[-1]
    params["head_ln.gamma"] = Tensor(np.ones(last), requires_grad=True)
    params["head_ln.beta"] = Tensor(np.zeros(last), requires_grad=True)
    params["head.weight"] = _uniform(rng, last, (last, cfg.n_classes))
    params["head.bias"] = _uniform(rng, last, cfg.n_classes)
    return params


def _subview(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# -- forward ------------------------------------------------------------------


def patch_embed(img, cfg: ModelConfig, params: dict) -> Tensor:
    """Non-overlapping p x p patches, linearly projected, plus positions.

    `img` is [..., 3, S, S] raw pixel data (Tensor or ndarray); patch
    extraction happens outside the graph since images are not trained.
    """
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    s, p = cfg.image_size, cfg.patch_size
    if data.shape[-3:] != (3, s, s):
        raise ShapeError(f"expected image [..., 3, {s}, {s}], got {data.shape}")
    g = s // p
    lead = data.shape[:-3]
    grid = data.reshape(*lead, 3, g, p, g, p)
    axes = tuple(range(len(lead)))
    n = len(lead)
    patches = grid.transpose(*axes, n + 1, n + 3, n, n + 2, n + 4).reshape(
        *lead, g * g, 3 * p * p
    )
    return Tensor(patches) @ params["embed.weight"] + params["embed.bias"] + params["embed.pos"]


def downsample(fmap: Tensor, grid, weight: Tensor, bias: Tensor) -> Tensor:
    """Merge each 2x2 token neighborhood (channels concatenated) and project."""
    h, w = grid
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs an even grid, got {grid}")
    if fmap.shape[-2] != h * w:
        raise ShapeError(f"grid {grid} does not cover {fmap.shape[-2]} tokens")
    rows = 2 * np.repeat(np.arange(h // 2), w // 2)
    cols = 2 * np.tile(np.arange(w // 2), h // 2)
    corners = [
        fmap.index_select((rows + di) * w + (cols + dj), axis=-2)
        for di in (0, 1)
        for dj in (0, 1)
    ]
    return concat(corners, axis=-1) @ weight + bias


def model_forward(img, cfg: ModelConfig, params: dict) -> Tensor:
    """Full classifier: logits [..., n_classes], un-normalized."""
    tokens = patch_embed(img, cfg, params)
    grids = stage_grids(cfg)
    for s, depth in enumerate(cfg.stage_depths):
        block_cfg = cfg.block_config(s)
        for d in range(depth):
            tokens = block_forward(
                tokens, block_cfg, _subview(params, f"stage{s}.block{d}."), grid=grids[s]
            )
        if s + 1 < len(cfg.stage_depths):
            tokens = downsample(
                tokens, grids[s], params[f"down{s}.weight"], params[f"down{s}.bias"]
            )
    return pool_and_classify(tokens, params)


def pool_and_classify(tokens: Tensor, params: dict) -> Tensor:
    """Global mean pool over tokens, layer norm, linear head."""
    pooled = tokens.mean(axis=-2, keepdims=True)
    h = layer_norm(pooled, params["head_ln.gamma"], params["head_ln.beta"])
    logits = h @ params["head.weight"] + params["head.bias"]
    lead = logits.shape[:-2]
    return logits.reshape(*lead, logits.shape[-1])
