"""The five residual block variants the ensemble is built from.

Every block maps a token sequence [..., L, C] to the same shape as
``x + inner(layer_norm(x))``.  The inner paths differ per variant:

* ``vanilla``      gated selective scan over the sequence as given.
* ``vim``          forward and reverse scan branches, averaged.
* ``vmamba_ss2d``  four 2-d traversal paths, scanned independently and
                   merged back onto the grid.
* ``mambavision``  vanilla skeleton with non-causal convolutions on both
                   the main and the gate path.
* ``medmamba``     channel split: one half through an SS2D sub-block, the
                   other through a grouped convolution, then shuffled.
* ``localmamba``   windowed plus global traversals, merged and re-weighted
                   by a dual-branch attention gate.

Parameters live in a flat dict keyed by dotted names; entries ending in
``.weight`` are the ones weight decay applies to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .ssm import S6Layer, init_s6, s6_forward
from .tensor import Tensor, concat, convolve, layer_norm, silu
from .traversal import cross_merge, local_directions, serialize_patches, ss2d_directions

VARIANTS = ("vanilla", "vim", "vmamba_ss2d", "mambavision", "medmamba", "localmamba")

# inner width multiplier shared by all variants
_EXPAND = 2

# flat-dict suffix -> S6Layer field
_S6_FIELDS = (
    ("dt.weight", "W_delta"),
    ("dt.bias", "b_delta"),
    ("b_proj.weight", "W_B"),
    ("c_proj.weight", "W_C"),
    ("a_log", "A_log"),
    ("d_skip", "D_skip"),
)


@dataclass(frozen=True)
class BlockConfig:
    variant: str
    d_model: int
    n_state: int = 8
    conv_kernel: int = 3
    conv_mode: str = ""
    groups: int = 2
    window: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown block variant {self.variant!r}; expected one of {VARIANTS}"
            )
        if min(self.d_model, self.n_state, self.conv_kernel, self.window) < 1:
            raise ConfigError("block dimensions must be positive")
        required = "standard" if self.variant == "mambavision" else "causal"
        if not self.conv_mode:
            object.__setattr__(self, "conv_mode", required)
        elif self.variant in ("vanilla", "vim", "mambavision") and self.conv_mode != required:
            raise ConfigError(
                f"{self.variant} requires conv_mode={required!r}, got {self.conv_mode!r}"
            )
        if self.variant == "medmamba":
            if self.d_model % 2:
                raise ConfigError("medmamba splits channels in half; d_model must be even")
            if (self.d_model // 2) % self.groups:
                raise ConfigError(
                    f"groups={self.groups} must divide the split width {self.d_model // 2}"
                )

    @property
    def d_inner(self) -> int:
        return _EXPAND * self.d_model


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: reshape (groups, C/g), transpose, flatten."""
    c = x.shape[-1]
    if c % groups:
        raise ConfigError(f"groups={groups} must divide channel count {c}")
    perm = np.arange(c).reshape(groups, c // groups).T.ravel()
    return x.index_select(perm, axis=-1)


def dual_branch_attention(x, w_spatial, b_spatial, w_channel, b_channel):
    """Gate tokens by a pooled spatial signal and a per-token channel signal.

    The spatial branch mean-pools over tokens, projects, and applies one
    sigmoid gate to every token; the channel branch projects each token
    separately.  The two gates multiply into x.
    """
    pooled = x.mean(axis=-2, keepdims=True)
    spatial = (pooled @ w_spatial + b_spatial).sigmoid()
    channel = (x @ w_channel + b_channel).sigmoid()
    return x * spatial * channel


# -- parameter construction ---------------------------------------------------


def _init_linear(params, name, f_in, f_out, rng):
    bound = 1.0 / np.sqrt(f_in)
    params[f"{name}.weight"] = Tensor(
        rng.uniform(-bound, bound, (f_in, f_out)), requires_grad=True
    )
    params[f"{name}.bias"] = Tensor(
        rng.uniform(-bound, bound, f_out), requires_grad=True
    )


def _init_conv(params, name, shape, rng):
    # shape = (C_out, C_in/groups, *kernel); fan_in is everything past C_out
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.weight"] = Tensor(
        rng.uniform(-bound, bound, shape), requires_grad=True
    )
    params[f"{name}.bias"] = Tensor(
        rng.uniform(-bound, bound, shape[0]), requires_grad=True
    )


def _init_ln(params, name, width):
    params[f"{name}.gamma"] = Tensor(np.ones(width), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(width), requires_grad=True)


def _init_s6_into(params, prefix, d_inner, n_state, rng):
    layer = init_s6(d_inner, n_state, rng)
    for suffix, field_name in _S6_FIELDS:
        params[prefix + suffix] = getattr(layer, field_name)


def _s6_view(params, prefix) -> S6Layer:
    return S6Layer(**{f: params[prefix + s] for s, f in _S6_FIELDS})


def init_block(cfg: BlockConfig, rng: np.random.Generator) -> dict:
    """Fresh parameters for one block, as a flat name -> Tensor dict."""
    c, d, k = cfg.d_model, cfg.d_inner, cfg.conv_kernel
    params: dict = {}
    _init_ln(params, "ln", c)
    if cfg.variant == "medmamba":
        half = c // 2
        dh = _EXPAND * half
        _init_linear(params, "ssm.in_main", half, dh, rng)
        _init_linear(params, "ssm.in_gate", half, dh, rng)
        _init_conv(params, "ssm.conv2d", (dh, 1, k, k), rng)
        for i in range(4):
            _init_s6_into(params, f"ssm.s6_{i}.", dh, cfg.n_state, rng)
        _init_ln(params, "ssm.merge_ln", dh)
        _init_linear(params, "ssm.out", dh, half, rng)
        _init_conv(params, "side_conv", (half, half // cfg.groups, k, k), rng)
        return params

    _init_linear(params, "in_main", c, d, rng)
    _init_linear(params, "in_gate", c, d, rng)
    _init_linear(params, "out", d, c, rng)
    if cfg.variant in ("vanilla", "mambavision"):
        _init_conv(params, "conv_main", (d, 1, k), rng)
        _init_s6_into(params, "s6.", d, cfg.n_state, rng)
        if cfg.variant == "mambavision":
            _init_conv(params, "conv_gate", (d, 1, k), rng)
    elif cfg.variant == "vim":
        for branch in ("fwd", "rev"):
            _init_conv(params, f"conv_{branch}", (d, 1, k), rng)
            _init_s6_into(params, f"s6_{branch}.", d, cfg.n_state, rng)
    elif cfg.variant == "vmamba_ss2d":
        _init_conv(params, "conv2d", (d, 1, k, k), rng)
        for i in range(4):
            _init_s6_into(params, f"s6_{i}.", d, cfg.n_state, rng)
        _init_ln(params, "merge_ln", d)
    elif cfg.variant == "localmamba":
        for i in range(4):
            _init_s6_into(params, f"s6_{i}.", d, cfg.n_state, rng)
        _init_linear(params, "att_spatial", d, d, rng)
        _init_linear(params, "att_channel", d, d, rng)
    return params


# -- forward paths ------------------------------------------------------------


def _linear(x, params, name):
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def _dwconv1d(x, params, name, mode):
    # x [..., L, D] -> channels-first, depthwise conv, back
    d = x.shape[-1]
    conv_mode = "causal1d" if mode == "causal" else "depthwise1d"
    u = convolve(x.swapaxes(-1, -2), params[f"{name}.weight"], conv_mode, groups=d)
    return u.swapaxes(-1, -2) + params[f"{name}.bias"]


def _to_map(seq, grid):
    h, w = grid
    lead = seq.shape[:-2]
    return seq.swapaxes(-1, -2).reshape(*lead, seq.shape[-1], h, w)


def _to_seq(fmap, grid):
    h, w = grid
    lead = fmap.shape[:-3]
    return fmap.reshape(*lead, fmap.shape[-3], h * w).swapaxes(-1, -2)


def _need_grid(cfg, grid, n_tokens):
    if grid is None:
        raise ConfigError(f"{cfg.variant} operates on a 2-d grid; pass grid=(H, W)")
    h, w = grid
    if h * w != n_tokens:
        raise ShapeError(f"grid {grid} does not cover {n_tokens} tokens")
    return h, w


def vim_branch(a, params, branch):
    """One directional branch: depthwise causal conv, SiLU, selective scan."""
    u = silu(_dwconv1d(a, params, f"conv_{branch}", "causal"))
    return s6_forward(u, _s6_view(params, f"s6_{branch}."))


def _ss2d_core(a, grid, params, prefix):
    """Depthwise 2-d conv, SiLU, then four-path scan merged on the grid."""
    h, w = grid
    d = a.shape[-1]
    amap = _to_map(a, grid)
    u = convolve(amap, params[f"{prefix}conv2d.weight"], "grouped2d", groups=d)
    u = u + params[f"{prefix}conv2d.bias"].reshape(d, 1, 1)
    useq = silu(_to_seq(u, grid))
    dirs = ss2d_directions(h, w)
    outs = [
        s6_forward(serialize_patches(useq, t), _s6_view(params, f"{prefix}s6_{i}."))
        for i, t in enumerate(dirs)
    ]
    merged = cross_merge(outs, dirs)
    return layer_norm(
        merged, params[f"{prefix}merge_ln.gamma"], params[f"{prefix}merge_ln.beta"]
    )


def _inner_vanilla(h, cfg, params, grid):
    a = _linear(h, params, "in_main")
    g = _linear(h, params, "in_gate")
    u = silu(_dwconv1d(a, params, "conv_main", cfg.conv_mode))
    y = s6_forward(u, _s6_view(params, "s6."))
    if cfg.variant == "mambavision":
        g = _dwconv1d(g, params, "conv_gate", cfg.conv_mode)
    return _linear(y * silu(g), params, "out")


def _inner_vim(h, cfg, params, grid):
    a = _linear(h, params, "in_main")
    g = _linear(h, params, "in_gate")
    y_f = vim_branch(a, params, "fwd")
    y_r = vim_branch(a.flip(-2), params, "rev").flip(-2)
    y = (y_f + y_r) * 0.5
    return _linear(y * silu(g), params, "out")


def _inner_vmamba(h, cfg, params, grid):
    hw = _need_grid(cfg, grid, h.shape[-2])
    a = _linear(h, params, "in_main")
    g = _linear(h, params, "in_gate")
    merged = _ss2d_core(a, hw, params, "")
    return _linear(merged * silu(g), params, "out")


def _inner_medmamba(h, cfg, params, grid):
    hw = _need_grid(cfg, grid, h.shape[-2])
    half = cfg.d_model // 2
    xa = h.narrow(-1, 0, half)
    xb = h.narrow(-1, half, half)

    a = _linear(xa, params, "ssm.in_main")
    g = _linear(xa, params, "ssm.in_gate")
    merged = _ss2d_core(a, hw, params, "ssm.")
    ya = _linear(merged * silu(g), params, "ssm.out")

    bmap = _to_map(xb, hw)
    vb = convolve(bmap, params["side_conv.weight"], "grouped2d", groups=cfg.groups)
    vb = vb + params["side_conv.bias"].reshape(half, 1, 1)
    yb = silu(_to_seq(vb, hw))

    return channel_shuffle(concat([ya, yb], axis=-1), 2)


def _inner_localmamba(h, cfg, params, grid):
    hw = _need_grid(cfg, grid, h.shape[-2])
    a = _linear(h, params, "in_main")
    g = _linear(h, params, "in_gate")
    dirs = local_directions(*hw, window=cfg.window)
    outs = [
        s6_forward(serialize_patches(a, t), _s6_view(params, f"s6_{i}."))
        for i, t in enumerate(dirs)
    ]
    merged = cross_merge(outs, dirs)
    att = dual_branch_attention(
        merged,
        params["att_spatial.weight"],
        params["att_spatial.bias"],
        params["att_channel.weight"],
        params["att_channel.bias"],
    )
    return _linear(att * silu(g), params, "out")


_INNER = {
    "vanilla": _inner_vanilla,
    "mambavision": _inner_vanilla,
    "vim": _inner_vim,
    "vmamba_ss2d": _inner_vmamba,
    "medmamba": _inner_medmamba,
    "localmamba": _inner_localmamba,
}


def block_forward(x: Tensor, cfg: BlockConfig, params: dict, grid=None) -> Tensor:
    """Residual block: x + variant_path(layer_norm(x)).  Shape-preserving."""
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(
            f"block expects {cfg.d_model} channels, got input shape {x.shape}"
        )
    h = layer_norm(x, params["ln.gamma"], params["ln.beta"])
    return x + _INNER[cfg.variant](h, cfg, params, grid)
