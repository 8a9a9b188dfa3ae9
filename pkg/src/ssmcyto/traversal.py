"""Scan orders over 2D patch grids.

A Traversal is a fixed permutation of the H*W patch indices that turns a
2D feature map into a 1D sequence, together with its inverse for putting
scanned sequences back. Three kinds exist: row-major, column-major, and
local-window (windows enumerated row-major, patches row-major within each
window); each can additionally be reversed end-to-end. cross_merge fuses
several scanned sequences back into one map by de-serializing each with
its inverse permutation and summing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor

__all__ = [
    "Traversal",
    "cross_merge",
    "deserialize_patches",
    "local_directions",
    "make_traversal",
    "serialize_patches",
    "ss2d_directions",
]

KINDS = ("row_major", "column_major", "local_window")


@dataclass(frozen=True)
class Traversal:
    kind: str
    reverse: bool
    window: int | None
    grid: tuple[int, int]
    order: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)


def make_traversal(kind: str, H: int, W: int, reverse: bool = False, window: int | None = None) -> Traversal:
    if kind not in KINDS:
        raise ConfigError(f"unknown traversal kind {kind!r}")
    if H < 1 or W < 1:
        raise ConfigError(f"grid must be at least 1x1, got {H}x{W}")
    if kind == "row_major":
        order = np.arange(H * W)
    elif kind == "column_major":
        order = np.arange(H * W).reshape(H, W).T.reshape(-1)
    else:
        if window is None or window < 1:
            raise ConfigError("local_window traversal needs a positive window")
        if H % window or W % window:
            raise ConfigError(
                f"window {window} must divide both grid sides ({H}x{W})"
            )
        cells = np.arange(H * W).reshape(H, W)
        order = np.concatenate(
            [
                cells[r : r + window, c : c + window].reshape(-1)
                for r in range(0, H, window)
                for c in range(0, W, window)
            ]
        )
    if reverse:
        order = order[::-1].copy()
    inverse = np.argsort(order)
    return Traversal(
        kind=kind, reverse=reverse, window=window if kind == "local_window" else None,
        grid=(H, W), order=order, inverse=inverse,
    )


def ss2d_directions(H: int, W: int) -> list[Traversal]:
    """The four-path cross scan: row and column orders, each both ways."""
    return [
        make_traversal("row_major", H, W),
        make_traversal("row_major", H, W, reverse=True),
        make_traversal("column_major", H, W),
        make_traversal("column_major", H, W, reverse=True),
    ]


def local_directions(H: int, W: int, window: int = 2) -> list[Traversal]:
    """Local-window forward and reversed, plus global row and column scans."""
    return [
        make_traversal("local_window", H, W, window=window),
        make_traversal("local_window", H, W, reverse=True, window=window),
        make_traversal("row_major", H, W),
        make_traversal("column_major", H, W),
    ]


def _check_length(fmap, t: Traversal):
    n = t.grid[0] * t.grid[1]
    if fmap.shape[-2] != n:
        raise ShapeError(
            f"feature map has {fmap.shape[-2]} patches, traversal covers {n}"
        )


def serialize_patches(fmap: Tensor, t: Traversal) -> Tensor:
    """Reorder patches so output[i] = fmap[order[i]]; differentiable."""
    _check_length(fmap, t)
    return fmap.index_select(t.order, axis=-2)


def deserialize_patches(seq: Tensor, t: Traversal) -> Tensor:
    """Undo serialize_patches exactly (gather by the inverse permutation)."""
    _check_length(seq, t)
    return seq.index_select(t.inverse, axis=-2)


def cross_merge(seqs: list[Tensor], traversals: list[Traversal]) -> Tensor:
    """Sum the de-serialized sequences into one 2D feature map."""
    if len(seqs) != len(traversals):
        raise ConfigError(
            f"{len(seqs)} sequences but {len(traversals)} traversals"
        )
    if not seqs:
        raise ConfigError("cross_merge needs at least one sequence")
    grids = {t.grid for t in traversals}
    if len(grids) != 1:
        raise ConfigError(f"traversals span different grids: {sorted(grids)}")
    out = None
    for seq, t in zip(seqs, traversals):
        restored = deserialize_patches(seq, t)
        out = restored if out is None else out + restored
    return out
