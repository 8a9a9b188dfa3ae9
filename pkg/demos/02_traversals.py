"""How a 2-d patch grid becomes 1-d sequences, and how scans recombine.

A state-space layer consumes a sequence, so a feature map must be
flattened in some order. Different orders give the model different
notions of "previous token". This script prints the orders on a small
grid, then shows the four-direction scheme and windowed scheme merging
per-direction outputs back onto the grid.
"""

import numpy as np

from ssmcyto.tensor import Tensor
from ssmcyto.traversal import (
    cross_merge,
    deserialize_patches,
    local_directions,
    make_traversal,
    serialize_patches,
    ss2d_directions,
)

H, W = 4, 4


def show(t, title):
    grid = np.empty(H * W, dtype=int)
    grid[t.order] = np.arange(H * W)  # position of each patch in the sequence
    print(f"{title}:")
    for row in grid.reshape(H, W):
        print("   " + " ".join(f"{v:2d}" for v in row))


show(make_traversal("row_major", H, W), "row major (visit position per cell)")
show(make_traversal("column_major", H, W), "column major")
show(make_traversal("row_major", H, W, reverse=True), "row major, reversed")
show(make_traversal("local_window", H, W, window=2), "2x2 windows, row major inside")

print("\nserialize -> deserialize is exact:")
x = Tensor(np.random.default_rng(0).standard_normal((H * W, 3)))
t = make_traversal("column_major", H, W)
back = deserialize_patches(serialize_patches(x, t), t)
print(f"  round trip identical: {np.array_equal(back.data, x.data)}")

print("\nfour-direction cross merge:")
dirs = ss2d_directions(H, W)
print(f"  directions: {[(d.kind, d.reverse) for d in dirs]}")
seqs = [serialize_patches(x, d) for d in dirs]
merged = cross_merge(seqs, dirs)
print(f"  merging four copies of the same map = 4x the map: "
      f"{np.allclose(merged.data, 4 * x.data)}")

dirs = local_directions(H, W, window=2)
merged = cross_merge([serialize_patches(x, d) for d in dirs], dirs)
print(f"  windowed variant, {len(dirs)} directions: "
      f"{np.allclose(merged.data, len(dirs) * x.data)}")
