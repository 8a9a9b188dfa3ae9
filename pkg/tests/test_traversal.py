"""Traversal permutations, round trips, and the cross-merge contract."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmcyto.errors import ConfigError, ShapeError
from ssmcyto.tensor import Tensor
from ssmcyto.traversal import (
    cross_merge,
    deserialize_patches,
    local_directions,
    make_traversal,
    serialize_patches,
    ss2d_directions,
)


class TestMakeTraversal:
    def test_row_major_2x2(self):
        t = make_traversal("row_major", 2, 2)
        assert t.order.tolist() == [0, 1, 2, 3]

    def test_column_major_2x2(self):
        t = make_traversal("column_major", 2, 2)
        assert t.order.tolist() == [0, 2, 1, 3]

    def test_local_window_4x4(self):
        # hand enumeration: 2x2 windows row-major, cells row-major inside
        t = make_traversal("local_window", 4, 4, window=2)
        assert t.order.tolist() == [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]

    def test_reverse_flips_order(self):
        fwd = make_traversal("row_major", 3, 2)
        rev = make_traversal("row_major", 3, 2, reverse=True)
        assert rev.order.tolist() == fwd.order.tolist()[::-1]

    def test_window_must_divide(self):
        with pytest.raises(ConfigError, match="window"):
            make_traversal("local_window", 4, 6, window=4)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_traversal("zigzag", 2, 2)

    @given(
        st.sampled_from(["row_major", "column_major", "local_window"]),
        st.integers(1, 8),
        st.integers(1, 8),
        st.booleans(),
    )
    @settings(max_examples=80, deadline=None)
    def test_order_is_permutation_with_exact_inverse(self, kind, H, W, reverse):
        if kind == "local_window":
            window = 1 if (H % 2 or W % 2) else 2
        else:
            window = None
        t = make_traversal(kind, H, W, reverse=reverse, window=window)
        assert sorted(t.order.tolist()) == list(range(H * W))
        assert np.array_equal(t.order[t.inverse], np.arange(H * W))
        assert np.array_equal(t.inverse[t.order], np.arange(H * W))


class TestSerialize:
    def test_identity_traversal(self):
        fmap = Tensor(np.random.default_rng(0).standard_normal((6, 3)))
        t = make_traversal("row_major", 2, 3)
        np.testing.assert_array_equal(serialize_patches(fmap, t).data, fmap.data)

    def test_round_trip_all_kinds(self):
        r = np.random.default_rng(1)
        for H, W in [(1, 1), (2, 2), (4, 4), (8, 8), (2, 8)]:
            fmap = Tensor(r.standard_normal((H * W, 5)))
            for kind in ("row_major", "column_major", "local_window"):
                window = 2 if kind == "local_window" and H % 2 == 0 and W % 2 == 0 else (
                    1 if kind == "local_window" else None
                )
                for reverse in (False, True):
                    t = make_traversal(kind, H, W, reverse=reverse, window=window)
                    back = deserialize_patches(serialize_patches(fmap, t), t)
                    np.testing.assert_array_equal(back.data, fmap.data)

    def test_reverse_row_major_reverses(self):
        fmap = Tensor(np.arange(8.0).reshape(4, 2))
        t = make_traversal("row_major", 2, 2, reverse=True)
        np.testing.assert_array_equal(
            serialize_patches(fmap, t).data, fmap.data[::-1]
        )

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            serialize_patches(Tensor(np.zeros((5, 2))), make_traversal("row_major", 2, 2))

    def test_batched_serialization(self):
        r = np.random.default_rng(2)
        fmap = r.standard_normal((3, 4, 2))
        t = make_traversal("column_major", 2, 2)
        out = serialize_patches(Tensor(fmap), t).data
        for b in range(3):
            np.testing.assert_array_equal(out[b], fmap[b][t.order])


class TestCrossMerge:
    def test_single_identity(self):
        fmap = Tensor(np.random.default_rng(3).standard_normal((4, 2)))
        t = make_traversal("row_major", 2, 2)
        np.testing.assert_array_equal(cross_merge([fmap], [t]).data, fmap.data)

    def test_four_identity_paths_quadruple(self):
        # serializing the same map four ways and merging (identity S6) gives 4x
        fmap = np.random.default_rng(4).standard_normal((16, 3))
        ts = ss2d_directions(4, 4)
        seqs = [serialize_patches(Tensor(fmap), t) for t in ts]
        merged = cross_merge(seqs, ts)
        np.testing.assert_allclose(merged.data, 4.0 * fmap, atol=1e-12)

    def test_matches_scatter_add_oracle(self):
        r = np.random.default_rng(5)
        H, W, C = 4, 4, 3
        ts = ss2d_directions(H, W) + local_directions(H, W, window=2)
        seqs = [r.standard_normal((H * W, C)) for _ in ts]
        merged = cross_merge([Tensor(s) for s in seqs], ts)
        # oracle: scatter each sequence entry back to its source patch, index by index
        expect = np.zeros((H * W, C))
        for seq, t in zip(seqs, ts):
            for i in range(H * W):
                expect[t.order[i]] += seq[i]
        np.testing.assert_allclose(merged.data, expect, atol=1e-12)

    def test_permutation_equivariant(self):
        r = np.random.default_rng(6)
        ts = ss2d_directions(2, 4)
        seqs = [r.standard_normal((8, 2)) for _ in ts]
        base = cross_merge([Tensor(s) for s in seqs], ts).data
        for perm in itertools.permutations(range(4)):
            shuffled = cross_merge(
                [Tensor(seqs[i]) for i in perm], [ts[i] for i in perm]
            ).data
            np.testing.assert_allclose(shuffled, base, atol=1e-12)

    def test_mismatched_grids_rejected(self):
        with pytest.raises(ConfigError, match="grid"):
            cross_merge(
                [Tensor(np.zeros((4, 1))), Tensor(np.zeros((4, 1)))],
                [make_traversal("row_major", 2, 2), make_traversal("row_major", 4, 1)],
            )


def test_ss2d_directions_pairwise_distinct():
    for H, W in [(2, 2), (4, 4), (2, 3), (8, 8)]:
        orders = [tuple(t.order.tolist()) for t in ss2d_directions(H, W)]
        assert len(set(orders)) == 4


def test_local_directions_shape_and_kinds():
    ts = local_directions(4, 4, window=2)
    assert [t.kind for t in ts] == [
        "local_window", "local_window", "row_major", "column_major",
    ]
    assert [t.reverse for t in ts] == [False, True, False, False]
