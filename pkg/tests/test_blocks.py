"""Block variants: residual identity, causality, mirrors, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from ssmcyto.blocks import (
    BlockConfig,
    block_forward,
    channel_shuffle,
    dual_branch_attention,
    init_block,
    vim_branch,
)
from ssmcyto.errors import ConfigError, ShapeError
from ssmcyto.tensor import Tensor, grad_check

ALL = ["vanilla", "vim", "vmamba_ss2d", "mambavision", "medmamba", "localmamba"]
GRID_VARIANTS = ("vmamba_ss2d", "medmamba", "localmamba")


def make(variant, d_model=8, **kw):
    return BlockConfig(variant=variant, d_model=d_model, n_state=4, **kw)


def setup(variant, seed=0, d_model=8):
    cfg = make(variant, d_model=d_model)
    params = init_block(cfg, np.random.default_rng(seed))
    return cfg, params


class TestConfig:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            make("transformer")

    def test_conv_mode_inferred(self):
        assert make("vanilla").conv_mode == "causal"
        assert make("vim").conv_mode == "causal"
        assert make("mambavision").conv_mode == "standard"

    def test_conv_mode_conflicts_rejected(self):
        with pytest.raises(ConfigError, match="conv_mode"):
            make("mambavision", conv_mode="causal")
        with pytest.raises(ConfigError, match="conv_mode"):
            make("vanilla", conv_mode="standard")

    def test_medmamba_needs_even_width(self):
        with pytest.raises(ConfigError, match="even"):
            make("medmamba", d_model=7)

    def test_medmamba_groups_divide_half(self):
        with pytest.raises(ConfigError, match="groups"):
            make("medmamba", d_model=8, groups=3)


class TestChannelShuffle:
    def test_two_groups_of_four(self):
        x = Tensor(np.array([[0.0, 1.0, 2.0, 3.0]]))
        assert channel_shuffle(x, 2).data.tolist() == [[0.0, 2.0, 1.0, 3.0]]

    def test_one_group_is_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 6)))
        np.testing.assert_array_equal(channel_shuffle(x, 1).data, x.data)

    def test_one_hot_stays_one_hot(self):
        x = Tensor(np.eye(6))
        out = channel_shuffle(x, 3).data
        assert (out.sum(axis=1) == 1).all() and (out.max(axis=1) == 1).all()

    def test_non_divisor_rejected(self):
        with pytest.raises(ConfigError):
            channel_shuffle(Tensor(np.zeros((2, 5))), 2)

    @given(st.integers(1, 6), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_inverse_composition(self, g, m):
        # shuffle by g then by C/g walks the permutation back to identity
        c = g * m
        x = Tensor(np.random.default_rng(c).standard_normal((2, c)))
        back = channel_shuffle(channel_shuffle(x, g), m)
        np.testing.assert_array_equal(back.data, x.data)


class TestDualBranchAttention:
    def _weights(self, c, b_spatial, b_channel):
        zeros = Tensor(np.zeros((c, c)))
        return (
            zeros,
            Tensor(np.full(c, float(b_spatial))),
            zeros,
            Tensor(np.full(c, float(b_channel))),
        )

    def test_open_gates_identity(self):
        x = Tensor(np.random.default_rng(1).standard_normal((5, 4)))
        out = dual_branch_attention(x, *self._weights(4, 40, 40))
        np.testing.assert_array_equal(out.data, x.data)

    def test_closed_spatial_gate_zeroes_output(self):
        x = Tensor(np.random.default_rng(2).standard_normal((5, 4)))
        out = dual_branch_attention(x, *self._weights(4, -40, 40))
        assert np.abs(out.data).max() < 1e-15

    def test_matches_gate_composition_oracle(self):
        r = np.random.default_rng(3)
        x = r.standard_normal((6, 5))
        ws, bs = r.standard_normal((5, 5)), r.standard_normal(5)
        wc, bc = r.standard_normal((5, 5)), r.standard_normal(5)
        out = dual_branch_attention(
            Tensor(x), Tensor(ws), Tensor(bs), Tensor(wc), Tensor(bc)
        ).data
        spatial = expit(x.mean(axis=0) @ ws + bs)
        channel = expit(x @ wc + bc)
        np.testing.assert_allclose(out, x * spatial[None, :] * channel, atol=1e-12)


class TestResidualIdentity:
    @pytest.mark.parametrize("variant", ALL)
    def test_zeroed_params_make_identity(self, variant):
        cfg, params = setup(variant)
        zeroed = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
        x = Tensor(np.random.default_rng(4).standard_normal((16, 8)))
        out = block_forward(x, cfg, zeroed, grid=(4, 4))
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("variant", ALL)
    def test_shape_preserved_batched(self, variant):
        cfg, params = setup(variant)
        shape = (2, 16, 8) if variant in GRID_VARIANTS else (2, 12, 8)
        x = Tensor(np.random.default_rng(5).standard_normal(shape))
        out = block_forward(x, cfg, params, grid=(4, 4))
        assert out.shape == shape
        assert np.isfinite(out.data).all()

    def test_wrong_width_rejected(self):
        cfg, params = setup("vanilla")
        with pytest.raises(ShapeError):
            block_forward(Tensor(np.zeros((4, 5))), cfg, params)

    def test_grid_required_for_2d_variants(self):
        cfg, params = setup("vmamba_ss2d")
        with pytest.raises(ConfigError, match="grid"):
            block_forward(Tensor(np.zeros((16, 8))), cfg, params)

    def test_grid_must_cover_tokens(self):
        cfg, params = setup("vmamba_ss2d")
        with pytest.raises(ShapeError):
            block_forward(Tensor(np.zeros((16, 8))), cfg, params, grid=(3, 4))


class TestVimMirror:
    def _symmetric_params(self):
        cfg, params = setup("vim")
        for key in list(params):
            if "rev" in key:
                params[key] = params[key.replace("rev", "fwd")]
        return cfg, params

    def test_branches_are_mirror_images(self):
        cfg, params = self._symmetric_params()
        half = np.random.default_rng(6).standard_normal((3, cfg.d_inner))
        a = Tensor(np.concatenate([half, half[::-1]]))
        y_f = vim_branch(a, params, "fwd").data
        y_r = vim_branch(a.flip(-2), params, "rev").data[::-1]
        np.testing.assert_allclose(y_r, y_f[::-1], atol=1e-12)

    def test_palindromic_input_gives_palindromic_output(self):
        cfg, params = self._symmetric_params()
        half = np.random.default_rng(7).standard_normal((3, 8))
        x = Tensor(np.concatenate([half, half[::-1]]))
        out = block_forward(x, cfg, params).data
        np.testing.assert_allclose(out, out[::-1], atol=1e-12)


class TestCausality:
    def test_vanilla_is_strictly_causal(self):
        cfg, params = setup("vanilla")
        r = np.random.default_rng(8)
        x = r.standard_normal((10, 8))
        x2 = x.copy()
        x2[7] += r.standard_normal(8)
        a = block_forward(Tensor(x), cfg, params).data
        b = block_forward(Tensor(x2), cfg, params).data
        np.testing.assert_array_equal(a[:7], b[:7])
        assert not np.allclose(a[7:], b[7:])

    def test_mambavision_sees_the_future(self):
        cfg, params = setup("mambavision")
        r = np.random.default_rng(9)
        x = r.standard_normal((10, 8))
        x2 = x.copy()
        x2[7] += r.standard_normal(8)
        a = block_forward(Tensor(x), cfg, params).data
        b = block_forward(Tensor(x2), cfg, params).data
        assert not np.allclose(a[6], b[6])


class TestMedmambaStructure:
    def test_channel_count_preserved(self):
        cfg, params = setup("medmamba")
        x = Tensor(np.random.default_rng(10).standard_normal((16, 8)))
        assert block_forward(x, cfg, params, grid=(4, 4)).shape == (16, 8)

    def test_side_branch_feeds_odd_channels(self):
        # with the SSM half zeroed, shuffled output keeps side-conv results
        # on odd channel slots and pure residual on even ones
        cfg, params = setup("medmamba")
        zeroed = dict(params)
        zeroed["ssm.out.weight"] = Tensor(np.zeros((cfg.d_model, 4)))
        zeroed["ssm.out.bias"] = Tensor(np.zeros(4))
        x = Tensor(np.random.default_rng(11).standard_normal((16, 8)))
        out = block_forward(x, cfg, zeroed, grid=(4, 4)).data
        np.testing.assert_array_equal(out[:, 0::2], x.data[:, 0::2])
        assert not np.allclose(out[:, 1::2], x.data[:, 1::2])


PARAM_PROBES = {
    "vanilla": "s6.c_proj.weight",
    "vim": "conv_rev.weight",
    "vmamba_ss2d": "s6_2.b_proj.weight",
    "mambavision": "conv_gate.weight",
    "medmamba": "side_conv.weight",
    "localmamba": "att_spatial.weight",
}


class TestGradients:
    @pytest.mark.parametrize("variant", ALL)
    def test_input_gradient(self, variant):
        cfg, params = setup(variant, seed=12)
        probe = Tensor(np.random.default_rng(13).standard_normal((16, 8)))
        x0 = np.random.default_rng(14).standard_normal((16, 8))

        def f(x):
            return (block_forward(x, cfg, params, grid=(4, 4)) * probe).sum()

        report = grad_check(f, Tensor(x0), tol=1e-3)
        assert report.ok(1e-3), f"max rel err {report.max_rel_err:.2e}"

    @pytest.mark.parametrize("variant", ALL)
    def test_parameter_gradient(self, variant):
        cfg, params = setup(variant, seed=15)
        name = PARAM_PROBES[variant]
        probe = Tensor(np.random.default_rng(16).standard_normal((16, 8)))
        x = Tensor(np.random.default_rng(17).standard_normal((16, 8)))

        def f(p):
            trial = dict(params)
            trial[name] = p
            return (block_forward(x, cfg, trial, grid=(4, 4)) * probe).sum()

        report = grad_check(f, params[name], tol=1e-3)
        assert report.ok(1e-3), f"{name}: max rel err {report.max_rel_err:.2e}"
