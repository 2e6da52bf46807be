"""Fusion variants: the reduction chain, weight sharing, gradient flow."""

import numpy as np
import pytest

from resfuse.fusion import (
    VARIANTS,
    EncodingBlock,
    FusionWeightBlock,
    encode_level,
    fuse_direct,
    fuse_weighted,
    residual_plain,
)
from resfuse.params import ParamSet
from resfuse.tensor import ShapeError, Tensor, tsum

from oracles import fuse_direct_oracle, fuse_weighted_oracle


def _block(cin=2, cout=2, seed=0):
    ps = ParamSet()
    rng = np.random.default_rng(seed)
    return ps, EncodingBlock.build(ps, "enc.0", cin, cout, rng, dtype=np.float64)


def _rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape),
                  dtype=np.float64)


class TestEncodingBlock:
    def test_preserves_spatial_dims(self):
        _, block = _block(2, 5)
        out = block.forward(_rand((1, 2, 4, 4, 4)))
        assert out.shape == (1, 5, 4, 4, 4)

    def test_build_registers_eight_params(self):
        ps, _ = _block()
        assert len(ps) == 8
        assert "enc.0.conv1.weight" in ps and "enc.0.norm2.beta" in ps


class TestFuseOps:
    def test_direct_matches_oracle(self):
        e = _rand((1, 3, 2, 2, 2), 1)
        x = _rand((1, 3, 2, 2, 2), 2)
        assert np.allclose(fuse_direct(e, x).data,
                           fuse_direct_oracle(e.data, x.data))

    def test_weighted_matches_oracle(self):
        rng = np.random.default_rng(3)
        e = _rand((1, 3, 2, 2, 2), 1)
        x = _rand((1, 3, 2, 2, 2), 2)
        w = rng.standard_normal((3, 3, 1, 1, 1))
        b = rng.standard_normal(3)
        fw = FusionWeightBlock(Tensor(w, dtype=np.float64),
                               Tensor(b, dtype=np.float64))
        assert np.allclose(fuse_weighted(e, x, fw).data,
                           fuse_weighted_oracle(e.data, x.data, w, b))

    def test_shape_mismatch_errors(self):
        e = _rand((1, 3, 2, 2, 2))
        x = _rand((1, 2, 2, 2, 2))
        with pytest.raises(ShapeError):
            fuse_direct(e, x)
        fw = FusionWeightBlock(Tensor(np.eye(3).reshape(3, 3, 1, 1, 1)),
                               Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            fuse_weighted(e, x, fw)

    def test_weighted_rejects_channel_mismatch(self):
        e = _rand((1, 2, 2, 2, 2))
        fw = FusionWeightBlock(Tensor(np.eye(3).reshape(3, 3, 1, 1, 1)),
                               Tensor(np.zeros(3)))
        with pytest.raises(ShapeError, match="channels"):
            fuse_weighted(e, e, fw)


class TestReductionChain:
    """weighted ⊇ direct ⊇ main-only, by specializing the fusion weights."""

    def test_identity_weights_reduce_to_direct(self):
        c = 4
        e = _rand((1, c, 3, 3, 3), 1)
        x = _rand((1, c, 3, 3, 3), 2)
        fw = FusionWeightBlock(
            Tensor(np.eye(c, dtype=np.float64).reshape(c, c, 1, 1, 1)),
            Tensor(np.zeros(c, dtype=np.float64)))
        diff = np.abs(fuse_weighted(e, x, fw).data - fuse_direct(e, x).data)
        assert diff.max() <= 1e-6

    def test_zero_weights_reduce_to_main_branch(self):
        c = 4
        e = _rand((1, c, 3, 3, 3), 1)
        x = _rand((1, c, 3, 3, 3), 2)
        fw = FusionWeightBlock(
            Tensor(np.zeros((c, c, 1, 1, 1), dtype=np.float64)),
            Tensor(np.zeros(c, dtype=np.float64)))
        assert np.array_equal(fuse_weighted(e, x, fw).data, e.data)

    def test_default_build_is_identity_init(self):
        ps = ParamSet()
        fw = FusionWeightBlock.build(ps, "fuse.0", 3)
        assert np.array_equal(fw.W.data.reshape(3, 3), np.eye(3, dtype=np.float32))
        assert np.all(fw.b.data == 0.0)

    def test_zero_init_build(self):
        ps = ParamSet()
        fw = FusionWeightBlock.build(ps, "fuse.0", 3, zero_init=True)
        assert np.all(fw.W.data == 0.0)


class TestResidualPlain:
    def test_identity_skip_when_channels_match(self):
        _, block = _block(2, 2)
        x = _rand((1, 2, 4, 4, 4))
        out = residual_plain(x, block)
        e = block.forward(x)
        assert np.allclose(out.data, np.maximum(e.data + x.data, 0.0))

    def test_zero_pad_skip_when_channels_grow(self):
        _, block = _block(2, 5)
        x = _rand((1, 2, 4, 4, 4))
        out = residual_plain(x, block)
        e = block.forward(x).data
        e[:, :2] += x.data
        assert np.allclose(out.data, np.maximum(e, 0.0))

    def test_learned_projection_skip(self):
        _, block = _block(2, 5)
        x = _rand((1, 2, 4, 4, 4))
        rng = np.random.default_rng(4)
        pw = Tensor(rng.standard_normal((5, 2, 1, 1, 1)), dtype=np.float64)
        out = residual_plain(x, block, proj=(pw,))
        e = block.forward(x).data
        from oracles import conv1x1x1_oracle

        skip = conv1x1x1_oracle(x.data, pw.data)
        assert np.allclose(out.data, np.maximum(e + skip, 0.0))


class TestEncodeLevel:
    def test_branches_share_one_block(self):
        # the level holds exactly one EncodingBlock, so identical inputs
        # on both branches must produce identical descending features
        ps, block = _block(2, 2)
        x = _rand((1, 2, 4, 4, 4))
        main, aux, skip = encode_level(x, x, block, None, "direct")
        assert np.array_equal(aux.data, block.forward(x).data)
        assert skip is main

    def test_aux_descends_unfused_by_default(self):
        ps, block = _block(2, 2)
        m = _rand((1, 2, 4, 4, 4), 1)
        a = _rand((1, 2, 4, 4, 4), 2)
        main, aux, _ = encode_level(m, a, block, None, "direct")
        assert np.array_equal(aux.data, block.forward(a).data)
        assert not np.array_equal(aux.data, main.data)

    def test_aux_descends_fused_switch(self):
        ps, block = _block(2, 2)
        m = _rand((1, 2, 4, 4, 4), 1)
        a = _rand((1, 2, 4, 4, 4), 2)
        main, aux, _ = encode_level(m, a, block, None, "direct",
                                    aux_descends_fused=True)
        assert aux is main

    def test_weighted_requires_fusion_block(self):
        ps, block = _block(2, 2)
        x = _rand((1, 2, 4, 4, 4))
        with pytest.raises(ValueError, match="FusionWeightBlock"):
            encode_level(x, x, block, None, "weighted")

    def test_unknown_variant(self):
        ps, block = _block(2, 2)
        x = _rand((1, 2, 4, 4, 4))
        with pytest.raises(ValueError, match="variant"):
            encode_level(x, x, block, None, "gated")

    def test_variant_registry(self):
        assert VARIANTS == ("plain", "direct", "weighted")

    def test_gradient_reaches_fusion_weights(self):
        ps = ParamSet()
        rng = np.random.default_rng(5)
        block = EncodingBlock.build(ps, "enc.0", 2, 2, rng, dtype=np.float64)
        fw = FusionWeightBlock.build(ps, "fuse.0", 2, dtype=np.float64)
        m = _rand((1, 2, 4, 4, 4), 1)
        a = _rand((1, 2, 4, 4, 4), 2)
        main, _, _ = encode_level(m, a, block, fw, "weighted")
        tsum(main).backward()
        assert ps["fuse.0.weight"].value.grad is not None
        assert np.any(ps["fuse.0.weight"].value.grad != 0.0)
