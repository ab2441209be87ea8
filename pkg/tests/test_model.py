import dataclasses

import numpy as np
import pytest

from disentangleformer import tensor as T
from disentangleformer.block import VARIANTS, BlockConfig
from disentangleformer.errors import ConfigError
from disentangleformer.model import (
    ClassifierHead,
    DisentangleFormer,
    ModelConfig,
    PatchEmbed,
    PatchMerging,
    StageConfig,
    build_model,
    build_variant,
    config_from_dict,
    config_to_dict,
    toy_model_config,
)
from disentangleformer.tensor import Tensor, grad_check, no_grad

from reference_model import model_forward_ref, patch_embed_ref

RNG = np.random.default_rng(4242)


def tiny_config(**kw):
    args = dict(
        in_channels=3, num_classes=4, embed_dim=8, depths=(1, 1), window=2, heads=2, seed=1
    )
    args.update(kw)
    return toy_model_config(**args)


class TestPatchEmbed:
    def test_pixelwise_projection(self):
        emb = PatchEmbed(3, 1, 8, np.random.default_rng(0))
        x = RNG.normal(size=(2, 3, 4, 4))
        out = emb(Tensor(x))
        assert out.shape == (2, 4, 4, 8)
        want = x[1, :, 2, 3] @ emb.proj.weight.data.T + emb.proj.bias.data
        np.testing.assert_allclose(out.data[1, 2, 3], want, atol=1e-13)

    def test_zero_input_gives_bias(self):
        emb = PatchEmbed(3, 2, 5, np.random.default_rng(0))
        emb.proj.bias.data[:] = np.arange(5.0)
        out = emb(Tensor(np.zeros((1, 3, 4, 4)))).data
        np.testing.assert_array_equal(out, np.broadcast_to(np.arange(5.0), (1, 2, 2, 5)))

    def test_matches_unfold_loop_oracle(self):
        emb = PatchEmbed(3, 2, 6, np.random.default_rng(1))
        x = RNG.normal(size=(3, 6, 6))
        got = emb(Tensor(x[None])).data[0]
        np.testing.assert_allclose(got, patch_embed_ref(emb, x), atol=1e-12)

    def test_divisibility(self):
        emb = PatchEmbed(3, 3, 6, np.random.default_rng(1))
        with pytest.raises(ConfigError):
            emb(Tensor(np.zeros((1, 3, 4, 4))))


class TestPatchMerging:
    def test_shape(self):
        merge = PatchMerging(4, np.random.default_rng(0))
        out = merge(Tensor(RNG.normal(size=(1, 2, 2, 4))))
        assert out.shape == (1, 1, 1, 8)

    def test_constant_input_constant_output(self):
        merge = PatchMerging(4, np.random.default_rng(0))
        out = merge(Tensor(np.full((1, 4, 4, 4), 1.7))).data
        np.testing.assert_allclose(out - out[0, 0, 0], 0.0, atol=1e-12)

    def test_grad_check(self):
        merge = PatchMerging(3, np.random.default_rng(2))
        weights = Tensor(RNG.normal(size=(1, 2, 2, 6)))
        f = lambda t: T.tsum(T.mul(merge(t), weights))
        assert grad_check(f, Tensor(RNG.normal(size=(1, 4, 4, 3)))) < 1e-4


class TestModelForward:
    def test_shape_arithmetic(self):
        cfg = toy_model_config(3, 5, embed_dim=8, depths=(1, 1), window=2, seed=0)
        model = build_model(cfg)
        x = Tensor(RNG.normal(size=(2, 3, 8, 8)))
        feats = model.forward_features(x)
        assert feats.shape == (2, 4, 4, 16)
        assert model(x).shape == (2, 5)

    def test_identity_blocks_give_merged_embedding(self):
        cfg = tiny_config()
        model = build_model(cfg)
        x = Tensor(RNG.normal(size=(1, 3, 4, 4)))
        feats = model.forward_features(x).data
        emb = model.embed(x)
        want = model.merges[0](emb).data
        np.testing.assert_allclose(feats, want, atol=1e-12)

    def test_dimension_ledger_enforced(self):
        stages = [
            StageConfig(1, BlockConfig(dim=8, window=2)),
            StageConfig(1, BlockConfig(dim=24, window=2)),
        ]
        with pytest.raises(ConfigError):
            ModelConfig(in_channels=3, num_classes=2, embed_dim=8, stages=stages)

    def test_determinism(self):
        cfg = tiny_config(seed=7)
        x = RNG.normal(size=(2, 3, 4, 4))
        with no_grad():
            a = build_model(cfg)(Tensor(x)).data
            b = build_model(cfg)(Tensor(x)).data
        np.testing.assert_array_equal(a, b)

    def test_grad_check_end_to_end(self):
        cfg = tiny_config(seed=3)
        model = build_model(cfg)
        # give residual projections weight so every parameter participates
        r = np.random.default_rng(11)
        for si, bi in model.flat_blocks():
            blk = model.stages[si][bi]
            blk.fuse_proj.weight.data[:] = r.normal(size=blk.fuse_proj.weight.shape) * 0.2
            blk.ffn.proj_out.weight.data[:] = r.normal(size=blk.ffn.proj_out.weight.shape) * 0.2
        weights = Tensor(r.normal(size=(1, 4)))
        f = lambda t: T.tsum(T.mul(model(t), weights))
        assert grad_check(f, Tensor(RNG.normal(size=(1, 3, 4, 4)))) < 1e-4


class TestGlobalAttentionOracle:
    def test_single_window_model_matches_reference(self):
        # One window per stage (window = map side): windowed attention must
        # equal the naive global-attention reference on the same parameters.
        stages = [
            StageConfig(1, BlockConfig(dim=8, window=4, heads=2)),
            StageConfig(1, BlockConfig(dim=16, window=2, heads=2)),
        ]
        cfg = ModelConfig(in_channels=3, num_classes=4, embed_dim=8, stages=stages, seed=5)
        model = build_model(cfg)
        r = np.random.default_rng(17)
        for si, bi in model.flat_blocks():
            blk = model.stages[si][bi]
            blk.fuse_proj.weight.data[:] = r.normal(size=blk.fuse_proj.weight.shape) * 0.3
            blk.ffn.proj_out.weight.data[:] = r.normal(size=blk.ffn.proj_out.weight.shape) * 0.3
        for trial in range(3):
            x = np.random.default_rng(trial).normal(size=(3, 4, 4))
            with no_grad():
                feats = model.forward_features(Tensor(x)).data
                logits = model(Tensor(x[None])).data[0]
            ref_feats, ref_logits = model_forward_ref(model, x)
            np.testing.assert_allclose(feats, ref_feats, atol=1e-10)
            np.testing.assert_allclose(logits, ref_logits, atol=1e-10)


class TestHead:
    def test_constant_features_zero_weights(self):
        head = ClassifierHead(6, 3, np.random.default_rng(0))
        head.fc.weight.data[:] = 0.0
        head.fc.bias.data[:] = [1.0, 2.0, 3.0]
        out = head(Tensor(np.full((2, 4, 4, 6), 9.0))).data
        np.testing.assert_array_equal(out, np.broadcast_to([1.0, 2.0, 3.0], (2, 3)))

    def test_single_class_degenerate(self):
        head = ClassifierHead(4, 1, np.random.default_rng(0))
        assert head(Tensor(RNG.normal(size=(2, 2, 2, 4)))).shape == (2, 1)

    def test_pool_equals_mean_oracle(self):
        head = ClassifierHead(4, 2, np.random.default_rng(1))
        x = RNG.normal(size=(1, 3, 5, 4))
        got = head(Tensor(x)).data[0]
        want = x[0].mean(axis=(0, 1)) @ head.fc.weight.data.T + head.fc.bias.data
        np.testing.assert_allclose(got, want, atol=1e-13)


class TestBuildVariant:
    def test_variant_swap_changes_only_variant(self):
        base = tiny_config()
        swapped = build_variant(base, "SerialCTST")
        assert all(s.block.variant == "SerialCTST" for s in swapped.stages)
        a, b = config_to_dict(base), config_to_dict(swapped)
        for sa, sb in zip(a["stages"], b["stages"]):
            sa["block"].pop("variant"), sb["block"].pop("variant")
        assert a == b

    def test_ffn_swap_changes_only_ffn_kind(self):
        base = tiny_config()
        swapped = build_variant(base, "standard_mlp")
        assert all(s.block.ffn_kind == "standard_mlp" for s in swapped.stages)
        assert all(s.block.variant == "Parallel" for s in swapped.stages)

    def test_unknown_tag(self):
        with pytest.raises(ConfigError):
            build_variant(tiny_config(), "Quantum")

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_all_variants_smoke_forward(self, variant):
        cfg = build_variant(tiny_config(), variant)
        model = build_model(cfg)
        with no_grad():
            out = model(Tensor(RNG.normal(size=(2, 3, 4, 4))))
        assert out.shape == (2, 4)
        assert np.isfinite(out.data).all()


class TestConfigRoundtrip:
    def test_dict_roundtrip(self):
        cfg = tiny_config(seed=9)
        again = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(again) == config_to_dict(cfg)
