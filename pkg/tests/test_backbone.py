import pytest
import torch

from cilforge.backbone import BackboneConfig, FeatureExtractor, blockify, deblockify
from cilforge.exceptions import ConfigurationError, InputError, StateError


class TestBackboneConfig:
    def test_invalid_patch_divisibility(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(patch_size=3, image_size=32)

    def test_invalid_grid_halving(self):
        # grid 6 cannot be halved twice down to one block
        with pytest.raises(ConfigurationError):
            BackboneConfig(patch_size=2, image_size=12, num_hierarchies=3, embed_dims=(8,), heads=(2,))

    def test_per_level_broadcast(self):
        cfg = BackboneConfig(patch_size=1, image_size=32, embed_dims=(96, 192, 384),
                             heads=(2,), blocks_per_level=(1,))
        assert cfg.embed_dims == (96, 192, 384)
        assert cfg.heads == (2, 2, 2)
        assert cfg.feature_dim == 384

    def test_wrong_length_rejected(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(embed_dims=(96, 192), num_hierarchies=3)

    def test_shape_chain_block_counts(self):
        # block count at level l is 4^(T_d-1-l); final level holds one block
        cfg = BackboneConfig(patch_size=1, image_size=32, num_hierarchies=3)
        assert [cfg.num_blocks(l) for l in range(3)] == [16, 4, 1]
        assert cfg.final_grid == 8


class TestBlockify:
    def test_cifar_scale_shapes(self):
        # G=32, b=4, d=192 -> 16 blocks x 64 tokens x 192
        grid = torch.randn(2, 32, 32, 192)
        blocks = blockify(grid, 4)
        assert blocks.shape == (2, 16, 64, 192)

    def test_single_block_identity_grouping(self):
        grid = torch.randn(1, 2, 2, 8)
        blocks = blockify(grid, 1)
        assert blocks.shape == (1, 1, 4, 8)

    def test_roundtrip_is_identity(self):
        grid = torch.randn(3, 8, 8, 5)
        for b in (1, 2, 4, 8):
            assert torch.equal(deblockify(blockify(grid, b), b), grid)

    def test_token_multiset_preserved(self):
        grid = torch.randn(1, 4, 4, 3)
        blocks = blockify(grid, 2)
        orig = {tuple(v.tolist()) for v in grid.reshape(-1, 3)}
        after = {tuple(v.tolist()) for v in blocks.reshape(-1, 3)}
        assert orig == after

    def test_tile_contiguity(self):
        # mark each pixel with its (row, col); block 0 must be the top-left tile
        yy, xx = torch.meshgrid(torch.arange(4), torch.arange(4), indexing="ij")
        grid = torch.stack([yy, xx], dim=-1).float().unsqueeze(0)
        blocks = blockify(grid, 2)
        top_left = {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert {tuple(map(int, t)) for t in blocks[0, 0]} == top_left

    def test_non_divisible_errors_name_values(self):
        with pytest.raises(ConfigurationError, match="8.*3|3.*8"):
            blockify(torch.randn(1, 8, 8, 2), 3)


class TestAggregate:
    def test_block_count_divides_by_four(self, tiny_model):
        blocks = torch.randn(2, 16, 4, 16)
        cfg = BackboneConfig(patch_size=1, image_size=16, num_hierarchies=3,
                             embed_dims=(16,), heads=(2,), blocks_per_level=(1,))
        model = FeatureExtractor(cfg)
        out = model.aggregate(blocks, 0)
        assert out.shape[1] == 4      # 16 blocks -> 4
        assert out.shape[2] == 4      # tokens per block preserved
        out2 = model.aggregate(out, 1)
        assert out2.shape[1] == 1     # 4 blocks -> 1

    def test_channel_mapping_between_levels(self):
        cfg = BackboneConfig(patch_size=1, image_size=16, num_hierarchies=3,
                             embed_dims=(96, 192, 384), heads=(2,), blocks_per_level=(1,))
        model = FeatureExtractor(cfg)
        blocks = torch.randn(1, 16, 16, 96)
        assert model.aggregate(blocks, 0).shape[-1] == 192

    def test_top_level_raises_state_error(self, tiny_model):
        top = torch.randn(1, 1, 4, 16)
        with pytest.raises(StateError):
            tiny_model.aggregate(top, 2)


class TestExtractFeatures:
    def test_cifar_config_shapes(self):
        cfg = BackboneConfig(patch_size=1, num_hierarchies=3, embed_dims=(192,),
                             heads=(6,), blocks_per_level=(1,), image_size=32, channels=3)
        model = FeatureExtractor(cfg)
        pooled, maps = model.extract_features(torch.randn(2, 3, 32, 32))
        assert maps.shape == (2, 192, 8, 8)
        assert pooled.shape == (2, 192)

    def test_svhn_config_final_grid(self):
        cfg = BackboneConfig(patch_size=2, num_hierarchies=3, embed_dims=(32,),
                             heads=(2,), blocks_per_level=(1,), image_size=32, channels=3)
        model = FeatureExtractor(cfg)
        _, maps = model.extract_features(torch.randn(1, 3, 32, 32))
        assert maps.shape[-2:] == (4, 4)

    def test_pooled_is_spatial_mean(self, tiny_model):
        pooled, maps = tiny_model.extract_features(torch.randn(3, 1, 16, 16))
        ref = maps.mean(dim=(2, 3))
        rel = (pooled - ref).norm() / ref.norm()
        assert rel < 1e-5

    def test_wrong_image_size_is_input_error(self, tiny_model):
        with pytest.raises(InputError):
            tiny_model.extract_features(torch.randn(1, 1, 20, 20))
        with pytest.raises(InputError):
            tiny_model.extract_features(torch.randn(1, 3, 16, 16))

    def test_eval_mode_determinism(self, tiny_model):
        tiny_model.eval()
        x = torch.randn(2, 1, 16, 16)
        with torch.no_grad():
            a, ma = tiny_model.extract_features(x)
            b, mb = tiny_model.extract_features(x)
        assert torch.equal(a, b) and torch.equal(ma, mb)
