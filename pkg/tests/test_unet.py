import numpy as np
import pytest
import torch

from conftest import toy_config
from voldiff.errors import ParameterError, ShapeError
from voldiff.unet import UNetConfig, analytic_param_count, build_unet, timestep_embedding


class TestConfig:
    def test_patch_divisibility(self):
        # three levels downsample twice, so the edge must be a multiple of 4
        with pytest.raises(ParameterError):
            UNetConfig(levels=3, channel_mult=[1, 2, 4], patch_edge=10).validate()
        UNetConfig(levels=3, channel_mult=[1, 2, 4], patch_edge=12).validate()

    def test_mult_length(self):
        with pytest.raises(ParameterError):
            UNetConfig(levels=3, channel_mult=[1, 2], patch_edge=16).validate()

    def test_odd_time_embed(self):
        with pytest.raises(ParameterError):
            toy_config(time_embed_dim=15).validate()


class TestBuild:
    def test_deterministic_initialization(self):
        cfg = toy_config()
        a = build_unet(cfg, seed=7)
        b = build_unet(cfg, seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        cfg = toy_config()
        a = build_unet(cfg, seed=7)
        b = build_unet(cfg, seed=8)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_zero_initialized_output_layer(self, toy_net):
        x = torch.randn(2, 1, 8, 8, 8, generator=torch.Generator().manual_seed(0))
        assert torch.all(toy_net(x, 3) == 0)

    # independent hand counts (conv k^3: cin*cout*27 + cout, norm: 2c,
    # linear: cin*cout + cout), summed module by module on paper
    HAND_COUNTS = {
        (2, 4, (1, 2), 1, 16, 1): 12_181,
        (3, 8, (1, 2, 4), 2, 32, 2): 289_265,
    }

    @pytest.mark.parametrize("key", sorted(HAND_COUNTS))
    def test_parameter_count_matches_hand_count(self, key):
        levels, base, mult, blocks, temb, in_ch = key
        cfg = UNetConfig(
            levels=levels,
            base_channels=base,
            channel_mult=list(mult),
            blocks_per_level=blocks,
            time_embed_dim=temb,
            in_channels=in_ch,
            patch_edge=2 ** (levels - 1) * 4,
        )
        net = build_unet(cfg, seed=0)
        built = sum(p.numel() for p in net.parameters())
        assert built == self.HAND_COUNTS[key]
        assert analytic_param_count(cfg) == self.HAND_COUNTS[key]


class TestForward:
    @pytest.mark.parametrize("edge", [8, 16])
    def test_shape_preservation(self, toy_net, edge):
        x = torch.randn(1, 1, edge, edge, edge, generator=torch.Generator().manual_seed(1))
        out = toy_net(x, 2)
        assert out.shape == x.shape

    def test_indivisible_shape_rejected(self, toy_net):
        with pytest.raises(ShapeError):
            toy_net(torch.zeros(1, 1, 7, 8, 8), 1)

    def test_wrong_channels_rejected(self, toy_net):
        with pytest.raises(ShapeError):
            toy_net(torch.zeros(1, 2, 8, 8, 8), 1)

    def test_deterministic_forward(self, toy_net):
        x = torch.randn(1, 1, 8, 8, 8, generator=torch.Generator().manual_seed(2))
        assert torch.equal(toy_net(x, 5), toy_net(x, 5))

    def test_finite_outputs_in_working_range(self):
        net = build_unet(toy_config(), seed=3)
        # perturb the zero output layer so the head contributes
        with torch.no_grad():
            for p in net.output_layer.parameters():
                p.add_(0.05)
        for fill in (-3.0, 0.0, 3.0):
            x = torch.full((1, 1, 8, 8, 8), fill)
            assert torch.isfinite(net(x, 500)).all()

    def test_encoder_weight_perturbation_changes_output(self):
        net = build_unet(toy_config(), seed=0)
        with torch.no_grad():
            for p in net.output_layer.parameters():
                p.add_(0.05)
        x = torch.randn(1, 1, 8, 8, 8, generator=torch.Generator().manual_seed(4))
        before = net(x, 3).clone()
        with torch.no_grad():
            first_conv = net.encoder.blocks[0][0].conv1
            first_conv.weight[0, 0, 0, 0, 0] += 0.5
        after = net(x, 3)
        assert not torch.equal(before, after)

    def test_features_exposed(self, toy_net):
        x = torch.randn(1, 1, 8, 8, 8, generator=torch.Generator().manual_seed(5))
        eps, bottom, skips = toy_net.forward_with_features(x, 2)
        assert eps.shape == x.shape
        assert bottom.shape == (1, 8, 4, 4, 4)  # base 4, mult 2, one downsample
        assert len(skips) == 1 and skips[0].shape == (1, 4, 8, 8, 8)


class TestTimeEmbedding:
    def test_zero_timestep_alternates(self):
        emb = timestep_embedding(0, 8)[0]
        assert emb.tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_output_length(self):
        assert timestep_embedding(123, 64).shape == (1, 64)

    def test_pairwise_distinct_over_schedule(self):
        emb = timestep_embedding(torch.arange(1000), 128).numpy()
        unique_rows = np.unique(emb, axis=0)
        assert unique_rows.shape[0] == 1000

    def test_odd_dim_rejected(self):
        with pytest.raises(ParameterError):
            timestep_embedding(1, 9)
