import pytest
import torch
import torch.nn.functional as F

from cacdn.core_types import FeaturePyramid, Variant
from cacdn.fusion import FusionConfig, FusionStack, ResidualFusionBlock, fuse_pyramids, resample


def _pyramid(channels, p, scales, batch=1):
    return FeaturePyramid({d: torch.rand(batch, channels[d], p // d, p // d) for d in scales})


def test_block_is_projection_at_init():
    block = ResidualFusionBlock(16, [8, 4], 32).train()
    main = torch.randn(2, 16, 8, 8)
    out = block(main, [torch.randn(2, 8, 8, 8), torch.randn(2, 4, 8, 8)])
    assert torch.equal(out, F.relu(block.identity(main)))


def test_block_with_zero_context_weights_is_projection():
    block = ResidualFusionBlock(16, [8], 32, carry_channels=32)
    with torch.no_grad():
        for name, p in block.named_parameters():
            if name.startswith("context"):
                p.zero_()
    main = torch.randn(1, 16, 8, 8)
    out = block(main, [torch.randn(1, 8, 8, 8)], torch.randn(1, 32, 8, 8))
    assert torch.equal(out, F.relu(block.identity(main)))


def test_context_contributes_after_training_moves_scale():
    block = ResidualFusionBlock(4, [4], 8)
    with torch.no_grad():
        block.context_bn2.weight.fill_(1.0)
    main = torch.randn(1, 4, 8, 8)
    a = block(main, [torch.randn(1, 4, 8, 8)])
    b = block(main, [torch.randn(1, 4, 8, 8)])
    assert not torch.equal(a, b)


def test_block_shape_large_coarsest():
    block = ResidualFusionBlock(1024, [1024, 1024, 64], 512).eval()
    with torch.no_grad():
        out = block(torch.rand(1, 1024, 32, 32), [torch.rand(1, 1024, 32, 32)] * 2 + [torch.rand(1, 64, 32, 32)])
    assert out.shape == (1, 512, 32, 32)


def test_block_rejects_spatial_mismatch():
    block = ResidualFusionBlock(4, [4], 8)
    with pytest.raises(ValueError):
        block(torch.rand(1, 4, 8, 8), [torch.rand(1, 4, 4, 4)])
    with pytest.raises(ValueError):
        block(torch.rand(1, 4, 8, 8), [torch.rand(1, 4, 8, 8)], torch.rand(1, 8, 8, 8))


def test_permuting_context_channels_with_weights_is_equivariant():
    torch.manual_seed(1)
    block = ResidualFusionBlock(4, [6], 8).eval()
    with torch.no_grad():
        block.context_bn2.weight.normal_()
        main, ctx = torch.rand(1, 4, 8, 8), torch.rand(1, 6, 8, 8)
        ref = block(main, [ctx])
        perm = torch.randperm(6)
        block.context_in.weight.copy_(block.context_in.weight[:, perm])
        out = block(main, [ctx[:, perm]])
    torch.testing.assert_close(out, ref, rtol=1e-5, atol=1e-6)


def test_resample():
    x = torch.arange(4.0).view(1, 1, 2, 2)
    assert torch.equal(resample(x, 4)[0, 0, :2, :2], torch.zeros(2, 2))
    assert resample(x, 1).item() == 1.5
    assert resample(x, 2) is x


@pytest.mark.parametrize("variant,p,taps,expect", [
    (Variant.LARGE, 64, {8: 32, 4: 16, 2: 8}, (128, 32)),
    (Variant.SMALL, 64, {4: 16, 2: 8}, (128, 32)),
])
def test_stack_output_and_ablation(variant, p, taps, expect):
    cfg = FusionConfig(variant)
    for with_s2 in (True, False):
        contexts = [taps, taps] if with_s2 else [taps]
        stack = FusionStack(cfg, taps, contexts, 64).eval()
        s2 = _pyramid(taps, p, cfg.scales) if with_s2 else None
        with torch.no_grad():
            out = fuse_pyramids(stack, _pyramid(taps, p, cfg.scales), _pyramid(taps, p, cfg.scales), s2,
                                torch.rand(1, 64, p // 4, p // 4), p)
        assert out.shape == (1, expect[0], expect[1], expect[1])
        assert torch.isfinite(out).all()


def test_stack_identity_at_init():
    cfg = FusionConfig(Variant.SMALL)
    taps = {4: 8, 2: 4}
    stack = FusionStack(cfg, taps, [taps], 16)
    main = _pyramid(taps, 32, cfg.scales)
    out = stack(main, [_pyramid(taps, 32, cfg.scales)], torch.rand(1, 16, 8, 8), 32)
    assert torch.equal(out, F.relu(stack.blocks["2"].identity(main[2])))


def test_stack_missing_level():
    cfg = FusionConfig(Variant.LARGE)
    taps = {8: 8, 4: 8, 2: 8}
    stack = FusionStack(cfg, taps, [taps], 16)
    partial = FeaturePyramid({4: torch.rand(1, 8, 16, 16), 2: torch.rand(1, 8, 32, 32)})
    with pytest.raises(KeyError):
        stack(_pyramid(taps, 64, cfg.scales), [partial], torch.rand(1, 16, 16, 16), 64)


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(Variant.SMALL, scales=(2, 4))
    with pytest.raises(ValueError):
        FusionConfig(Variant.SMALL, scales=(8, 4), channels_per_scale={4: 8})
