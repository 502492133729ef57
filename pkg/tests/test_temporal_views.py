import numpy as np
import pytest
import torch

from mdmf.temporal_views import (
    GlobalContextExtractor,
    IdentityContext,
    LocalContextExtractor,
    ShapeError,
    ViewKind,
    build_context_extractor,
)


def randomize(module, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
    return module


class TestLocal:
    def test_shape_preserved(self):
        ltce = LocalContextExtractor(16)
        out = ltce(torch.randn(3, 8, 16))
        assert out.shape == (3, 8, 16)

    def test_too_few_frames_rejected(self):
        with pytest.raises(ShapeError):
            LocalContextExtractor(8)(torch.randn(1, 2, 8))

    def test_identity_kernels_reduce_to_relu(self):
        # centre-tap identity convolutions and inference-mode normalization
        # with default running statistics turn the block into ReLU(ReLU(x)).
        dim = 8
        ltce = LocalContextExtractor(dim)
        with torch.no_grad():
            for conv in (ltce.conv1, ltce.conv2):
                conv.weight.zero_()
                for d in range(dim):
                    conv.weight[d, d, 1] = 1.0
                conv.bias.zero_()
        ltce.eval()
        x = torch.randn(2, 8, dim)
        torch.testing.assert_close(ltce(x), torch.relu(x), rtol=1e-4, atol=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_locality_receptive_field(self, seed):
        # eval mode: running statistics fixed, so normalization is per-channel
        # affine and the two stacked kernel-3 convolutions reach exactly +-2.
        torch.manual_seed(seed)
        ltce = LocalContextExtractor(8).eval()
        with torch.no_grad():
            x = torch.randn(1, 8, 8)
            base = ltce(x)
            for t in range(8):
                bumped = x.clone()
                bumped[0, t] += torch.randn(8)
                delta = (ltce(bumped) - base).abs().amax(dim=-1)[0]
                for s in range(8):
                    if abs(t - s) > 2:
                        assert float(delta[s]) == 0.0
            assert float((ltce(x + 0) - base).abs().max()) == 0.0  # no drift

    def test_locality_via_gradients(self):
        ltce = LocalContextExtractor(8).eval()
        x = torch.randn(1, 8, 8, requires_grad=True)
        out = ltce(x)
        grad = torch.autograd.grad(out[0, 4].sum(), x)[0][0]
        row_energy = grad.abs().sum(dim=-1)
        for s in range(8):
            if abs(4 - s) > 2:
                assert float(row_energy[s]) == 0.0
        assert float(row_energy[4]) > 0


class TestGlobal:
    def test_zero_weights_residual_identity(self):
        gtce = GlobalContextExtractor(8)
        with torch.no_grad():
            for p in gtce.parameters():
                p.zero_()
        x = torch.randn(2, 8, 8)
        assert torch.equal(gtce(x), x)

    def test_shape_preserved(self):
        out = GlobalContextExtractor(16)(torch.randn(3, 8, 16))
        assert out.shape == (3, 8, 16)

    def test_receptive_field_formula(self):
        assert GlobalContextExtractor(8).receptive_field == 8
        assert GlobalContextExtractor(8, dilations=(1, 2)).receptive_field == 4

    @pytest.mark.parametrize("seed", range(10))
    def test_full_sequence_reach(self, seed):
        gtce = randomize(GlobalContextExtractor(16), seed)
        x = torch.randn(1, 8, 16, requires_grad=True)
        h = x.transpose(-1, -2)
        for i, conv in enumerate(gtce.convs):
            pad = (gtce.kernel - 1) * gtce.dilations[i]
            h = conv(torch.nn.functional.pad(h, (pad, 0)))
            if i + 1 < len(gtce.convs):
                h = torch.relu(h)
        broadcast = h[..., -1]
        grad = torch.autograd.grad(broadcast.sum(), x)[0][0]
        per_frame = grad.abs().amax(dim=-1)
        assert (per_frame > 1e-8).all()

    def test_short_schedule_warns(self):
        gtce = GlobalContextExtractor(8, dilations=(1, 1))
        with pytest.warns(UserWarning, match="dilation schedule"):
            gtce(torch.randn(1, 8, 8))

    def test_broadcast_structure(self):
        # output minus input is the same vector at every time step
        gtce = randomize(GlobalContextExtractor(8), 0)
        x = torch.randn(2, 8, 8)
        delta = gtce(x) - x
        assert torch.allclose(delta, delta[:, :1, :].expand_as(delta), atol=1e-6)


class TestIdentityAndFactory:
    def test_identity_passthrough(self):
        x = torch.randn(2, 8, 4)
        assert torch.equal(IdentityContext()(x), x)

    def test_factory_dispatch(self):
        assert isinstance(build_context_extractor(ViewKind.LOCAL, 8), LocalContextExtractor)
        assert isinstance(build_context_extractor(ViewKind.GLOBAL, 8), GlobalContextExtractor)
        assert isinstance(build_context_extractor(ViewKind.NONE, 8), IdentityContext)

    def test_view_tags(self):
        assert ViewKind("local") is ViewKind.LOCAL
        assert {ViewKind.LOCAL, ViewKind.GLOBAL, ViewKind.NONE} == set(ViewKind)
