import math

import numpy as np
import pytest
import torch

from volrig.field import (BoundingBox, FactorGroup, FactorizedField, FieldError,
                          FieldGradients, GridDims, dims_for_voxels,
                          gain_for_step, softplus_gained)


def fill(group, value=1.0):
    with torch.no_grad():
        for name in FactorGroup.TENSOR_NAMES:
            getattr(group, name).fill_(value)


class TestGridDims:
    def test_voxels(self):
        assert GridDims(2, 3, 4).voxels == 24

    @pytest.mark.parametrize("bad", [(1, 2, 2), (2, 0, 2), (2, 2, -1)])
    def test_too_small(self, bad):
        with pytest.raises(FieldError):
            GridDims(*bad)

    def test_voxel_cap(self):
        with pytest.raises(FieldError):
            GridDims(2048, 2048, 2048)


class TestBoundingBox:
    def test_contains(self):
        box = BoundingBox(torch.zeros(3), torch.ones(3))
        pts = torch.tensor([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0],
                            [1.0, 1.0, 1.0], [1.1, 0.5, 0.5]])
        assert box.contains(pts).tolist() == [True, True, True, False]

    def test_degenerate_rejected(self):
        with pytest.raises(FieldError):
            BoundingBox(torch.zeros(3), torch.tensor([1.0, 0.0, 1.0]))


class TestSampleRaw:
    def test_hand_enumerated_corner_sum(self, tiny_field):
        """All-ones 2x2x2 rank-1 factors: raw = 1*1 + 1*1 + 1*1 = 3."""
        fill(tiny_field.density)
        pts = torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5]],
                           dtype=torch.float64)
        raw = tiny_field.sample_raw_sum(tiny_field.density, pts)
        assert torch.allclose(raw, torch.full((3,), 3.0, dtype=torch.float64))

    def test_hand_enumerated_bilinear(self, tiny_field):
        """Distinct entries, hand-interpolated at the box center.

        plane_yx = [[1,2],[3,4]], line_z = [5,6]; others zero.
        center: plane bilinear = 2.5, line = 5.5 -> 13.75.
        """
        with torch.no_grad():
            tiny_field.density.plane_yx[0] = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
            tiny_field.density.line_z[0] = torch.tensor([5.0, 6.0])
        pts = torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64)
        raw = tiny_field.sample_raw_sum(tiny_field.density, pts)
        assert raw.item() == pytest.approx(13.75, abs=1e-12)

    def test_grid_node_exact(self, tiny_field):
        """Sampling exactly at a grid node returns the node product."""
        with torch.no_grad():
            tiny_field.density.plane_yx[0] = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
            tiny_field.density.line_z[0] = torch.tensor([5.0, 6.0])
        # (x=1, y=0, z=1) -> plane_yx[y=0, x=1] * line_z[z=1] = 2 * 6
        pts = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
        assert tiny_field.sample_raw_sum(tiny_field.density, pts).item() == \
            pytest.approx(12.0, abs=1e-12)

    def test_outside_bbox_zero(self, tiny_field):
        fill(tiny_field.density)
        pts = torch.tensor([[2.0, 0.5, 0.5], [-0.1, 0.5, 0.5]], dtype=torch.float64)
        assert tiny_field.sample_density(pts).abs().max().item() == 0.0

    def test_world_to_grid_corners(self, tiny_field):
        pts = torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], dtype=torch.float64)
        g = tiny_field.world_to_grid(pts)
        assert torch.allclose(g, torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
                                              dtype=torch.float64))


class TestActivations:
    def test_softplus_known_value(self):
        # log(1 + exp(0)) = log 2
        assert softplus_gained(torch.tensor(0.0), 3.0).item() == \
            pytest.approx(math.log(2.0), abs=1e-7)

    def test_softplus_gain_scales_argument(self):
        raw = torch.tensor(0.25, dtype=torch.float64)
        assert softplus_gained(raw, 4.0).item() == \
            pytest.approx(math.log(1 + math.e), abs=1e-12)

    def test_softplus_stable_tails(self):
        big = torch.tensor([1e4, -1e4], dtype=torch.float64)
        out = softplus_gained(big, 10.0)
        assert torch.isfinite(out).all()
        assert out[0].item() == pytest.approx(1e5, rel=1e-12)
        assert out[1].item() == 0.0

    def test_density_nonnegative(self, tiny_field):
        with torch.no_grad():
            tiny_field.density.plane_yx.normal_(generator=torch.Generator().manual_seed(1))
            tiny_field.density.line_z.normal_(generator=torch.Generator().manual_seed(2))
        pts = torch.rand(200, 3, dtype=torch.float64)
        assert (tiny_field.sample_density(pts) >= 0).all()

    def test_color_in_unit_interval(self, tiny_field):
        with torch.no_grad():
            for g in tiny_field.color:
                g.plane_yx.normal_(generator=torch.Generator().manual_seed(3))
                g.line_z.normal_(generator=torch.Generator().manual_seed(4))
        pts = torch.rand(200, 3, dtype=torch.float64)
        c = tiny_field.sample_color(pts)
        assert (c >= 0).all() and (c <= 1).all()

    def test_gain_for_step(self):
        assert gain_for_step(0.01) == pytest.approx(100.0)
        with pytest.raises(FieldError):
            gain_for_step(0.0)


class TestColorBatching:
    def test_matches_per_group_sampling(self):
        """The fused color path equals sampling each group independently."""
        bbox = BoundingBox(torch.tensor([-1.0, -1.0, -1.0]), torch.ones(3))
        f = FactorizedField(GridDims(5, 4, 3), bbox, r_sigma=2, r_c=3, gain=2.0,
                            init_scale=0.5, generator=torch.Generator().manual_seed(7),
                            dtype=torch.float64)
        pts = 2 * torch.rand(300, 3, dtype=torch.float64) - 1
        fused = f.sample_color(pts)
        per_group = torch.sigmoid(torch.stack(
            [f.sample_raw_sum(g, pts) for g in f.color], dim=-1))
        assert torch.allclose(fused, per_group, atol=1e-12)


class TestGradients:
    def test_backprop_matches_autograd(self, tiny_field):
        gen = torch.Generator().manual_seed(11)
        with torch.no_grad():
            for g in [tiny_field.density] + tiny_field.color:
                for name in FactorGroup.TENSOR_NAMES:
                    getattr(g, name).normal_(generator=gen)
        pts = torch.rand(50, 3, dtype=torch.float64)
        d_density = torch.randn(50, dtype=torch.float64, generator=gen)
        d_rgb = torch.randn(50, 3, dtype=torch.float64, generator=gen)

        grads = FieldGradients(tiny_field)
        tiny_field.backprop_sample(pts, d_density, d_rgb, grads)

        tiny_field.requires_grad_(True)
        out = (tiny_field.sample_density(pts) * d_density).sum() + \
            (tiny_field.sample_color(pts) * d_rgb).sum()
        out.backward()
        for p, g in zip(tiny_field.parameters(), grads.tensors()):
            assert torch.allclose(p.grad, g, atol=1e-10)

    def test_finite_differences(self):
        """Analytic factor gradients vs central differences."""
        bbox = BoundingBox(torch.zeros(3), torch.ones(3))
        f = FactorizedField(GridDims(3, 3, 3), bbox, 2, 1, gain=3.0,
                            init_scale=0.3, generator=torch.Generator().manual_seed(5),
                            dtype=torch.float64)
        pts = torch.rand(20, 3, dtype=torch.float64)
        w_sig = torch.randn(20, dtype=torch.float64)
        w_rgb = torch.randn(20, 3, dtype=torch.float64)
        grads = FieldGradients(f)
        f.backprop_sample(pts, w_sig, w_rgb, grads)

        eps = 1e-6
        rng = np.random.default_rng(0)
        params = list(f.parameters())
        stores = grads.tensors()
        for _ in range(40):
            pi = int(rng.integers(len(params)))
            p = params[pi]
            if p.numel() == 0:
                continue
            flat_i = int(rng.integers(p.numel()))
            with torch.no_grad():
                orig = p.reshape(-1)[flat_i].item()
                p.reshape(-1)[flat_i] = orig + eps
                hi = ((f.sample_density(pts) * w_sig).sum()
                      + (f.sample_color(pts) * w_rgb).sum()).item()
                p.reshape(-1)[flat_i] = orig - eps
                lo = ((f.sample_density(pts) * w_sig).sum()
                      + (f.sample_color(pts) * w_rgb).sum()).item()
                p.reshape(-1)[flat_i] = orig
            fd = (hi - lo) / (2 * eps)
            an = stores[pi].reshape(-1)[flat_i].item()
            assert an == pytest.approx(fd, abs=1e-5, rel=1e-4)


class TestUpsample:
    def test_preserves_coincident_nodes(self):
        """(new-1) a multiple of (old-1): old node values reproduce exactly."""
        bbox = BoundingBox(torch.zeros(3), torch.ones(3))
        f = FactorizedField(GridDims(2, 3, 2), bbox, 1, 1, gain=1.0,
                            init_scale=1.0, generator=torch.Generator().manual_seed(9),
                            dtype=torch.float64)
        up = f.upsample(GridDims(3, 5, 3))
        old = f.density.plane_yx
        new = up.density.plane_yx
        assert torch.allclose(new[:, ::2, ::2], old, atol=1e-12)
        assert torch.allclose(up.density.line_z[:, ::2], f.density.line_z, atol=1e-12)

    def test_sampled_values_preserved_at_old_nodes(self):
        bbox = BoundingBox(torch.zeros(3), torch.ones(3))
        f = FactorizedField(GridDims(3, 3, 3), bbox, 2, 2, gain=2.0,
                            init_scale=0.7, generator=torch.Generator().manual_seed(13),
                            dtype=torch.float64)
        up = f.upsample(GridDims(5, 5, 5))
        pts = torch.tensor([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 0.5, 0.0]],
                           dtype=torch.float64)
        assert torch.allclose(f.sample_density(pts), up.sample_density(pts), atol=1e-10)
        assert torch.allclose(f.sample_color(pts), up.sample_color(pts), atol=1e-10)

    def test_same_dims_is_noop(self, tiny_field):
        up = tiny_field.upsample(GridDims(2, 2, 2))
        assert torch.allclose(up.density.plane_yx, tiny_field.density.plane_yx)

    def test_shrink_rejected(self):
        bbox = BoundingBox(torch.zeros(3), torch.ones(3))
        f = FactorizedField(GridDims(4, 4, 4), bbox, 1, 1, gain=1.0)
        with pytest.raises(FieldError):
            f.upsample(GridDims(3, 4, 4))


class TestParamCount:
    def test_formula_tiny(self, tiny_field):
        # per-rank block for 2x2x2: 4+4+4+2+2+2 = 18; R_sigma=1, R_c=1 -> 4*18
        assert tiny_field.param_count() == 72

    def test_formula_general(self):
        bbox = BoundingBox(torch.zeros(3), torch.ones(3))
        d, h, w, rs, rc = 11, 7, 5, 3, 2
        f = FactorizedField(GridDims(d, h, w), bbox, rs, rc, gain=1.0)
        per = h * w + h * d + w * d + h + w + d
        assert f.param_count() == rs * per + 3 * rc * per
        assert f.param_count() == sum(p.numel() for p in f.parameters())


class TestDimsForVoxels:
    def test_total_close_and_aspect(self):
        bbox = BoundingBox(torch.zeros(3), torch.tensor([2.0, 1.0, 1.0]))
        dims = dims_for_voxels(bbox, 1e6)
        assert abs(dims.voxels - 1e6) / 1e6 < 0.1
        assert dims.w == pytest.approx(2 * dims.h, rel=0.1)
