import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from classaware_seg import lca
from classaware_seg.config import ATBConfig
from classaware_seg.lca import (AffineFactors, AffineTransformBlock, LocalClassAware, local_class_centers,
                                merge_windows, multi_head_class_attention, sample_window, split,
                                transform_window, window_geometry, window_grid)
from classaware_seg.oracles import finite_diff_grad, oracle_affine, oracle_attention, oracle_class_centers

from .conftest import to64


def one_factor(scale=1.0, theta=0.0, offset=(0.0, 0.0)):
    return AffineFactors(to64([scale]), to64([theta]), to64([offset]))


class TestSplit:
    def test_single_window(self, rng):
        x, d = to64(rng.normal(size=(2, 3, 5, 6))), to64(rng.normal(size=(2, 4, 5, 6)))
        win, dwin, grid = split(x, d, 1, 1)
        assert torch.equal(win, x) and torch.equal(dwin, d) and grid.count == 1

    def test_four_by_four(self, rng):
        x = to64(rng.normal(size=(1, 3, 8, 8)))
        win, _, grid = split(x, x, 4, 4)
        assert win.shape == (16, 3, 2, 2) and (grid.h, grid.w) == (2, 2)
        torch.testing.assert_close(win[5], x[0, :, 2:4, 2:4])  # row 1, column 1

    def test_padding_bookkeeping(self, rng):
        x = to64(rng.normal(size=(1, 2, 7, 8)))
        win, _, grid = split(x, x, 4, 4)
        assert grid.padded == (8, 8) and grid.h == 2
        # replicate padding: the extra row copies row 6
        torch.testing.assert_close(win[12:, :, 1], win[12:, :, 0])
        assert torch.equal(merge_windows(win, grid), x)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 4), st.integers(1, 4))
    def test_round_trip(self, h, w, nh, nw):
        if nh > h or nw > w:
            return
        x = torch.randn(2, 3, h, w)
        win, _, grid = split(x, x, nh, nw)
        assert torch.equal(merge_windows(win, grid), x)

    def test_rejects_too_many_windows(self):
        x = torch.zeros(1, 1, 3, 3)
        with pytest.raises(ValueError):
            split(x, x, 4, 1)
        with pytest.raises(ValueError):
            split(x, x, 0, 1)


class TestATB:
    def test_zero_init_is_identity(self, rng):
        f = AffineTransformBlock(6)(torch.randn(5, 6, 2, 2))
        assert torch.equal(f.scale, torch.ones(5)) and torch.equal(f.theta, torch.zeros(5))
        assert torch.equal(f.offset, torch.zeros(5, 2))

    def test_identical_windows_identical_factors(self):
        atb = AffineTransformBlock(3)
        torch.nn.init.normal_(atb.proj.weight)
        w = torch.randn(1, 3, 2, 2).repeat(2, 1, 1, 1)
        f = atb(w)
        assert torch.equal(f.theta[0], f.theta[1]) and torch.equal(f.offset[0], f.offset[1])

    @pytest.mark.parametrize("flags,dim", [((True, True, True), 4), ((False, True, True), 3),
                                           ((True, False, True), 3), ((True, True, False), 2),
                                           ((True, False, False), 1)])
    def test_factor_switches(self, flags, dim):
        scale, rotation, offset = flags
        atb = AffineTransformBlock(4, ATBConfig(scale=scale, rotation=rotation, offset=offset))
        assert atb.out_dim == dim
        torch.nn.init.normal_(atb.proj.weight)
        torch.nn.init.constant_(atb.proj.bias, 0.5)
        f = atb(torch.randn(3, 4, 2, 2))
        assert torch.equal(f.theta == 0, torch.full((3,), not rotation))
        assert bool((f.scale == 1).all()) == (not scale)
        assert bool((f.offset == 0).all()) == (not offset)

    def test_no_factor_rejected(self):
        with pytest.raises(ValueError):
            AffineTransformBlock(4, ATBConfig(False, False, False))

    def test_theta_gradient(self, rng):
        atb = AffineTransformBlock(4).double()
        with torch.no_grad():
            atb.proj.weight.copy_(to64(rng.normal(size=(4, 4))))
            atb.proj.bias.fill_(0.5)
        x0 = rng.normal(size=(3, 4, 2, 2))
        x = to64(x0).requires_grad_()
        (g,) = torch.autograd.grad(atb(x).theta.sum(), x)
        with torch.no_grad():
            numeric = finite_diff_grad(lambda a: atb(to64(a)).theta.sum().item(), x0)
        assert np.abs(g.numpy() - numeric).max() / np.abs(numeric).max() < 1e-4


class TestTransform:
    def setup_method(self):
        self.grid = window_grid(4, 4, 1, 1)
        self.geom = window_geometry(self.grid)  # center (1.5, 1.5), half-extent (2, 2)

    def base_points(self):
        yy, xx = torch.meshgrid(torch.arange(4.0, dtype=torch.float64), torch.arange(4.0, dtype=torch.float64),
                                indexing="ij")
        return torch.stack([xx, yy], -1)

    def test_identity(self):
        assert torch.equal(transform_window(self.geom, one_factor())[0], self.base_points())

    def test_quarter_turn(self):
        # hand-applied: Rot(pi/2) = [[0, 1], [-1, 0]] sends offset (1, 0) to (0, -1)
        center, pt = torch.tensor([[1.5, 1.5]], dtype=torch.float64), torch.tensor([[[2.5, 1.5]]], dtype=torch.float64)
        out = lca.transform_points(pt, center, torch.ones(1, 2, dtype=torch.float64), one_factor(theta=math.pi / 2))
        torch.testing.assert_close(out[0, 0], torch.tensor([1.5, 0.5], dtype=torch.float64))

    def test_scale_two(self):
        out = transform_window(self.geom, one_factor(scale=2.0))[0]
        # corner (0.5, 0.5) sits at offset (-1, -1) from the center; doubling gives (-2, -2)
        base = self.base_points()
        expected = 1.5 + 2 * (base - 1.5)
        torch.testing.assert_close(out, expected)
        torch.testing.assert_close(out[0, 0], torch.tensor([-1.5, -1.5], dtype=torch.float64))

    def test_half_turn_reflects(self):
        out = transform_window(self.geom, one_factor(theta=math.pi))[0]
        torch.testing.assert_close(out, 3.0 - self.base_points(), atol=1e-12, rtol=0)

    def test_offset_units(self):
        out = transform_window(self.geom, one_factor(offset=(0.5, -1.0)))[0]
        torch.testing.assert_close(out, self.base_points() + torch.tensor([1.0, -2.0], dtype=torch.float64))

    def test_matches_oracle(self, rng):
        grid = window_grid(6, 4, 2, 2)
        geom = window_geometry(grid)
        f = AffineFactors(to64(rng.uniform(0.5, 2, 8)), to64(rng.uniform(-3, 3, 8)), to64(rng.uniform(-1, 1, (8, 2))))
        out = transform_window(geom, f)  # two images' worth of windows
        for n in range(8):
            g = n % 4
            pts = [(geom.x_l[g].item() + x, geom.y_l[g].item() + y) for y in range(3) for x in range(2)]
            ref = oracle_affine(pts, (geom.x_c[g].item(), geom.y_c[g].item()), (1.0, 1.5), f.scale[n].item(),
                                f.theta[n].item(), f.offset[n].tolist())
            np.testing.assert_allclose(out[n].reshape(-1, 2).numpy(), ref, atol=1e-12, rtol=0)

    def test_geometry_fields(self):
        geom = window_geometry(window_grid(8, 8, 2, 2))
        assert geom.x_l.tolist() == [0, 4, 0, 4] and geom.y_r.tolist() == [3, 3, 7, 7]
        assert geom.x_c.tolist() == [1.5, 5.5, 1.5, 5.5]
        assert (geom.x_l < geom.x_r).all() and (geom.y_l < geom.y_r).all()


class TestSampler:
    def test_identity_grid_is_exact(self, rng):
        x = torch.randn(2, 3, 6, 4)
        grid = window_grid(6, 4, 3, 2)
        coords = transform_window(window_geometry(grid, torch.float32), AffineFactors.identity(12))
        assert torch.equal(sample_window(x, coords), lca.split_windows(x, grid))

    def test_constant_plane(self, rng):
        plane = torch.full((1, 2, 5, 5), 3.25, dtype=torch.float64)
        coords = to64(rng.uniform(-3, 8, (2, 3, 3, 2)))
        torch.testing.assert_close(sample_window(plane, coords), torch.full((2, 2, 3, 3), 3.25, dtype=torch.float64))

    def test_center_of_two_by_two(self):
        plane = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]], dtype=torch.float64)
        # bilinear by hand: 0.25 * (0 + 1 + 2 + 3)
        out = sample_window(plane, torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64))
        assert out.item() == 1.5

    def test_border_clamp(self):
        plane = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]])
        out = sample_window(plane, torch.tensor([[[[-4.0, 0.0], [9.0, 9.0]]]]))
        assert out.flatten().tolist() == [0.0, 3.0]

    def test_grid_gradient(self, rng):
        plane = to64(rng.normal(size=(1, 2, 4, 4)))
        c0 = rng.integers(0, 3, (1, 2, 2, 2)) + rng.uniform(0.2, 0.8, (1, 2, 2, 2))
        c = to64(c0).requires_grad_()
        (g,) = torch.autograd.grad(sample_window(plane, c).sum(), c)
        numeric = finite_diff_grad(lambda a: sample_window(plane, to64(a)).sum().item(), c0)
        assert np.abs(g.numpy() - numeric).max() / np.abs(numeric).max() < 1e-4


class TestLocalCenters:
    def test_uniform_logits_window_mean(self, rng):
        win = to64(rng.normal(size=(4, 3, 2, 2)))
        centers = local_class_centers(win, torch.zeros(4, 2, 2, 2, dtype=torch.float64))
        torch.testing.assert_close(centers[:, 1], win.mean(dim=(2, 3)))

    def test_hand_window(self):
        win = np.array([[[1.0, -2.0], [0.5, 4.0]]])
        logits = np.array([[[0.3, 1.2], [-0.7, 0.0]], [[2.0, 2.0], [0.0, 1.0]]])
        got = local_class_centers(to64(win)[None], to64(logits)[None])[0]
        np.testing.assert_allclose(got.numpy(), oracle_class_centers(win, logits), atol=1e-12)


class TestAttention:
    def test_single_class(self, rng):
        q, k, v = torch.randn(3, 5, 8), torch.randn(3, 1, 8), torch.randn(3, 1, 8)
        out, aff = multi_head_class_attention(q, k, v, 4)
        assert torch.equal(aff, torch.ones(3, 4, 5, 1))
        torch.testing.assert_close(out, v.expand(3, 5, 8))

    def test_rows_sum_to_one(self, rng):
        _, aff = multi_head_class_attention(torch.randn(2, 7, 8), torch.randn(2, 6, 8), torch.randn(2, 6, 8), 2)
        torch.testing.assert_close(aff.sum(-1), torch.ones(2, 2, 7), atol=1e-6, rtol=0)

    def test_hand_computed(self):
        q = [[1.0, 0.0], [0.0, 1.0]]
        k = [[1.0, 0.0], [0.0, 2.0]]
        v = [[1.0, 2.0], [3.0, 4.0]]
        expected = []
        for px in q:
            s = [sum(a * b for a, b in zip(px, kk)) / math.sqrt(2) for kk in k]
            e = [math.exp(x) for x in s]
            w = [x / sum(e) for x in e]
            expected.append([w[0] * v[0][c] + w[1] * v[1][c] for c in range(2)])
        out, _ = multi_head_class_attention(to64(q)[None], to64(k)[None], to64(v)[None], 1)
        np.testing.assert_allclose(out[0].numpy(), expected, atol=1e-12)
        np.testing.assert_allclose(out[0].numpy(), oracle_attention(q, k, v), atol=1e-12)

    def test_output_in_hull_of_head_values(self, rng):
        v = torch.randn(1, 4, 6, dtype=torch.float64)
        out, _ = multi_head_class_attention(torch.randn(1, 9, 6, dtype=torch.float64),
                                            torch.randn(1, 4, 6, dtype=torch.float64), v, 3)
        assert (out >= v.min(1).values - 1e-12).all() and (out <= v.max(1).values + 1e-12).all()

    def test_argmax_invariant_to_positive_scaling(self, rng):
        q, k = torch.randn(1, 10, 4), torch.randn(1, 5, 4)
        _, a = multi_head_class_attention(q, k, torch.randn(1, 5, 4), 1)
        _, b = multi_head_class_attention(q * 3.7, k, torch.randn(1, 5, 4), 1)
        assert not torch.allclose(a, b)
        assert torch.equal(a.argmax(-1), b.argmax(-1))

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            multi_head_class_attention(torch.randn(1, 2, 6), torch.randn(1, 2, 6), torch.randn(1, 2, 6), 4)


def _lca(width=8, classes=3, global_dim=5, **kw):
    torch.manual_seed(0)
    return LocalClassAware(width, classes, global_dim, norm="batch", act="gelu", **kw).double().eval()


class TestModule:
    def test_shapes_and_aux_logits(self):
        m = _lca(patches=(2, 2), heads=4)
        out, logits = m(torch.randn(2, 8, 6, 6, dtype=torch.float64), torch.randn(2, 3, 5, dtype=torch.float64))
        assert out.shape == (2, 8, 6, 6) and logits.shape == (2, 3, 6, 6)

    def test_patches_clamped_to_plane(self):
        m = _lca(patches=(4, 4), heads=2)
        assert m.effective_patches(2, 8) == (2, 4)
        out, _ = m(torch.randn(1, 8, 2, 8, dtype=torch.float64), torch.randn(1, 3, 5, dtype=torch.float64))
        assert out.shape == (1, 8, 2, 8)

    def test_forced_identity_matches_disabled_atb(self):
        full = _lca(patches=(2, 2), heads=2)
        torch.nn.init.normal_(full.atb.proj.weight)
        torch.nn.init.constant_(full.atb.proj.bias, 0.3)
        plain = _lca(patches=(2, 2), heads=2, atb=ATBConfig(False, False, False))
        assert plain.atb is None
        plain.load_state_dict({k: v for k, v in full.state_dict().items() if not k.startswith("atb.")})
        x, cg = torch.randn(2, 8, 6, 6, dtype=torch.float64), torch.randn(2, 3, 5, dtype=torch.float64)
        warped = full(x, cg)[0]
        full.force_identity = True
        same = full(x, cg)[0]
        assert not torch.allclose(warped, same)
        torch.testing.assert_close(same, plain(x, cg)[0], atol=1e-6, rtol=0)

    def test_local_values_when_no_global(self):
        m = _lca(global_dim=None, patches=(2, 2), heads=2)
        out, _ = m(torch.randn(1, 8, 4, 4, dtype=torch.float64))
        assert out.shape == (1, 8, 4, 4)

    def test_tied_value_heads(self):
        m = _lca(patches=(1, 1), heads=4, tie_value_heads=True)
        v = m.value(torch.randn(1, 3, 5, dtype=torch.float64))
        torch.testing.assert_close(v[..., :2], v[..., 2:4])
        assert m.value.proj.out_features == 2

    def test_module_gradient(self, rng):
        m = _lca(width=4, classes=2, global_dim=3, patches=(2, 2), heads=2)
        torch.nn.init.normal_(m.atb.proj.weight, std=0.3)
        torch.nn.init.constant_(m.atb.proj.bias, 0.2)
        cg = to64(rng.normal(size=(1, 2, 3)))
        readout = to64(rng.normal(size=(1, 4, 4, 4)))
        x0 = rng.normal(size=(1, 4, 4, 4))
        x = to64(x0).requires_grad_()
        (g,) = torch.autograd.grad((m(x, cg)[0] * readout).sum(), x)
        with torch.no_grad():
            numeric = finite_diff_grad(lambda a: (m(to64(a), cg)[0] * readout).sum().item(), x0)
        assert np.abs(g.numpy() - numeric).max() / np.abs(numeric).max() < 1e-4
