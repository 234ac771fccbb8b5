"""Kernel-level checks for warping and correlation, run on every backend."""

import numpy as np
import pytest
import torch

from conftest import check_gradients


def shift_oracle(feat, d):
    """Brute-force integer column shift with zero fill: out[..,x] = feat[..,x-d]."""
    out = torch.zeros_like(feat)
    w = feat.shape[-1]
    if d < w:
        out[..., d:] = feat[..., : w - d]
    return out


def corr_oracle(left, right, max_disp):
    c, h, w = left.shape
    out = torch.zeros(max_disp + 1, h, w, dtype=left.dtype)
    for d in range(max_disp + 1):
        for y in range(h):
            for x in range(w):
                if x - d >= 0:
                    out[d, y, x] = (left[:, y, x] * right[:, y, x - d]).sum() / c
    return out


def nonkink_disparity(rng, h, w, lo=0, hi=3):
    """Random disparities with fractional part in [0.2, 0.8] (away from the
    floor kinks so finite differences are meaningful)."""
    base = rng.integers(lo, hi, size=(h, w)).astype(np.float64)
    frac = rng.uniform(0.2, 0.8, size=(h, w))
    return torch.from_numpy(base + frac)


class TestWarp:
    def test_identity_zero_disparity(self, kernel_backend):
        rng = np.random.default_rng(0)
        feat = torch.from_numpy(rng.standard_normal((3, 5, 7)))
        out = kernel_backend.warp_by_disparity(feat, torch.zeros(5, 7, dtype=feat.dtype))
        assert torch.equal(out, feat)

    def test_integer_shift_row(self, kernel_backend):
        feat = torch.tensor([[[4.0, 10.0, 20.0, 30.0]]])
        out = kernel_backend.warp_by_disparity(feat, torch.ones(1, 4))
        assert torch.allclose(out, torch.tensor([[[0.0, 4.0, 10.0, 20.0]]]))

    def test_half_pixel_row(self, kernel_backend):
        feat = torch.tensor([[[4.0, 10.0, 20.0, 30.0]]])
        out = kernel_backend.warp_by_disparity(feat, torch.full((1, 4), 0.5))
        assert torch.allclose(out, torch.tensor([[[2.0, 7.0, 15.0, 25.0]]]))

    def test_integer_shift_equivalence_random(self, kernel_backend):
        rng = np.random.default_rng(7)
        for _ in range(50):
            c, h, w = rng.integers(1, 4), rng.integers(2, 8), rng.integers(4, 12)
            d = int(rng.integers(0, w))
            feat = torch.from_numpy(rng.standard_normal((c, h, w)))
            disp = torch.full((h, w), float(d), dtype=feat.dtype)
            out = kernel_backend.warp_by_disparity(feat, disp)
            assert (out - shift_oracle(feat, d)).abs().max() < 1e-6

    def test_linearity(self, kernel_backend):
        rng = np.random.default_rng(3)
        f = torch.from_numpy(rng.standard_normal((2, 4, 6)))
        g = torch.from_numpy(rng.standard_normal((2, 4, 6)))
        disp = nonkink_disparity(rng, 4, 6)
        lhs = kernel_backend.warp_by_disparity(2.5 * f - 1.5 * g, disp)
        rhs = 2.5 * kernel_backend.warp_by_disparity(f, disp) - 1.5 * kernel_backend.warp_by_disparity(g, disp)
        assert torch.allclose(lhs, rhs, atol=1e-10)

    def test_gradients(self, kernel_backend):
        rng = np.random.default_rng(11)
        feat = torch.from_numpy(rng.standard_normal((2, 4, 4)))
        disp = nonkink_disparity(rng, 4, 4, hi=2)
        check_gradients(lambda f, d: kernel_backend.warp_by_disparity(f, d).sum(), [feat, disp])

    def test_weighted_gradients(self, kernel_backend):
        # non-uniform downstream weights exercise the scatter paths
        rng = np.random.default_rng(13)
        feat = torch.from_numpy(rng.standard_normal((2, 3, 5)))
        disp = nonkink_disparity(rng, 3, 5, hi=2)
        wgt = torch.from_numpy(rng.standard_normal((2, 3, 5)))
        check_gradients(lambda f, d: (kernel_backend.warp_by_disparity(f, d) * wgt).sum(), [feat, disp])


class TestCorrelation:
    def test_two_pixel_example(self, kernel_backend):
        feat = torch.tensor([[[1.0, 2.0]]])
        out = kernel_backend.correlation(feat, feat, 1)
        assert torch.allclose(out[0], torch.tensor([[1.0, 4.0]]))
        assert torch.allclose(out[1], torch.tensor([[0.0, 2.0]]))

    def test_zero_right(self, kernel_backend):
        rng = np.random.default_rng(5)
        left = torch.from_numpy(rng.standard_normal((3, 4, 6)))
        out = kernel_backend.correlation(left, torch.zeros_like(left), 3)
        assert torch.equal(out, torch.zeros(4, 4, 6, dtype=left.dtype))

    def test_self_correlation_channel_zero(self, kernel_backend):
        rng = np.random.default_rng(6)
        f = torch.from_numpy(rng.standard_normal((5, 3, 7)))
        out = kernel_backend.correlation(f, f, 2)
        expected = (f * f).mean(dim=0)
        assert torch.allclose(out[0], expected, atol=1e-12)

    def test_matches_bruteforce(self, kernel_backend):
        rng = np.random.default_rng(9)
        left = torch.from_numpy(rng.standard_normal((3, 4, 8)))
        right = torch.from_numpy(rng.standard_normal((3, 4, 8)))
        out = kernel_backend.correlation(left, right, 5)
        assert torch.allclose(out, corr_oracle(left, right, 5), atol=1e-12)

    def test_displacement_beyond_width(self, kernel_backend):
        rng = np.random.default_rng(10)
        left = torch.from_numpy(rng.standard_normal((2, 2, 3)))
        right = torch.from_numpy(rng.standard_normal((2, 2, 3)))
        out = kernel_backend.correlation(left, right, 6)
        assert out.shape == (7, 2, 3)
        assert torch.equal(out[4:], torch.zeros(3, 2, 3, dtype=left.dtype))

    def test_gradients(self, kernel_backend):
        rng = np.random.default_rng(12)
        left = torch.from_numpy(rng.standard_normal((2, 4, 4)))
        right = torch.from_numpy(rng.standard_normal((2, 4, 4)))
        check_gradients(lambda l, r: kernel_backend.correlation(l, r, 2).sum(), [left, right])


class TestBackendAgreement:
    """The compiled path and the fallback must agree (when both exist)."""

    def _both(self):
        from stereoadapt.kernels import available_backends, get_backend

        names = available_backends()
        if len(names) < 2:
            pytest.skip("only one kernel backend available")
        return [get_backend(n) for n in names]

    def test_warp_forward_and_grads_agree(self):
        backends = self._both()
        rng = np.random.default_rng(21)
        feat = torch.from_numpy(rng.standard_normal((3, 6, 9)))
        disp = nonkink_disparity(rng, 6, 9)
        results = []
        for be in backends:
            f = feat.clone().requires_grad_(True)
            d = disp.clone().requires_grad_(True)
            out = be.warp_by_disparity(f, d)
            out.square().sum().backward()
            results.append((out.detach(), f.grad, d.grad))
        for got in results[1:]:
            for a, b in zip(results[0], got):
                assert torch.allclose(a, b, atol=1e-10)

    def test_correlation_forward_and_grads_agree(self):
        backends = self._both()
        rng = np.random.default_rng(22)
        left = torch.from_numpy(rng.standard_normal((4, 5, 8)))
        right = torch.from_numpy(rng.standard_normal((4, 5, 8)))
        results = []
        for be in backends:
            l = left.clone().requires_grad_(True)
            r = right.clone().requires_grad_(True)
            out = be.correlation(l, r, 4)
            out.square().sum().backward()
            results.append((out.detach(), l.grad, r.grad))
        for got in results[1:]:
            for a, b in zip(results[0], got):
                assert torch.allclose(a, b, atol=1e-10)

    def test_float32_supported(self):
        for be in self._both():
            feat = torch.rand(2, 3, 4, dtype=torch.float32)
            disp = torch.rand(3, 4, dtype=torch.float32)
            assert be.warp_by_disparity(feat, disp).dtype == torch.float32
            assert be.correlation(feat, feat, 2).dtype == torch.float32
