"""Autograd wrappers around the Cython kernels.

CPU only: tensors are viewed as numpy arrays without copies.  Raises
ImportError at import time when the extension was not built.
"""

import torch

from . import _native

NAME = "cython"


class _WarpFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, feat, disp):
        feat_c = feat.detach().contiguous()
        disp_c = disp.detach().contiguous().to(feat.dtype)
        out = torch.empty_like(feat_c)
        _native.warp_forward(feat_c.numpy(), disp_c.numpy(), out.numpy())
        ctx.save_for_backward(feat_c, disp_c)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        feat, disp = ctx.saved_tensors
        grad_feat = torch.zeros_like(feat)
        grad_disp = torch.zeros_like(disp)
        _native.warp_backward(
            grad_out.contiguous().numpy(), feat.numpy(), disp.numpy(),
            grad_feat.numpy(), grad_disp.numpy(),
        )
        return grad_feat, grad_disp


class _CorrelationFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, left, right, max_disp):
        left_c = left.detach().contiguous()
        right_c = right.detach().contiguous()
        out = left_c.new_empty(max_disp + 1, left_c.shape[1], left_c.shape[2])
        _native.corr_forward(left_c.numpy(), right_c.numpy(), max_disp, out.numpy())
        ctx.save_for_backward(left_c, right_c)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        left, right = ctx.saved_tensors
        grad_left = torch.zeros_like(left)
        grad_right = torch.zeros_like(right)
        _native.corr_backward(
            grad_out.contiguous().numpy(), left.numpy(), right.numpy(),
            grad_left.numpy(), grad_right.numpy(),
        )
        return grad_left, grad_right, None


def warp_by_disparity(feat: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    return _WarpFunction.apply(feat, disp)


def correlation(left: torch.Tensor, right: torch.Tensor, max_disp: int) -> torch.Tensor:
    return _CorrelationFunction.apply(left, right, max_disp)
