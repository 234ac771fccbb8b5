"""Pure-torch fallback implementations of the hot kernels.

Differentiable through autograd; used whenever the compiled extension is
unavailable or explicitly requested via STEREOADAPT_KERNELS=python.
"""

import torch
import torch.nn.functional as F

NAME = "python"


def warp_by_disparity(feat: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of feat [C,H,W] at x - disp[y,x], zero outside [0, W-1].

    Differentiable with respect to both feat and disp.
    """
    c, h, w = feat.shape
    xs = torch.arange(w, dtype=feat.dtype, device=feat.device).expand(h, w) - disp
    x0 = xs.floor()
    frac = xs - x0
    x0 = x0.long()
    x1 = x0 + 1
    in0 = (x0 >= 0) & (x0 < w)
    in1 = (x1 >= 0) & (x1 < w)
    idx0 = x0.clamp(0, w - 1).unsqueeze(0).expand(c, h, w)
    idx1 = x1.clamp(0, w - 1).unsqueeze(0).expand(c, h, w)
    v0 = feat.gather(2, idx0) * in0.to(feat.dtype)
    v1 = feat.gather(2, idx1) * in1.to(feat.dtype)
    return (1.0 - frac) * v0 + frac * v1


def correlation(left: torch.Tensor, right: torch.Tensor, max_disp: int) -> torch.Tensor:
    """Channel-mean dot product of left with right shifted by d in [0, max_disp].

    Output [max_disp+1, H, W]; entries with x - d < 0 are zero.
    """
    _, h, w = left.shape
    rows = []
    for d in range(max_disp + 1):
        if d >= w:
            rows.append(left.new_zeros(h, w))
            continue
        prod = (left[:, :, d:] * right[:, :, : w - d]).mean(dim=0)
        rows.append(F.pad(prod, (d, 0)))
    return torch.stack(rows, dim=0)
