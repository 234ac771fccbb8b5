"""Differentiable geometric kernels shared by the losses and the matcher.

All operations are pure functions of their inputs and safe to call from
multiple workers.  The disparity convention is the rectified one: the left
pixel (y, x) corresponds to the right pixel (y, x - d) with d >= 0.
"""

from dataclasses import dataclass, field

import torch

from .errors import ContractViolationError, NonFiniteValueError
from .kernels import correlation as _correlation
from .kernels import warp_by_disparity as _warp


@dataclass
class FeatureMap:
    """Dense [C, H, W] activation tensor at a given downsampling scale."""

    data: torch.Tensor
    scale: int = 1

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ContractViolationError(f"feature data must be [C,H,W], got {tuple(self.data.shape)}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ContractViolationError("feature height/width must be >= 1")
        if self.scale < 1:
            raise ContractViolationError(f"scale must be a positive integer, got {self.scale}")
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise NonFiniteValueError("feature entries must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class DisparityMap:
    """[H, W] horizontal shifts in pixels at this map's own scale.

    valid marks where a ground-truth or estimated value exists; invalid
    entries are excluded from every loss and metric.
    """

    data: torch.Tensor
    scale: int = 1
    valid: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.data.dim() != 2:
            raise ContractViolationError(f"disparity data must be [H,W], got {tuple(self.data.shape)}")
        if self.scale < 1:
            raise ContractViolationError(f"scale must be a positive integer, got {self.scale}")
        if self.valid is None:
            self.valid = torch.ones_like(self.data, dtype=torch.bool)
        if self.valid.shape != self.data.shape:
            raise ContractViolationError("validity mask shape must match disparity shape")
        if self.valid.dtype != torch.bool:
            raise ContractViolationError("validity mask must be boolean")
        picked = self.data.detach()[self.valid]
        if picked.numel():
            if not bool(torch.isfinite(picked).all()):
                raise NonFiniteValueError("valid disparity entries must be finite")
            if not bool((picked >= 0).all()):
                raise ContractViolationError("valid disparity entries must be >= 0")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def inverse_warp(right_feature: FeatureMap, disparity: DisparityMap) -> FeatureMap:
    """Reconstruct the left view by sampling the right feature at x - d.

    Bilinear sampling with zero padding outside [0, W-1]; differentiable in
    both the feature values and the disparity values.
    """
    if (right_feature.height, right_feature.width) != (disparity.height, disparity.width):
        raise ContractViolationError(
            f"feature {right_feature.height}x{right_feature.width} vs "
            f"disparity {disparity.height}x{disparity.width}"
        )
    if right_feature.scale != disparity.scale:
        raise ContractViolationError(
            f"scale mismatch: feature {right_feature.scale}, disparity {disparity.scale}"
        )
    warped = _warp(right_feature.data, disparity.data)
    return FeatureMap(warped, right_feature.scale)


def warp_validity_mask(disparity: DisparityMap, width: int) -> torch.Tensor:
    """True exactly where x - d lands inside [0, width-1] and d is valid."""
    if width != disparity.width:
        raise ContractViolationError(f"width {width} does not match disparity width {disparity.width}")
    xs = torch.arange(width, dtype=disparity.data.dtype, device=disparity.data.device)
    target = xs.expand(disparity.height, width) - disparity.data
    return (target >= 0) & (target <= width - 1) & disparity.valid


def rescale_disparity(disparity: DisparityMap, target_scale: int) -> DisparityMap:
    """Resample a disparity map to another pyramid scale.

    Area averaging on the way down, bilinear on the way up, then values are
    multiplied by scale/target_scale so the encoded horizontal shift stays
    consistent at the new resolution.  Downsampled cells are valid only when
    every contributing cell is valid; upsampled validity is nearest-neighbor
    (upsampling is only used on fully-valid estimated maps).
    """
    if target_scale < 1:
        raise ContractViolationError(f"target_scale must be positive, got {target_scale}")
    if target_scale == disparity.scale:
        return disparity
    data = disparity.data.unsqueeze(0).unsqueeze(0)
    valid = disparity.valid
    if target_scale > disparity.scale:
        if target_scale % disparity.scale != 0:
            raise ContractViolationError(
                f"non-integral scale ratio: {disparity.scale} -> {target_scale}"
            )
        k = target_scale // disparity.scale
        if disparity.height % k or disparity.width % k:
            raise ContractViolationError(
                f"map {disparity.height}x{disparity.width} not divisible by factor {k}"
            )
        resampled = torch.nn.functional.avg_pool2d(data, k)
        invalid = torch.nn.functional.max_pool2d((~valid).float().unsqueeze(0).unsqueeze(0), k)
        new_valid = invalid.squeeze(0).squeeze(0) == 0
    else:
        if disparity.scale % target_scale != 0:
            raise ContractViolationError(
                f"non-integral scale ratio: {disparity.scale} -> {target_scale}"
            )
        k = disparity.scale // target_scale
        resampled = torch.nn.functional.interpolate(
            data, scale_factor=k, mode="bilinear", align_corners=False
        )
        new_valid = (
            torch.nn.functional.interpolate(
                valid.float().unsqueeze(0).unsqueeze(0), scale_factor=k, mode="nearest"
            ).squeeze(0).squeeze(0)
            > 0.5
        )
    factor = disparity.scale / target_scale
    out = resampled.squeeze(0).squeeze(0) * factor
    # invalid cells may hold nonsense after averaging; zero them so the
    # non-negativity invariant holds regardless of what fed them
    out = torch.where(new_valid, out, torch.zeros_like(out))
    return DisparityMap(out, target_scale, new_valid)


def correlation_1d(left_feature: FeatureMap, right_feature: FeatureMap,
                   max_displacement: int) -> FeatureMap:
    """Horizontal correlation volume: channel d holds the channel-mean dot
    product of the left feature with the right feature shifted right by d."""
    if left_feature.data.shape != right_feature.data.shape:
        raise ContractViolationError(
            f"feature shapes differ: {tuple(left_feature.data.shape)} vs "
            f"{tuple(right_feature.data.shape)}"
        )
    if left_feature.scale != right_feature.scale:
        raise ContractViolationError(
            f"scale mismatch: {left_feature.scale} vs {right_feature.scale}"
        )
    if max_displacement < 1:
        raise ContractViolationError(f"max_displacement must be positive, got {max_displacement}")
    vol = _correlation(left_feature.data, right_feature.data, max_displacement)
    return FeatureMap(vol, left_feature.scale)
