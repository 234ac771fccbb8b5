"""Objective terms for joint translation + matching training.

Every function is a pure, differentiable map from network outputs to a
scalar tensor.  Reductions are means over pixels/channels so the trade-off
weights stay resolution independent.  Disparity-dependent terms average
over valid, in-bounds pixels only.
"""

import warnings
from dataclasses import dataclass, field

import torch

from .errors import ContractViolationError, NonFiniteValueError
from .geometry import DisparityMap, inverse_warp, rescale_disparity, warp_validity_mask

MS_EPS = 1e-5
MS_CLAMP = 1e5


class DegenerateLossWarning(UserWarning):
    """A loss term had no valid pixels and was defined as zero."""


@dataclass(frozen=True)
class LossWeights:
    """Trade-off factors of the overall objective.

    lambda_ms is the start value of a linear decay reaching exactly zero
    after ms_decay_steps joint-training steps (0 = constant, schedule not
    yet configured).
    """

    lambda_cyc: float = 10.0
    lambda_sm: float = 1.0
    lambda_fx: float = 5.0
    lambda_fy: float = 5.0
    lambda_corr: float = 1.0
    lambda_ms: float = 0.1
    ms_decay_steps: int = 0

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_sm", "lambda_fx", "lambda_fy", "lambda_corr", "lambda_ms"):
            if getattr(self, name) < 0:
                raise ContractViolationError(f"{name} must be non-negative")

    def lambda_ms_at(self, step: int) -> float:
        if self.ms_decay_steps <= 0:
            return self.lambda_ms
        remaining = 1.0 - step / self.ms_decay_steps
        return self.lambda_ms * remaining if remaining > 0 else 0.0


@dataclass
class LossReport:
    """Named component scalars plus the weighted total of the full objective."""

    terms: dict
    total: float
    lambda_ms_effective: float = 0.0
    extras: dict = field(default_factory=dict)


def _mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractViolationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def masked_mean_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor):
    """Mean |a-b| over pixels selected by mask [H,W]; None when mask is empty.

    a and b are [C,H,W] or [H,W]; the mean runs over channels too.
    """
    if a.shape != b.shape:
        raise ContractViolationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    n = int(mask.sum())
    if n == 0:
        return None
    diff = (a - b).abs()
    if diff.dim() == 3:
        diff = diff.mean(dim=0)
    return (diff * mask.to(diff.dtype)).sum() / n


def adversarial_loss(disc_on_real, disc_on_fake, side: str, mode: str = "log"):
    """Adversarial objective over patch logits.

    side="discriminator" returns the value the discriminator maximizes
    (<= 0 in log mode, 0 at the optimum).  side="generator" returns the
    non-saturating value the generator minimizes.  least_squares is an
    optional stability variant with the same orientations.
    """
    if mode not in ("log", "least_squares"):
        raise ContractViolationError(f"unknown adversarial mode {mode!r}")
    if side not in ("discriminator", "generator"):
        raise ContractViolationError(f"unknown adversarial side {side!r}")
    if disc_on_fake is None:
        raise ContractViolationError("fake logits are required")
    if not bool(torch.isfinite(disc_on_fake.detach()).all()):
        raise NonFiniteValueError("fake logits must be finite")
    if side == "discriminator":
        if disc_on_real is None:
            raise ContractViolationError("real logits are required")
        if not bool(torch.isfinite(disc_on_real.detach()).all()):
            raise NonFiniteValueError("real logits must be finite")
        if mode == "log":
            return (
                torch.nn.functional.logsigmoid(disc_on_real).mean()
                + torch.nn.functional.logsigmoid(-disc_on_fake).mean()
            )
        return -(((disc_on_real - 1.0) ** 2).mean() + (disc_on_fake ** 2).mean())
    if mode == "log":
        return -torch.nn.functional.logsigmoid(disc_on_fake).mean()
    return ((disc_on_fake - 1.0) ** 2).mean()


def cycle_loss(x, x_roundtrip, y, y_roundtrip):
    """Sum of the mean-L1 round-trip residuals in both domains."""
    return _mean_l1(x_roundtrip, x) + _mean_l1(y_roundtrip, y)


def stereo_matching_loss(pred, gt: DisparityMap):
    """Mean-L1 disparity regression with halving deep-supervision weights.

    Full-resolution prediction against gt; each coarser pyramid level
    against the rescaled gt at half the previous weight.  Pixels outside
    the (conservatively rescaled) validity mask are excluded.
    """
    if gt.scale != 1:
        raise ContractViolationError("ground truth must be at full resolution")
    total = None
    weight = 1.0
    for level in pred.disparities:
        gt_level = rescale_disparity(gt, level.scale)
        term = masked_mean_l1(level.data, gt_level.data, gt_level.valid)
        if term is not None:
            total = weight * term if total is None else total + weight * term
        weight *= 0.5
    if total is None:
        warnings.warn("stereo matching loss had no valid pixels", DegenerateLossWarning)
        return pred.disparities[0].data.new_zeros(())
    return total


def _reprojection_sum(left_feats, right_feats, disparity_for_scale):
    """Shared Eq-structure of the feature re-projection losses: warp each
    right tap feature and compare to its left counterpart over the valid,
    in-bounds mask."""
    total = None
    degenerate = True
    for left, right in zip(left_feats, right_feats):
        if left.scale != right.scale or left.data.shape != right.data.shape:
            raise ContractViolationError("tap feature lists are not mirrored")
        disp = disparity_for_scale(left.scale)
        if (disp.height, disp.width) != (left.height, left.width):
            raise ContractViolationError(
                f"disparity {disp.height}x{disp.width} does not fit tap {left.height}x{left.width}"
            )
        warped = inverse_warp(right, disp)
        mask = warp_validity_mask(disp, disp.width)
        term = masked_mean_l1(warped.data, left.data, mask)
        if term is not None:
            degenerate = False
            total = term if total is None else total + term
    return total, degenerate


def feature_reprojection_synthetic(
    feats_fwd_left, feats_fwd_right, feats_back_left, feats_back_right, gt: DisparityMap
):
    """Warped-right-equals-left consistency of translator tap features under
    the ground-truth disparity, on both the forward pass and the pass back
    through the cycle; averaged over the tap count."""
    lists = (feats_fwd_left, feats_fwd_right, feats_back_left, feats_back_right)
    taps = len(feats_fwd_left)
    if taps == 0 or any(len(l) != taps for l in lists):
        raise ContractViolationError("tap count mismatch between feature lists")
    if gt.scale != 1:
        raise ContractViolationError("ground-truth disparity must be at full resolution")
    cache = {}

    def disp_at(scale):
        if scale not in cache:
            cache[scale] = rescale_disparity(gt, scale)
        return cache[scale]

    total_f, degen_f = _reprojection_sum(feats_fwd_left, feats_fwd_right, disp_at)
    total_b, degen_b = _reprojection_sum(feats_back_left, feats_back_right, disp_at)
    if degen_f and degen_b:
        warnings.warn("feature re-projection loss had no valid pixels", DegenerateLossWarning)
        return feats_fwd_left[0].data.new_zeros(())
    parts = [t for t in (total_f, total_b) if t is not None]
    return sum(parts) / taps


def feature_reprojection_real(
    feats_fwd_left, feats_fwd_right, feats_back_left, feats_back_right, est,
    allow_resample: bool = True,
):
    """Same structure with the matcher's estimated disparity in place of
    ground truth; the matcher's native pyramid level at each tap scale is
    used directly (resampling the full-resolution estimate only as a
    fallback).  Gradients flow into the estimate."""
    lists = (feats_fwd_left, feats_fwd_right, feats_back_left, feats_back_right)
    taps = len(feats_fwd_left)
    if taps == 0 or any(len(l) != taps for l in lists):
        raise ContractViolationError("tap count mismatch between feature lists")
    cache = {}

    def disp_at(scale):
        if scale in cache:
            return cache[scale]
        try:
            disp = est.at_scale(scale)
        except KeyError:
            if not allow_resample:
                raise ContractViolationError(
                    f"no pyramid level at scale {scale} and resampling disabled"
                )
            disp = rescale_disparity(est.disparities[0], scale)
        cache[scale] = disp
        return disp

    total_f, degen_f = _reprojection_sum(feats_fwd_left, feats_fwd_right, disp_at)
    total_b, degen_b = _reprojection_sum(feats_back_left, feats_back_right, disp_at)
    if degen_f and degen_b:
        warnings.warn("feature re-projection loss had no valid pixels", DegenerateLossWarning)
        return feats_fwd_left[0].data.new_zeros(())
    parts = [t for t in (total_f, total_b) if t is not None]
    return sum(parts) / taps


def correlation_consistency_loss(ref_feats, recon_left_feats, recon_right_feats, recon_both_feats):
    """Mean over matcher aggregation taps of the three reconstructed-pair
    residuals against the original-pair features (summed per tap)."""
    taps = len(ref_feats)
    others = (recon_left_feats, recon_right_feats, recon_both_feats)
    if taps == 0 or any(len(l) != taps for l in others):
        raise ContractViolationError("tap count mismatch between correlation feature lists")
    total = None
    for i in range(taps):
        for feats in others:
            term = _mean_l1(feats[i].data, ref_feats[i].data)
            total = term if total is None else total + term
    return total / taps


def mode_seeking_loss(out1, out2, z1, z2):
    """Latent-to-output L1 distance ratio; minimizing it pushes different
    noise maps toward visibly different translations."""
    num = _mean_l1(z1.data, z2.data)
    den = _mean_l1(out1, out2)
    return (num / (den + MS_EPS)).clamp(max=MS_CLAMP)


def full_objective(terms: dict, weights: LossWeights, step: int) -> LossReport:
    """Weighted sum of the six component terms at the given joint step.

    terms maps {cdt, sm, fx, fy, corr, ms} to scalars; the mode-seeking
    weight is replaced by its decayed value at `step`.
    """
    expected = ("cdt", "sm", "fx", "fy", "corr", "ms")
    missing = [k for k in expected if k not in terms]
    if missing:
        raise ContractViolationError(f"missing objective terms: {missing}")
    lam_ms = weights.lambda_ms_at(step)
    scalars = {
        k: float(terms[k].detach()) if torch.is_tensor(terms[k]) else float(terms[k])
        for k in expected
    }
    total = (
        scalars["cdt"]
        + weights.lambda_sm * scalars["sm"]
        + weights.lambda_fx * scalars["fx"]
        + weights.lambda_fy * scalars["fy"]
        + weights.lambda_corr * scalars["corr"]
        + lam_ms * scalars["ms"]
    )
    return LossReport(terms=scalars, total=total, lambda_ms_effective=lam_ms)
