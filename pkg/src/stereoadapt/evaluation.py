"""Disparity metrics and dataset-level evaluation reports.

All rates use strict inequality at their thresholds (ties are not
erroneous).  D1 combines the 3-px and 5%-of-gt conditions with "and" by
default (benchmark convention); "or" is available as an explicit mode.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import torch

from .errors import ContractViolationError, EmptyMaskError, StartupError
from .geometry import DisparityMap

METRIC_COLUMNS = ("d1", "epe", "gt2", "gt4", "gt5")
COLUMN_TITLES = {"d1": "D1-all (%)", "epe": "EPE", "gt2": ">2px (%)", "gt4": ">4px (%)", "gt5": ">5px (%)"}


def _check_inputs(pred: DisparityMap, gt: DisparityMap, mask: torch.Tensor):
    if pred.data.shape != gt.data.shape:
        raise ContractViolationError(
            f"pred {tuple(pred.data.shape)} vs gt {tuple(gt.data.shape)}"
        )
    if mask.shape != gt.data.shape or mask.dtype != torch.bool:
        raise ContractViolationError("mask must be boolean and match the disparity shape")
    if bool((mask & ~gt.valid).any()):
        raise ContractViolationError("mask must be a subset of the gt validity mask")
    if int(mask.sum()) == 0:
        raise EmptyMaskError("no pixels selected; metric undefined")


def epe(pred: DisparityMap, gt: DisparityMap, mask: torch.Tensor) -> float:
    """Mean absolute disparity error over the masked pixels."""
    _check_inputs(pred, gt, mask)
    err = (pred.data.double() - gt.data.double()).abs()
    return float(err[mask].sum()) / int(mask.sum())


def bad_pixel_rate(pred: DisparityMap, gt: DisparityMap, mask: torch.Tensor,
                   threshold_px: float) -> float:
    """Percentage of masked pixels with |error| strictly above the threshold."""
    if threshold_px <= 0:
        raise ContractViolationError(f"threshold must be positive, got {threshold_px}")
    _check_inputs(pred, gt, mask)
    err = (pred.data.double() - gt.data.double()).abs()
    return 100.0 * int((err[mask] > threshold_px).sum()) / int(mask.sum())


def _d1_wrong(err: torch.Tensor, gt_data: torch.Tensor, combine: str) -> torch.Tensor:
    if combine == "and":
        return (err > 3.0) & (err > 0.05 * gt_data)
    if combine == "or":
        return (err > 3.0) | (err > 0.05 * gt_data)
    raise ContractViolationError(f"combine must be 'and' or 'or', got {combine!r}")


def d1_all(pred: DisparityMap, gt: DisparityMap, mask: torch.Tensor,
           combine: str = "and") -> float:
    """Percentage of pixels wrong by more than 3 px combined with 5% of gt."""
    if combine not in ("and", "or"):
        raise ContractViolationError(f"combine must be 'and' or 'or', got {combine!r}")
    _check_inputs(pred, gt, mask)
    err = (pred.data.double() - gt.data.double()).abs()
    wrong = _d1_wrong(err, gt.data.double(), combine)
    return 100.0 * int(wrong[mask].sum()) / int(mask.sum())


@dataclass
class EvalReport:
    """Per-metric results for All pixels and (when masks exist) Noc pixels,
    plus timing; mirrors the standard benchmark column layout."""

    all_pixels: dict
    noc_pixels: dict = None
    seconds_per_pair: float = 0.0
    sample_count: int = 0
    d1_combine: str = "and"
    tag: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "all": self.all_pixels,
            "noc": self.noc_pixels,
            "seconds_per_pair": self.seconds_per_pair,
            "sample_count": self.sample_count,
            "d1_combine": self.d1_combine,
            "tag": self.tag,
            "extras": self.extras,
        }


class _Accumulator:
    """Aggregates pixel-weighted error statistics across a dataset."""

    def __init__(self, d1_combine: str):
        self.combine = d1_combine
        self.count = 0
        self.abs_sum = 0.0
        self.wrong = {k: 0 for k in ("d1", "gt2", "gt4", "gt5")}

    def add(self, pred: DisparityMap, gt: DisparityMap, mask: torch.Tensor):
        n = int(mask.sum())
        if n == 0:
            return
        err = (pred.data.double() - gt.data.double()).abs()
        self.count += n
        self.abs_sum += float(err[mask].sum())
        self.wrong["d1"] += int(_d1_wrong(err, gt.data.double(), self.combine)[mask].sum())
        for key, thr in (("gt2", 2.0), ("gt4", 4.0), ("gt5", 5.0)):
            self.wrong[key] += int((err[mask] > thr).sum())

    def result(self):
        if self.count == 0:
            raise EmptyMaskError("no valid pixels in the whole dataset")
        out = {"epe": self.abs_sum / self.count}
        for key, wrong in self.wrong.items():
            out[key] = 100.0 * wrong / self.count
        return out


def evaluate(predictor, dataset, report_path=None, d1_combine: str = "and",
             tag: str = "", min_timing_runs: int = 20) -> EvalReport:
    """Run the predictor over every sample and aggregate all metrics.

    predictor: callable (left, right) -> DisparityMap at full resolution.
    Noc columns appear when every sample carries a non-occlusion mask.
    Timing is the median over at least min_timing_runs warm inferences.
    """
    n = len(dataset)
    if n == 0:
        raise StartupError("evaluation dataset is empty")
    samples = [dataset.load(i) for i in range(n)]
    if any(s.disparity is None for s in samples):
        raise StartupError("evaluation requires ground-truth disparity on every sample")
    use_noc = all(s.noc_mask is not None for s in samples)

    acc_all = _Accumulator(d1_combine)
    acc_noc = _Accumulator(d1_combine) if use_noc else None
    predictor(samples[0].left, samples[0].right)  # warm-up, not timed
    timings = []
    preds = []
    for s in samples:
        t0 = time.perf_counter()
        pred = predictor(s.left, s.right)
        timings.append(time.perf_counter() - t0)
        preds.append(pred)
        acc_all.add(pred, s.disparity, s.disparity.valid)
        if use_noc:
            acc_noc.add(pred, s.disparity, s.disparity.valid & s.noc_mask)
    i = 0
    while len(timings) < min_timing_runs:
        s = samples[i % n]
        t0 = time.perf_counter()
        predictor(s.left, s.right)
        timings.append(time.perf_counter() - t0)
        i += 1

    report = EvalReport(
        all_pixels=acc_all.result(),
        noc_pixels=acc_noc.result() if use_noc else None,
        seconds_per_pair=median(timings),
        sample_count=n,
        d1_combine=d1_combine,
        tag=tag,
    )
    if report_path is not None:
        write_report(report, report_path)
    return report


def format_report_table(report: EvalReport) -> str:
    """Render the report as a fixed-width text table (Noc/All per metric)."""
    headers, cells = [], []
    for key in METRIC_COLUMNS:
        for mask_name, metrics in (("Noc", report.noc_pixels), ("All", report.all_pixels)):
            headers.append(f"{COLUMN_TITLES[key]} {mask_name}")
            if metrics is None:
                cells.append("-")
            else:
                cells.append(f"{metrics[key]:.3f}" if key == "epe" else f"{metrics[key]:.2f}")
    headers.append("Time (s)")
    cells.append(f"{report.seconds_per_pair:.3f}")
    name = report.tag or "model"
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    head = " | ".join(h.rjust(w) for h, w in zip(headers, widths))
    row = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    label_w = max(len("Method"), len(name))
    return (
        f"{'Method'.ljust(label_w)} | {head}\n"
        f"{'-' * label_w}-+-{'-'.join('-' * w for w in widths)}\n"
        f"{name.ljust(label_w)} | {row}\n"
    )


def write_report(report: EvalReport, path) -> None:
    """Emit the machine-readable record and the formatted table side by side."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    path.with_suffix(".txt").write_text(format_report_table(report))
