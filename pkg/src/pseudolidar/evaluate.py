"""Depth evaluation metrics, scaling policy, and flip-fusion post-processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pseudolidar.geometry import DepthMap, DisparityMap

SCALING_MODES = ("none", "fixed", "median")


@dataclass(frozen=True)
class EvalConfig:
    """Masking range, scaling policy and optional crop for metric computation.

    With stereo training the baseline fixes the scale, so the default is a
    fixed factor (1.0 unless configured); median scaling is kept for parity
    with monocular baselines.  Reports always echo the scaling used.
    """

    min_depth: float = 1e-3
    max_depth: float = 80.0
    scaling: str = "fixed"
    scale_factor: float = 1.0
    crop: tuple[int, int, int, int] | None = None  # (top, bottom, left, right), exclusive

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError(f"need 0 < min_depth < max_depth, got "
                             f"{self.min_depth}, {self.max_depth}")
        if self.scaling not in SCALING_MODES:
            raise ValueError(f"scaling must be one of {SCALING_MODES}, got {self.scaling!r}")

    def describe_scaling(self) -> str:
        if self.scaling == "fixed":
            return f"fixed(x{self.scale_factor})"
        return self.scaling


@dataclass(frozen=True)
class EvalReport:
    """Depth error metrics over the valid pixel set."""

    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    scaling: str = "none"

    def __post_init__(self):
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("delta thresholds must be nested")

    def as_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel, "sq_rel": self.sq_rel, "rmse": self.rmse,
            "rmse_log": self.rmse_log, "delta1": self.delta1, "delta2": self.delta2,
            "delta3": self.delta3, "n_valid": self.n_valid, "scaling": self.scaling,
        }


def apply_scaling(pred: DepthMap, cfg: EvalConfig, gt: DepthMap | None = None) -> DepthMap:
    """Rescale a prediction: identity, fixed factor, or median-ratio to gt."""
    if cfg.scaling == "none":
        return DepthMap(pred.values, pred.valid)
    if cfg.scaling == "fixed":
        return DepthMap(pred.values * cfg.scale_factor, pred.valid)
    if gt is None:
        raise ValueError("median scaling requires ground truth")
    both = pred.valid & gt.valid
    if not both.any():
        raise ValueError("median scaling has no jointly valid pixels")
    ratio = float(np.median(gt.values[both]) / np.median(pred.values[both]))
    return DepthMap(pred.values * ratio, pred.valid)


def compute_metrics(pred: DepthMap, gt: DepthMap, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """KITTI-style depth metrics over gt-valid pixels within the depth range.

    The prediction is scaled per the config, then clamped to
    [min_depth, max_depth] before the error terms (standard practice; it
    changes rmse_log on outliers).
    """
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"pred {pred.values.shape} and gt {gt.values.shape} differ")
    scaled = apply_scaling(pred, cfg, gt)
    mask = gt.valid & scaled.valid & (gt.values >= cfg.min_depth) & (gt.values <= cfg.max_depth)
    if cfg.crop is not None:
        top, bottom, left, right = cfg.crop
        window = np.zeros_like(mask)
        window[top:bottom, left:right] = True
        mask &= window
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels to evaluate")
    g = gt.values[mask]
    p = np.clip(scaled.values[mask], cfg.min_depth, cfg.max_depth)
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return EvalReport(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err ** 2 / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=n,
        scaling=cfg.describe_scaling(),
    )


def _edge_masks(width: int) -> tuple[np.ndarray, np.ndarray]:
    """Blend weights: full weight inside the first 5% of width, ramp to 0 by 10%."""
    xn = np.linspace(0.0, 1.0, width)
    left = 1.0 - np.clip(20.0 * (xn - 0.05), 0.0, 1.0)
    return left, left[::-1]


def post_process_fuse(d: DisparityMap, d_flipped_pass: DisparityMap) -> DisparityMap:
    """Fuse a prediction with the prediction made on the flipped input.

    The second map (still in the flipped frame) is un-flipped first.  The
    left edge band then takes the un-flipped second pass, the right edge
    band the first pass, with linear ramps between 5% and 10% of the width
    and the arithmetic mean in the interior.
    """
    if d.values.shape != d_flipped_pass.values.shape:
        raise ValueError("disparity map shapes differ")
    first = d.values
    second = d_flipped_pass.values[:, ::-1]
    left_w, right_w = _edge_masks(d.width)
    left_w = left_w[None, :]
    right_w = right_w[None, :]
    # mean plus edge corrections: algebraically r*first + l*second + (1-l-r)*mean,
    # written so that fusing a map with itself is exact to the bit
    mean = 0.5 * (first + second)
    fused = mean + right_w * (first - mean) + left_w * (second - mean)
    valid = d.valid & d_flipped_pass.valid[:, ::-1]
    return DisparityMap(fused, valid)
