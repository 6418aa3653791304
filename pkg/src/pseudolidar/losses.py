"""Self-supervised training objective and its analytic disparity gradient.

The objective is total = mu * photometric + lambda * smoothness where the
photometric term is the per-pixel minimum reconstruction error over warped
sources, mu is the auto-mask, and smoothness is the edge-aware penalty on
the mean-normalized disparity.  Reconstructions use the rectified fast path
x' = x + direction * d, so the whole chain has a closed-form derivative
with respect to the disparity field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pseudolidar.geometry import DisparityMap, Intrinsics, StereoRig
from pseudolidar.raster import ImageBuffer, spatial_gradient


@dataclass(frozen=True)
class LossConfig:
    """Weights and window parameters of the training objective."""

    lambda_smooth: float = 0.001
    ssim_weight: float = 0.85  # alpha: SSIM share of the reconstruction error
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    automask_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError(f"ssim_weight must be in [0, 1], got {self.ssim_weight}")
        if self.lambda_smooth < 0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss terms plus the per-pixel masked photometric map."""

    total: float
    photometric: float
    smoothness: float
    masked_fraction: float
    per_pixel_photometric: ImageBuffer


# ---------------------------------------------------------------------------
# box filter with reflection padding, and its exact adjoint

def _reflect_indices(n: int, pad: int) -> np.ndarray:
    if pad >= n:
        raise ValueError(f"image extent {n} too small for window padding {pad}")
    idx = np.abs(np.arange(-pad, n + pad))
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def _box_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over a window x window neighborhood, reflection-padded borders."""
    pad = window // 2
    h, w = x.shape
    padded = x[np.ix_(_reflect_indices(h, pad), _reflect_indices(w, pad))]
    out = np.zeros_like(x)
    for dy in range(window):
        for dx in range(window):
            out += padded[dy : dy + h, dx : dx + w]
    return out / float(window * window)


def _box_filter_adjoint(g: np.ndarray, window: int) -> np.ndarray:
    """Adjoint of _box_filter (scatter back through the reflected padding)."""
    pad = window // 2
    h, w = g.shape
    gp = np.zeros((h + 2 * pad, w + 2 * pad))
    for dy in range(window):
        for dx in range(window):
            gp[dy : dy + h, dx : dx + w] += g
    gp /= float(window * window)
    out = np.zeros((h, w))
    iy = _reflect_indices(h, pad)
    ix = _reflect_indices(w, pad)
    np.add.at(out, (iy[:, None], ix[None, :]), gp)
    return out


# ---------------------------------------------------------------------------
# SSIM and reconstruction error

def _ssim_channel(a: np.ndarray, b: np.ndarray, cfg: LossConfig) -> dict:
    """Windowed SSIM of one channel; returns the map plus backward cache."""
    mu_a = _box_filter(a, cfg.ssim_window)
    mu_b = _box_filter(b, cfg.ssim_window)
    e_ab = _box_filter(a * b, cfg.ssim_window)
    e_a2 = _box_filter(a * a, cfg.ssim_window)
    e_b2 = _box_filter(b * b, cfg.ssim_window)
    n1 = 2.0 * mu_a * mu_b + cfg.ssim_c1
    n2 = 2.0 * (e_ab - mu_a * mu_b) + cfg.ssim_c2
    d1 = mu_a * mu_a + mu_b * mu_b + cfg.ssim_c1
    d2 = (e_a2 - mu_a * mu_a) + (e_b2 - mu_b * mu_b) + cfg.ssim_c2
    return {"ssim": (n1 * n2) / (d1 * d2), "mu_a": mu_a, "mu_b": mu_b,
            "n1": n1, "n2": n2, "d1": d1, "d2": d2, "a": a, "b": b}


def _ssim_backward_b(cache: dict, g_ssim: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Gradient of sum(g_ssim * SSIM) with respect to the second image b."""
    mu_a, mu_b = cache["mu_a"], cache["mu_b"]
    n1, n2, d1, d2 = cache["n1"], cache["n2"], cache["d1"], cache["d2"]
    s = cache["ssim"]
    dd = d1 * d2
    # partials of SSIM w.r.t. the box-filter outputs mu_b, E[b^2], E[ab]
    g_mu_b = g_ssim * ((2.0 * mu_a * (n2 - n1)) / dd - s * 2.0 * mu_b * (1.0 / d1 - 1.0 / d2))
    g_e_b2 = g_ssim * (-s / d2)
    g_e_ab = g_ssim * (2.0 * n1 / dd)
    g_b = _box_filter_adjoint(g_mu_b, cfg.ssim_window)
    g_b += 2.0 * cache["b"] * _box_filter_adjoint(g_e_b2, cfg.ssim_window)
    g_b += cache["a"] * _box_filter_adjoint(g_e_ab, cfg.ssim_window)
    return g_b


def ssim(a: ImageBuffer, b: ImageBuffer, cfg: LossConfig = LossConfig()) -> ImageBuffer:
    """Per-pixel, per-channel windowed SSIM in [-1, 1]."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    out = np.stack(
        [_ssim_channel(a.data[:, :, c], b.data[:, :, c], cfg)["ssim"] for c in range(a.channels)],
        axis=-1,
    )
    return ImageBuffer(out)


def _re_forward(target: np.ndarray, recon: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, list]:
    """Per-pixel reconstruction error alpha/2*(1-SSIM) + (1-alpha)*L1, with cache."""
    caches = [_ssim_channel(target[:, :, c], recon[:, :, c], cfg) for c in range(target.shape[2])]
    ssim_mean = np.mean([c["ssim"] for c in caches], axis=0)
    l1_mean = np.mean(np.abs(target - recon), axis=2)
    alpha = cfg.ssim_weight
    return 0.5 * alpha * (1.0 - ssim_mean) + (1.0 - alpha) * l1_mean, caches


def _re_backward_recon(target: np.ndarray, recon: np.ndarray, caches: list,
                       g_re: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Gradient of sum(g_re * RE) with respect to the reconstruction, per channel."""
    channels = target.shape[2]
    alpha = cfg.ssim_weight
    g_recon = (1.0 - alpha) / channels * g_re[:, :, None] * np.sign(recon - target)
    g_ssim = -0.5 * alpha / channels * g_re
    for c in range(channels):
        g_recon[:, :, c] += _ssim_backward_b(caches[c], g_ssim, cfg)
    return g_recon


def reconstruction_error(target: ImageBuffer, recon: ImageBuffer,
                         cfg: LossConfig = LossConfig()) -> ImageBuffer:
    """Per-pixel error mixing (1 - SSIM)/2 and mean-channel L1 by ssim_weight."""
    if target.data.shape != recon.data.shape:
        raise ValueError(f"image shapes differ: {target.data.shape} vs {recon.data.shape}")
    re, _ = _re_forward(target.data, recon.data, cfg)
    return ImageBuffer(re)


def reprojection_loss(target: ImageBuffer,
                      reconstructions: Sequence[tuple[ImageBuffer, np.ndarray]],
                      cfg: LossConfig = LossConfig()) -> tuple[ImageBuffer, np.ndarray]:
    """Per-pixel minimum RE over valid reconstructions.

    Returns the min map plus the mask of pixels valid in at least one
    reconstruction; the map is 0 where no reconstruction is valid.
    """
    if not reconstructions:
        raise ValueError("need at least one reconstruction")
    stack = []
    for recon, valid in reconstructions:
        re, _ = _re_forward(target.data, recon.data, cfg)
        stack.append(np.where(valid, re, np.inf))
    best = np.min(stack, axis=0)
    any_valid = np.isfinite(best)
    return ImageBuffer(np.where(any_valid, best, 0.0)), any_valid


def auto_mask(target: ImageBuffer, warped_sources: Sequence[ImageBuffer],
              raw_sources: Sequence[ImageBuffer], cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Mask of pixels where the best warped source beats the best raw source."""
    if not cfg.automask_enabled:
        return np.ones((target.height, target.width), dtype=bool)
    warped_best = np.min([_re_forward(target.data, w.data, cfg)[0] for w in warped_sources], axis=0)
    raw_best = np.min([_re_forward(target.data, r.data, cfg)[0] for r in raw_sources], axis=0)
    return warped_best < raw_best


# ---------------------------------------------------------------------------
# edge-aware smoothness

def _smoothness_terms(disp_values: np.ndarray, target: ImageBuffer):
    gx_img, gy_img = spatial_gradient(target)
    ex = np.exp(-np.mean(np.abs(gx_img.data), axis=2))
    ey = np.exp(-np.mean(np.abs(gy_img.data), axis=2))
    dx = np.zeros_like(disp_values)
    dy = np.zeros_like(disp_values)
    dx[:, :-1] = disp_values[:, 1:] - disp_values[:, :-1]
    dy[:-1, :] = disp_values[1:, :] - disp_values[:-1, :]
    return dx, dy, ex, ey


def smoothness_loss(disparity: DisparityMap, target: ImageBuffer) -> float:
    """Mean edge-aware gradient penalty on mean-normalized disparity.

    Invariant under positive scaling of the disparity; raises on a zero-mean
    (identically zero) field where the normalization is undefined.
    """
    if (disparity.width, disparity.height) != (target.width, target.height):
        raise ValueError("disparity and target resolutions differ")
    m = float(disparity.values.mean())
    if m <= 0.0:
        raise ValueError("smoothness undefined for zero-mean disparity")
    dx, dy, ex, ey = _smoothness_terms(disparity.values, target)
    return float(np.mean((np.abs(dx) * ex + np.abs(dy) * ey)) / m)


def _smoothness_gradient(disparity: DisparityMap, target: ImageBuffer) -> np.ndarray:
    """d(smoothness_loss)/d(disparity), including the mean-normalization path."""
    vals = disparity.values
    m = float(vals.mean())
    if m <= 0.0:
        return np.zeros_like(vals)
    dx, dy, ex, ey = _smoothness_terms(vals, target)
    sx = np.sign(dx) * ex
    sy = np.sign(dy) * ey
    n = vals.size
    g = np.zeros_like(vals)
    g[:, :-1] -= sx[:, :-1]
    g[:, 1:] += sx[:, :-1]
    g[:-1, :] -= sy[:-1, :]
    g[1:, :] += sy[:-1, :]
    total = float(np.sum(np.abs(dx) * ex + np.abs(dy) * ey))
    return g / (m * n) - total / (m * m * n * n)


# ---------------------------------------------------------------------------
# full objective on the rectified fast path

def _warp_with_slope(source: np.ndarray, disp_values: np.ndarray, direction: int):
    """Horizontal warp x' = x + direction*d with the per-pixel sampling slope.

    Returns (warped, slope, in_frame): slope is dI/dx' of the linear
    interpolant, zeroed outside the frame where the clamp makes the sample
    constant in d.
    """
    h, w = disp_values.shape
    xs = np.arange(w)[None, :] + direction * disp_values
    in_frame = (xs >= 0) & (xs <= w - 1)
    xc = np.clip(xs, 0.0, w - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    fx = (xc - x0)[:, :, None]
    rows = np.arange(h)[:, None]
    v0 = source[rows, x0]
    v1 = source[rows, x1]
    warped = (1.0 - fx) * v0 + fx * v1
    slope = np.where(in_frame[:, :, None], v1 - v0, 0.0)
    return warped, slope, in_frame


def _check_consistent(target: ImageBuffer, disparity: DisparityMap,
                      sources: Sequence[ImageBuffer], rig: StereoRig, K: Intrinsics,
                      directions: Sequence[int] | None) -> list[int]:
    if not sources:
        raise ValueError("need at least one source image")
    dirs = list(directions) if directions is not None else [-1] * len(sources)
    if len(dirs) != len(sources):
        raise ValueError(f"{len(dirs)} directions for {len(sources)} sources")
    shape = (target.height, target.width)
    if (disparity.height, disparity.width) != shape:
        raise ValueError("disparity resolution does not match target")
    for s in sources:
        if (s.height, s.width) != shape or s.channels != target.channels:
            raise ValueError("source resolution or channel count does not match target")
    if (K.width, K.height) != (target.width, target.height):
        raise ValueError("intrinsics reference resolution does not match target")
    return dirs


def _objective_forward(target: ImageBuffer, disparity: DisparityMap,
                       sources: Sequence[ImageBuffer], rig: StereoRig, K: Intrinsics,
                       cfg: LossConfig, directions: Sequence[int] | None):
    dirs = _check_consistent(target, disparity, sources, rig, K, directions)
    h, w = target.height, target.width
    warped, slopes, re_maps, re_caches, valids = [], [], [], [], []
    for src, direction in zip(sources, dirs):
        wv, slope, in_frame = _warp_with_slope(src.data, disparity.values, direction)
        re, caches = _re_forward(target.data, wv, cfg)
        warped.append(wv)
        slopes.append(slope)
        re_maps.append(re)
        re_caches.append(caches)
        valids.append(disparity.valid & in_frame)

    if cfg.automask_enabled:
        raw_best = np.min([_re_forward(target.data, s.data, cfg)[0] for s in sources], axis=0)
        mu = np.min(re_maps, axis=0) < raw_best
    else:
        mu = np.ones((h, w), dtype=bool)

    masked_stack = np.stack([np.where(v, re, np.inf) for re, v in zip(re_maps, valids)])
    best = masked_stack.min(axis=0)
    argmin = masked_stack.argmin(axis=0)
    any_valid = np.isfinite(best)
    include = any_valid & mu
    m_count = int(include.sum())
    photometric = float(best[include].sum() / m_count) if m_count else 0.0

    if disparity.values.mean() > 0.0:
        smooth = smoothness_loss(disparity, target)
    else:
        smooth = 0.0  # identically zero disparity is constant, gradients vanish

    per_pixel = np.where(include, best, 0.0)
    breakdown = LossBreakdown(
        total=photometric + cfg.lambda_smooth * smooth,
        photometric=photometric,
        smoothness=smooth,
        masked_fraction=1.0 - m_count / (h * w),
        per_pixel_photometric=ImageBuffer(per_pixel),
    )
    cache = {"dirs": dirs, "slopes": slopes, "warped": warped, "re_caches": re_caches,
             "argmin": argmin, "include": include, "m_count": m_count}
    return breakdown, cache


def total_loss(target: ImageBuffer, disparity: DisparityMap, sources: Sequence[ImageBuffer],
               rig: StereoRig, K: Intrinsics, cfg: LossConfig = LossConfig(),
               directions: Sequence[int] | None = None) -> LossBreakdown:
    """Full objective: auto-masked min-reprojection error plus weighted smoothness."""
    breakdown, _ = _objective_forward(target, disparity, sources, rig, K, cfg, directions)
    return breakdown


def loss_gradient(target: ImageBuffer, disparity: DisparityMap, sources: Sequence[ImageBuffer],
                  rig: StereoRig, K: Intrinsics, cfg: LossConfig = LossConfig(),
                  directions: Sequence[int] | None = None) -> ImageBuffer:
    """Analytic d(total)/d(disparity) per pixel.

    The auto-mask, the valid set, and the per-pixel source selection are
    treated as constants (straight-through); the chain runs through the
    horizontal sampling slope, the SSIM/L1 error, and the normalized
    smoothness term.
    """
    breakdown, cache = _objective_forward(target, disparity, sources, rig, K, cfg, directions)
    h, w = target.height, target.width
    g_disp = np.zeros((h, w))
    if cache["m_count"]:
        g_re_scale = 1.0 / cache["m_count"]
        for idx, (slope, caches, direction) in enumerate(
            zip(cache["slopes"], cache["re_caches"], cache["dirs"])
        ):
            g_re = np.where(cache["include"] & (cache["argmin"] == idx), g_re_scale, 0.0)
            if not g_re.any():
                continue
            g_recon = _re_backward_recon(target.data, cache["warped"][idx], caches, g_re, cfg)
            g_disp += direction * np.sum(g_recon * slope, axis=2)
    if cfg.lambda_smooth > 0.0:
        g_disp += cfg.lambda_smooth * _smoothness_gradient(disparity, target)
    return ImageBuffer(g_disp)
