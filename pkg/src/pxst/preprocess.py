"""Scan preprocessing: whitefield estimation, bad-pixel masking, ROI guess."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.ndimage import median_filter

from .data_model import PixelMask, Roi, ScanData, Whitefield

# Bad-pixel threshold: robust z-scores above KAPPA mark gross outliers only;
# finer cleanup is an interactive job for the mask editor.
KAPPA = 10.0
MAD_FLOOR = 1.0


def lower_median(stack: np.ndarray, axis: int = 0) -> np.ndarray:
    """Median as an order statistic: for even counts, the lower middle value."""
    n = stack.shape[axis]
    k = (n - 1) // 2
    part = np.partition(stack, k, axis=axis)
    return np.take(part, k, axis=axis)


def make_whitefield(scan: ScanData, mask: PixelMask | None = None) -> Whitefield:
    """Per-pixel median over the good frames.

    The median of an even number of samples is the lower middle element, so
    the result is always an actually recorded value. Masked pixels are set
    to zero.
    """
    good = scan.good_indices()
    if good.size == 0:
        raise ValueError("make_whitefield: no good frames")
    w = lower_median(scan.frames[good], axis=0).astype(np.float64)
    if mask is not None:
        w = np.where(mask.mask, w, 0.0)
    return Whitefield(w)


def make_mask(scan: ScanData, kappa: float = KAPPA, mad_floor: float = MAD_FLOOR) -> PixelMask:
    """Flag pixels that deviate persistently from their neighbourhood.

    Per pixel, the temporal median ``m`` and temporal MAD are computed over
    the good frames, then smoothed with a 3x3 spatial median to give the
    neighbourhood statistics. A pixel is bad when the median over frames of
    ``|I - m_nb| / (MAD_nb + mad_floor)`` exceeds ``kappa``. Both statistics
    shift with a constant offset of the data, so the flags are invariant
    under adding a constant to every sample.
    """
    good = scan.good_indices()
    frames = scan.frames[good].astype(np.float64)
    if frames.shape[0] < 3:
        warnings.warn("make_mask: fewer than 3 good frames; returning all-good mask")
        return PixelMask(np.ones(scan.shape, dtype=bool))

    m = lower_median(frames, axis=0)
    mad = lower_median(np.abs(frames - m[None]), axis=0)
    m_nb = median_filter(m, size=3, mode="nearest")
    mad_nb = median_filter(mad, size=3, mode="nearest")
    score = lower_median(np.abs(frames - m_nb[None]), axis=0) / (mad_nb + mad_floor)
    return PixelMask(score <= kappa)


def _axis_window(marginal: np.ndarray, fraction: float) -> tuple[int, int]:
    """Smallest half-open window keeping each discarded tail <= (1-f)/2."""
    total = float(marginal.sum())
    if total <= 0:
        raise ValueError("guess_roi: signal is all zero")
    budget = 0.5 * (1.0 - fraction) * total
    cum = np.concatenate([[0.0], np.cumsum(marginal)])
    # cum[a] is the signal strictly before index a; keep it within budget.
    lo = int(np.searchsorted(cum, budget, side="right")) - 1
    hi_tail = total - cum
    hi = int(len(marginal) - (np.searchsorted(hi_tail[::-1], budget, side="right") - 1))
    lo = max(lo, 0)
    hi = min(max(hi, lo + 1), len(marginal))
    return lo, hi


def guess_roi(w: Whitefield, fraction: float = 0.95) -> Roi:
    """Rectangle containing at least ``fraction`` of the whitefield signal.

    Computed per axis from cumulative marginals: each trimmed tail holds at
    most ``(1 - fraction) / 2`` of that axis's total, so larger fractions
    always give nested, larger regions and ``fraction=1`` keeps the full
    support of the nonzero signal.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    arr = np.asarray(w.w, dtype=np.float64)
    ss_lo, ss_hi = _axis_window(arr.sum(axis=1), fraction)
    fs_lo, fs_hi = _axis_window(arr.sum(axis=0), fraction)
    return Roi(ss_lo, ss_hi, fs_lo, fs_hi)
