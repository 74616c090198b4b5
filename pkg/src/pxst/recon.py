"""Iterative minimisation of the normalized frame-matching error.

One iteration of the main loop (i) merges all frames into the reference
image, (ii) refines the pixel map by brute-force search around the current
estimate, (iii) refines the per-frame sample translations the same way, and
(iv) decomposes the resulting error over frames, detector pixels and the
reference plane. Steps are pure functions of their inputs; the driver
:func:`run_main_loop` sequences them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import integration, interp
from .data_model import (
    ErrorMetrics,
    Geometry,
    PixelMap,
    PixelMask,
    PixelTranslations,
    ReferenceImage,
    Roi,
    ScanData,
    Whitefield,
)

# Relative floor applied to per-pixel intensity variances before dividing.
VAR_EPS_REL = 1e-8


@dataclass(frozen=True)
class SearchWindow:
    """Brute-force search extent around the current estimate, in pixels."""

    half_ss: int = 4
    half_fs: int = 4
    subpixel_grid: float | None = None

    def __post_init__(self):
        if self.half_ss < 0 or self.half_fs < 0:
            raise ValueError("search window halves must be >= 0")
        if self.subpixel_grid is not None and not 0 < self.subpixel_grid <= 1:
            raise ValueError("subpixel_grid step must be in (0, 1]")

    def offsets(self, axis: int) -> np.ndarray:
        half = self.half_ss if axis == 0 else self.half_fs
        if self.subpixel_grid is None:
            return np.arange(-half, half + 1, dtype=np.float64)
        step = self.subpixel_grid
        k = int(round(half / step))
        return step * np.arange(-k, k + 1, dtype=np.float64)


@dataclass(frozen=True)
class UpdateOptions:
    """Knobs of the pixel-map update step.

    ``quadratic_refinement`` fits a paraboloid to the 3x3 error patch around
    the integer minimum; ``integrate`` projects the map onto the nearest
    curl-free field; ``sigma`` Gaussian-smooths the displacement field
    (0 disables). The incumbent estimate is always part of the candidate
    set, so the selected error can never exceed the current one.
    """

    quadratic_refinement: bool = True
    integrate: bool = False
    sigma: float = 0.0
    include_current: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _work_set(scan: ScanData, w: Whitefield, m: PixelMask, roi: Roi | None,
              frame_weights: np.ndarray | None = None):
    """Flatten the good-frame / good-pixel working set."""
    roi = roi or Roi.full(scan.shape)
    sl = roi.slices
    good = scan.good_indices()
    mask = m.mask[sl] & (w.w[sl] > 0)
    idx_ss, idx_fs = np.nonzero(mask)
    idx_ss = idx_ss + roi.ss_min
    idx_fs = idx_fs + roi.fs_min
    intensities = scan.frames[good][:, idx_ss, idx_fs].astype(np.float64)
    whitefield = w.w[idx_ss, idx_fs].astype(np.float64)
    weights = None
    if frame_weights is not None:
        weights = np.asarray(frame_weights, dtype=np.float64)[good][:, idx_ss, idx_fs]
    return good, idx_ss, idx_fs, intensities, whitefield, weights


def make_reference(
    scan: ScanData,
    w: Whitefield,
    m: PixelMask,
    u: PixelMap,
    t: PixelTranslations,
    roi: Roi | None = None,
    geom: Geometry | None = None,
) -> ReferenceImage:
    """Merge all good frames into the reference-plane image.

    Every good sample deposits ``I / W`` at ``u - delta`` with weight
    ``W**2`` (bilinear scatter), and the accumulated values are normalized
    by the accumulated weights, i.e. each cell is the W**2-weighted mean of
    the whitefield-corrected intensities mapped onto it.
    """
    good, _, _, intens, wf, _ = _work_set(scan, w, m, roi)
    if intens.size == 0:
        raise ValueError("make_reference: empty good pixel/frame set")
    roi_ = roi or Roi.full(scan.shape)
    sl = roi_.slices
    mask = m.mask[sl] & (w.w[sl] > 0)
    u0 = u.u[0][sl][mask]
    u1 = u.u[1][sl][mask]
    di = t.di[good]
    dj = t.dj[good]

    cx_min = u0.min() - di.max()
    cx_max = u0.max() - di.min()
    cy_min = u1.min() - dj.max()
    cy_max = u1.max() - dj.min()
    n0 = int(math.floor(cx_min))
    m0 = int(math.floor(cy_min))
    shape = (int(math.floor(cx_max)) - n0 + 2, int(math.floor(cy_max)) - m0 + 2)

    acc = interp.WeightedAccumulator.zeros(shape)
    ratio = intens / wf[None, :]
    w2 = wf * wf
    for k in range(len(good)):
        interp.scatter_accumulate(acc, u0 - di[k] - n0, u1 - dj[k] - m0, ratio[k], w2)
    i_ref, _ = interp.normalize(acc)
    du, dv = (geom.du, geom.dv) if geom is not None else (1.0, 1.0)
    return ReferenceImage(i_ref=i_ref, wsum=acc.weights, origin=(n0, m0), du=du, dv=dv)


def _candidate_errors(ref, u0, u1, di, dj, intens, wf, fw, offs_ss, offs_fs, threads=1):
    """Error stack [n_ss, n_fs, P] of the brute-force pixel-map search."""
    n0, m0 = ref.origin
    valid_ref = ref.valid
    base_x = u0[None, :] - di[:, None] - n0
    base_y = u1[None, :] - dj[:, None] - m0
    fallback = (intens - wf[None, :]) ** 2
    if fw is not None:
        fallback = fw * fallback
    errs = np.empty((len(offs_ss), len(offs_fs), u0.size), dtype=np.float64)

    def eval_cell(a_idx, b_idx):
        vals, ok = interp.gather(ref.i_ref, valid_ref,
                                 base_x + offs_ss[a_idx], base_y + offs_fs[b_idx])
        resid = (intens - wf[None, :] * vals) ** 2
        if fw is not None:
            resid = fw * resid
        errs[a_idx, b_idx] = np.where(ok, resid, fallback).sum(axis=0)

    cells = [(a, b) for a in range(len(offs_ss)) for b in range(len(offs_fs))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda ab: eval_cell(*ab), cells))
    else:
        for a, b in cells:
            eval_cell(a, b)
    return errs


def quadratic_subpixel_refine(err3x3: np.ndarray) -> tuple[float, float]:
    """Sub-pixel offset of the minimum of a 3x3 error patch.

    Least-squares paraboloid fit; the offset is clamped to [-1, 1] per axis
    and (0, 0) is returned when the fitted Hessian is not positive definite.
    """
    dss, dfs = _refine_batch(np.asarray(err3x3, dtype=np.float64)[None])
    return float(dss[0]), float(dfs[0])


def _refine_batch(patches: np.ndarray):
    """Vectorized paraboloid refinement for patches of shape [P, 3, 3]."""
    x = np.array([-1.0, 0.0, 1.0])
    xs = x[:, None] * np.ones((1, 3))
    ys = np.ones((3, 1)) * x[None, :]
    e = patches.reshape(len(patches), 9)
    X = xs.ravel()
    Y = ys.ravel()
    s0 = e.sum(axis=1)
    sx = e @ X
    sy = e @ Y
    sxx = e @ (X * X)
    syy = e @ (Y * Y)
    sxy = e @ (X * Y)
    b = sx / 6.0
    c = sy / 6.0
    f = sxy / 4.0
    d = (-2.0 * s0 + 3.0 * sxx) / 6.0
    g = (-2.0 * s0 + 3.0 * syy) / 6.0
    det = 4.0 * d * g - f * f
    pd = (d > 0) & (det > 0)
    safe = np.where(pd, det, 1.0)
    dss = np.where(pd, (-2.0 * g * b + f * c) / safe, 0.0)
    dfs = np.where(pd, (-2.0 * d * c + f * b) / safe, 0.0)
    return np.clip(dss, -1.0, 1.0), np.clip(dfs, -1.0, 1.0)


def _smooth_displacement(disp: np.ndarray, support: np.ndarray, sigma: float) -> np.ndarray:
    """Mask-aware Gaussian smoothing of a displacement component."""
    weight = support.astype(np.float64)
    num = gaussian_filter(disp * weight, sigma, mode="nearest")
    den = gaussian_filter(weight, sigma, mode="nearest")
    out = disp.copy()
    ok = support & (den > 0)
    out[ok] = num[ok] / den[ok]
    return out


def update_pixel_map(
    scan: ScanData,
    w: Whitefield,
    m: PixelMask,
    ref: ReferenceImage,
    u: PixelMap,
    t: PixelTranslations,
    win: SearchWindow,
    opts: UpdateOptions = UpdateOptions(),
    roi: Roi | None = None,
    frame_weights: np.ndarray | None = None,
    threads: int = 1,
):
    """Brute-force refinement of the pixel map against the reference.

    For every good pixel the normalized error is evaluated on an offset grid
    centred on the current estimate (so the incumbent is always a candidate)
    and the argmin is kept. Frames whose mapped reference sample is invalid
    contribute their variance term, making them neutral under the
    normalization. Optional stages: paraboloid sub-pixel refinement,
    mask-aware Gaussian smoothing of the displacement, and projection onto
    the nearest curl-free field.

    Returns ``(PixelMap, per_pixel_error)`` where the error is the selected
    candidate's normalized error embedded in a full-frame array.
    """
    good, idx_ss, idx_fs, intens, wf, fw = _work_set(scan, w, m, roi, frame_weights)
    u0 = u.u[0][idx_ss, idx_fs]
    u1 = u.u[1][idx_ss, idx_fs]
    di = t.di[good]
    dj = t.dj[good]

    offs_ss = win.offsets(0)
    offs_fs = win.offsets(1)
    errs = _candidate_errors(ref, u0, u1, di, dj, intens, wf, fw, offs_ss, offs_fs, threads)

    fallback = (intens - wf[None, :]) ** 2
    if fw is not None:
        fallback = fw * fallback
    var = fallback.sum(axis=0)
    active = var > 0
    var_safe = np.where(active, var, 1.0)
    errs /= var_safe[None, None, :]

    na, nb, npix = errs.shape
    flat = errs.reshape(na * nb, npix)
    best = flat.argmin(axis=0)
    ia, ib = np.unravel_index(best, (na, nb))
    best_err = flat[best, np.arange(npix)]

    shift_ss = offs_ss[ia]
    shift_fs = offs_fs[ib]
    if opts.quadratic_refinement and win.subpixel_grid is None and na >= 3 and nb >= 3:
        interior = (ia > 0) & (ia < na - 1) & (ib > 0) & (ib < nb - 1) & active
        if interior.any():
            pidx = np.flatnonzero(interior)
            off = np.arange(-1, 2)
            patches = errs[
                (ia[pidx, None, None] + off[None, :, None]),
                (ib[pidx, None, None] + off[None, None, :]),
                pidx[:, None, None],
            ]
            dss, dfs = _refine_batch(patches)
            shift_ss = shift_ss.copy()
            shift_fs = shift_fs.copy()
            shift_ss[pidx] += dss
            shift_fs[pidx] += dfs

    # Static pixels (zero variance) keep the incumbent estimate.
    shift_ss = np.where(active, shift_ss, 0.0)
    shift_fs = np.where(active, shift_fs, 0.0)
    best_err = np.where(active, best_err, 0.0)

    new_u = u.u.copy()
    new_u[0][idx_ss, idx_fs] = u0 + shift_ss
    new_u[1][idx_ss, idx_fs] = u1 + shift_fs

    support = np.zeros(scan.shape, dtype=bool)
    support[idx_ss, idx_fs] = True
    if opts.sigma > 0:
        ident = PixelMap.identity(scan.shape).u
        for comp in range(2):
            disp = new_u[comp] - ident[comp]
            new_u[comp] = ident[comp] + _smooth_displacement(disp, support, opts.sigma)
    if opts.integrate:
        ident = PixelMap.identity(scan.shape).u
        d_proj, _ = integration.project_irrotational(
            new_u[0] - ident[0], new_u[1] - ident[1], support
        )
        new_u[0][support] = (ident[0] + d_proj[0])[support]
        new_u[1][support] = (ident[1] + d_proj[1])[support]

    err_map = np.zeros(scan.shape, dtype=np.float64)
    err_map[idx_ss, idx_fs] = best_err
    return PixelMap(new_u), err_map


def irrotational_projection(u: PixelMap, m: PixelMask):
    """Replace the map's displacement by the gradient of its potential.

    The displacement ``u - identity`` is least-squares integrated on the
    masked grid and its discrete gradient substituted back, yielding an
    exactly curl-free map. Returns ``(PixelMap, converged)``.
    """
    ident = PixelMap.identity(u.shape).u
    d_proj, result = integration.project_irrotational(
        u.u[0] - ident[0], u.u[1] - ident[1], m.mask
    )
    out = ident + d_proj
    keep = ~m.mask
    out[0][keep] = u.u[0][keep]
    out[1][keep] = u.u[1][keep]
    return PixelMap(out), result.converged


def update_translations(
    scan: ScanData,
    w: Whitefield,
    m: PixelMask,
    ref: ReferenceImage,
    u: PixelMap,
    t: PixelTranslations,
    win: SearchWindow,
    roi: Roi | None = None,
) -> PixelTranslations:
    """Per-frame grid search over integer shifts of the pixel translations.

    Same normalized error as the pixel-map update, summed per frame, with
    paraboloid sub-pixel refinement on the winning 3x3 patch. Frames are
    independent; bad frames keep their input translation.
    """
    good, _, _, intens, wf, _ = _work_set(scan, w, m, roi)
    roi_ = roi or Roi.full(scan.shape)
    sl = roi_.slices
    mask = m.mask[sl] & (w.w[sl] > 0)
    u0 = u.u[0][sl][mask]
    u1 = u.u[1][sl][mask]
    n0, m0 = ref.origin

    offs_ss = win.offsets(0)
    offs_fs = win.offsets(1)
    na, nb = len(offs_ss), len(offs_fs)
    new_di = t.di.astype(np.float64).copy()
    new_dj = t.dj.astype(np.float64).copy()

    for k, frame in enumerate(good):
        fallback = float(((intens[k] - wf) ** 2).sum())
        if fallback <= 0:
            continue
        errs = np.empty((na, nb), dtype=np.float64)
        for a in range(na):
            for b in range(nb):
                x = u0 - (t.di[frame] + offs_ss[a]) - n0
                y = u1 - (t.dj[frame] + offs_fs[b]) - m0
                vals, ok = interp.gather(ref.i_ref, ref.valid, x, y)
                resid = (intens[k] - wf * vals) ** 2
                errs[a, b] = float(np.where(ok, resid, (intens[k] - wf) ** 2).sum())
        errs /= fallback
        ia, ib = np.unravel_index(errs.argmin(), errs.shape)
        da, db = 0.0, 0.0
        if 0 < ia < na - 1 and 0 < ib < nb - 1:
            da, db = quadratic_subpixel_refine(errs[ia - 1:ia + 2, ib - 1:ib + 2])
        new_di[frame] = t.di[frame] + offs_ss[ia] + da
        new_dj[frame] = t.dj[frame] + offs_fs[ib] + db
    return PixelTranslations(di=new_di, dj=new_dj)


def calc_error(
    scan: ScanData,
    w: Whitefield,
    m: PixelMask,
    ref: ReferenceImage,
    u: PixelMap,
    t: PixelTranslations,
    roi: Roi | None = None,
) -> ErrorMetrics:
    """Normalized residuals reduced over frames, pixels and the reference.

    The per-sample residual is divided by the per-pixel variance of the
    intensity over the good frames (floored to avoid static-pixel blowups),
    summed over frames for the pixel error, over masked pixels for the frame
    error, and over both for the total. The same mapping used to build the
    reference projects the residuals onto the reference plane.
    """
    good, idx_ss, idx_fs, intens, wf, _ = _work_set(scan, w, m, roi)
    u0 = u.u[0][idx_ss, idx_fs]
    u1 = u.u[1][idx_ss, idx_fs]
    n0, m0 = ref.origin

    sigma2 = intens.var(axis=0)
    floor = VAR_EPS_REL * float(wf.max() if wf.size else 1.0) ** 2
    sigma2 = np.maximum(sigma2, floor)

    per_frame = np.zeros(scan.n_frames, dtype=np.float64)
    per_pixel_flat = np.zeros(u0.size, dtype=np.float64)
    acc = interp.WeightedAccumulator.zeros(ref.i_ref.shape)
    for k, frame in enumerate(good):
        x = u0 - t.di[frame] - n0
        y = u1 - t.dj[frame] - m0
        vals, ok = interp.gather(ref.i_ref, ref.valid, x, y)
        resid = np.where(ok, (intens[k] - wf * vals) ** 2, (intens[k] - wf) ** 2)
        eps = resid / sigma2
        per_frame[frame] = float(eps.sum())
        per_pixel_flat += eps
        interp.scatter_accumulate(acc, x, y, eps, 1.0)

    per_pixel = np.zeros(scan.shape, dtype=np.float64)
    per_pixel[idx_ss, idx_fs] = per_pixel_flat
    variance = np.zeros(scan.shape, dtype=np.float64)
    variance[idx_ss, idx_fs] = sigma2
    ref_plane, _ = interp.normalize(acc)
    return ErrorMetrics(
        total=float(per_frame.sum()),
        per_frame=per_frame,
        per_pixel=per_pixel,
        reference_plane=ref_plane,
        variance=variance,
    )


@dataclass(frozen=True)
class IterationSettings:
    """Per-iteration configuration of the main loop."""

    window: SearchWindow = SearchWindow(2, 2)
    options: UpdateOptions = UpdateOptions()
    update_translations: bool = False
    translation_window: SearchWindow = SearchWindow(2, 2)


def default_schedule(max_iters: int) -> list[IterationSettings]:
    """Coarse-to-fine defaults: wide first search and strong smoothing,
    decaying to sigma 1 by the third iteration; translation updates join
    from the second iteration."""
    sigmas = [5.0, 3.0] + [1.0] * max(0, max_iters - 2)
    schedule = []
    for i in range(max_iters):
        win = SearchWindow(4, 4) if i == 0 else SearchWindow(2, 2)
        opts = UpdateOptions(quadratic_refinement=True, integrate=True, sigma=sigmas[i])
        schedule.append(
            IterationSettings(
                window=win,
                options=opts,
                update_translations=(i >= 1),
                translation_window=SearchWindow(2, 2),
            )
        )
    return schedule


@dataclass
class LoopResult:
    pixel_map: PixelMap
    reference: ReferenceImage
    translations: PixelTranslations
    history: list = field(default_factory=list)


def run_main_loop(
    scan: ScanData,
    w: Whitefield,
    m: PixelMask,
    u: PixelMap,
    t: PixelTranslations,
    roi: Roi | None = None,
    geom: Geometry | None = None,
    schedule: list[IterationSettings] | None = None,
    max_iters: int = 10,
    tol: float = 1e-3,
    threads: int = 1,
    progress_cb=None,
) -> LoopResult:
    """Run reference / pixel-map / translation updates until converged.

    ``history[0]`` is the error of the initial state; one entry is appended
    after each full iteration. The loop stops at ``max_iters`` or when the
    relative decrease of the total error falls below ``tol``.
    """
    if schedule is None:
        schedule = default_schedule(max_iters)
    if len(schedule) < max_iters:
        schedule = list(schedule) + [schedule[-1]] * (max_iters - len(schedule))

    ref = make_reference(scan, w, m, u, t, roi, geom)
    history = [calc_error(scan, w, m, ref, u, t, roi)]
    if progress_cb:
        progress_cb(0.0, f"initial error {history[0].total:.6g}")

    for i in range(max_iters):
        step = schedule[i]
        ref = make_reference(scan, w, m, u, t, roi, geom)
        u, _ = update_pixel_map(scan, w, m, ref, u, t, step.window, step.options,
                                roi, threads=threads)
        if step.update_translations:
            t = update_translations(scan, w, m, ref, u, t, step.translation_window, roi)
        history.append(calc_error(scan, w, m, ref, u, t, roi))
        if progress_cb:
            progress_cb((i + 1) / max_iters, f"iter {i + 1} error {history[-1].total:.6g}")
        prev, curr = history[-2].total, history[-1].total
        if prev > 0 and (prev - curr) / prev < tol:
            break
    return LoopResult(pixel_map=u, reference=ref, translations=t, history=history)
