"""Projection geometry, initial pixel map, and defocus estimation.

The initial pixel map is the identity in reference-grid units: per-axis
magnification (including astigmatism) is absorbed into the reference
sampling ``du = x_pixel_size / mag``, so the map minus the identity is
directly the aberration-induced displacement field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import recon
from .data_model import Geometry, PixelMap, PixelMask, PixelTranslations, Roi, ScanData, Whitefield

# Thon-ring correlation below this is considered an unreliable fit.
THON_SCORE_MIN = 0.2


def make_geometry(z1_ss: float, z1_fs: float, scan: ScanData) -> Geometry:
    """Geometry derived from per-axis focus-to-sample distances."""
    if z1_ss <= 0 or z1_fs <= 0:
        raise ValueError("focus-to-sample distance must be > 0")
    z = scan.distance
    mag_ss = (z1_ss + z) / z1_ss
    mag_fs = (z1_fs + z) / z1_fs
    return Geometry(
        z1_ss=z1_ss,
        z1_fs=z1_fs,
        z=z,
        mag_ss=mag_ss,
        mag_fs=mag_fs,
        du=scan.x_pixel_size / mag_ss,
        dv=scan.y_pixel_size / mag_fs,
        zbar_ss=z1_ss * z / (z1_ss + z),
        zbar_fs=z1_fs * z / (z1_fs + z),
    )


def generate_pixel_map(geom: Geometry, shape, roi: Roi | None = None) -> PixelMap:
    """Initial pixel map: the identity in reference units.

    Aberrations enter only through later updates; astigmatism is carried by
    the per-axis ``du``/``dv`` of the geometry. The map is defined on the
    full detector shape regardless of the ROI.
    """
    del geom, roi
    return PixelMap.identity(shape)


def translations_to_pixels(scan: ScanData, geom: Geometry) -> PixelTranslations:
    """Sample translations projected on the detector axes, in reference px.

    ``di = (t . e_ss) / du`` and ``dj = (t . e_fs) / dv`` with unit vectors
    from the (constant) basis vectors; the z component of the translations
    is ignored. The mapping is linear in the translations.
    """
    basis = np.asarray(scan.basis_vectors[0], dtype=np.float64)
    e_ss = basis[0] / np.linalg.norm(basis[0])
    e_fs = basis[1] / np.linalg.norm(basis[1])
    tr = np.asarray(scan.translations, dtype=np.float64)
    return PixelTranslations(di=tr @ e_ss / geom.du, dj=tr @ e_fs / geom.dv)


@dataclass(frozen=True)
class ThonFit:
    """Result of the fringe-spectrum defocus fit."""

    z1_ss: float
    z1_fs: float
    score: float
    power_spectrum: np.ndarray
    reliable: bool


def _mean_power_spectrum(scan: ScanData, w: Whitefield, mask: PixelMask, roi: Roi | None):
    roi = roi or Roi.full(scan.shape)
    sl = roi.slices
    good = scan.good_indices()
    m = mask.mask[sl] & (w.w[sl] > 0)
    wf = np.where(m, w.w[sl], 1.0)
    spec = None
    for n in good:
        contrast = np.where(m, scan.frames[n][sl] / wf - 1.0, 0.0)
        p = np.abs(np.fft.fft2(contrast)) ** 2
        spec = p if spec is None else spec + p
    return spec / len(good)


def _whiten_log_spectrum(spec: np.ndarray, q_ss: np.ndarray, q_fs: np.ndarray, nbins: int = 128):
    """Log spectrum with its radial median profile removed."""
    logp = np.log(spec + spec.max() * 1e-12)
    r = np.hypot(q_ss[:, None] / np.abs(q_ss).max(), q_fs[None, :] / np.abs(q_fs).max())
    ridx = np.minimum((r / r.max() * nbins).astype(int), nbins - 1)
    med = np.zeros(nbins)
    for k in range(nbins):
        sel = ridx == k
        if sel.any():
            med[k] = np.median(logp[sel])
    return logp - med[ridx]


def fit_thon_rings(
    scan: ScanData,
    w: Whitefield,
    mask: PixelMask,
    z1_grid: np.ndarray,
    roi: Roi | None = None,
    astigmatic: bool = False,
    t_band: tuple[float, float] = (0.3, 8.0),
) -> ThonFit:
    """Defocus from the fringe rings of the mean Fourier power spectrum.

    The whitefield-corrected contrast spectrum of a defocused projection
    carries rings following ``sin^2(pi * lambda * zbar * q^2)`` in
    demagnified (reference-plane) frequencies ``q``, elliptical when the
    two axes are focused at different distances. For every candidate
    defocus the whitened log spectrum is correlated against that model in
    the elliptical coordinate ``t = lambda * (zbar_ss * q_ss^2 + zbar_fs *
    q_fs^2)``; the grid argmax wins, ties toward smaller defocus. Scores
    below ``THON_SCORE_MIN`` flag an unreliable estimate (e.g. no visible
    fringes).
    """
    z1_grid = np.atleast_1d(np.asarray(z1_grid, dtype=np.float64))
    if z1_grid.size == 0 or np.any(z1_grid <= 0):
        raise ValueError("z1 grid must be non-empty and positive")
    spec = _mean_power_spectrum(scan, w, mask, roi)
    ss, fs = spec.shape
    q_ss = np.fft.fftfreq(ss, d=scan.x_pixel_size)
    q_fs = np.fft.fftfreq(fs, d=scan.y_pixel_size)
    white = _whiten_log_spectrum(spec, q_ss, q_fs)

    # Stay inside the Nyquist disc to avoid the anisotropic corner region.
    nyq = (q_ss[:, None] / np.abs(q_ss).max()) ** 2 + (q_fs[None, :] / np.abs(q_fs).max()) ** 2
    in_disc = nyq <= 0.9**2

    if astigmatic:
        cands = [(a, b) for a in z1_grid for b in z1_grid]
    else:
        cands = [(a, a) for a in z1_grid]

    q2_ss = q_ss[:, None] ** 2
    q2_fs = q_fs[None, :] ** 2
    lam = scan.wavelength
    z = scan.distance
    best = (-np.inf, cands[0])
    scores = []
    for z1a, z1b in cands:
        mag_a = (z1a + z) / z1a
        mag_b = (z1b + z) / z1b
        # zbar * (mag * q)^2 == z * mag * q^2 per axis
        t = lam * z * (mag_a * q2_ss + mag_b * q2_fs)
        band = in_disc & (t >= t_band[0]) & (t <= t_band[1])
        if band.sum() < 16:
            scores.append(-np.inf)
            continue
        model = np.sin(np.pi * t[band]) ** 2
        data = white[band]
        mm = model - model.mean()
        dd = data - data.mean()
        denom = np.sqrt((mm * mm).sum() * (dd * dd).sum())
        score = float((mm * dd).sum() / denom) if denom > 0 else -np.inf
        scores.append(score)
        if score > best[0]:
            best = (score, (z1a, z1b))
    score, (z1a, z1b) = best
    return ThonFit(
        z1_ss=z1a,
        z1_fs=z1b,
        score=score,
        power_spectrum=spec,
        reliable=score >= THON_SCORE_MIN,
    )


@dataclass(frozen=True)
class DefocusFit:
    """Result of the registration-contrast defocus search."""

    z1_ss: float
    z1_fs: float
    contrast: np.ndarray
    candidates: np.ndarray


def fit_defocus_registration(
    scan: ScanData,
    w: Whitefield,
    mask: PixelMask,
    z1_grid: np.ndarray,
    u_template: PixelMap | None = None,
    roi: Roi | None = None,
    astigmatic: bool = False,
) -> DefocusFit:
    """Defocus maximizing the contrast of the merged reference image.

    A wrong magnification misregisters the overlaid frames and washes the
    reference out, so the normalized variance ``var / mean^2`` of the valid
    reference cells peaks at the true defocus. Requires roughly correct
    sample translations; a flat contrast curve signals that they are not.
    """
    z1_grid = np.atleast_1d(np.asarray(z1_grid, dtype=np.float64))
    if z1_grid.size == 0:
        raise ValueError("z1 grid must be non-empty")
    if astigmatic:
        cands = np.array([(a, b) for a in z1_grid for b in z1_grid])
    else:
        cands = np.column_stack([z1_grid, z1_grid])

    contrast = np.empty(len(cands), dtype=np.float64)
    for k, (z1a, z1b) in enumerate(cands):
        geom = make_geometry(z1a, z1b, scan)
        u = u_template or generate_pixel_map(geom, scan.shape, roi)
        t = translations_to_pixels(scan, geom)
        ref = recon.make_reference(scan, w, mask, u, t, roi, geom)
        vals = ref.i_ref[ref.valid]
        mean = float(vals.mean())
        contrast[k] = float(vals.var() / (mean * mean)) if mean != 0 else 0.0
    best = int(contrast.argmax())
    return DefocusFit(
        z1_ss=float(cands[best, 0]),
        z1_fs=float(cands[best, 1]),
        contrast=contrast,
        candidates=cands,
    )
