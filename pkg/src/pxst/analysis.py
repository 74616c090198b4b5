"""Post-reconstruction analytics built on the recovered pixel map.

The pixel map encodes the wavefront's transverse phase gradients; from it
this module recovers the detector-plane phase, decomposes it over an
orthonormalized aberration basis, propagates the beam through focus, and
estimates sample thickness from the reference image. Split-half
reconstruction quantifies the statistical uncertainty of the map itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import integration, recon
from .data_model import Geometry, PixelMap, PixelMask, PixelTranslations, ReferenceImage, Roi, ScanData, Whitefield
from .propagation import FrequencyGrid, angular_spectrum
from .zernike import ZernikeBasis, make_basis


class SamplingViolation(RuntimeError):
    """Phase gradients imply ray displacements beyond the padded grid."""


@dataclass(frozen=True)
class Phase:
    """Detector-plane phase in radians, zero at the anchor pixel."""

    phi: np.ndarray
    mask: np.ndarray
    converged: bool = True


@dataclass(frozen=True)
class ZernikeFit:
    coefficients: list
    basis: ZernikeBasis
    residual_rms: float


@dataclass(frozen=True)
class FocusVolume:
    """Beam intensities on planes near the focus.

    ``slice_power`` is evaluated on the padded grid before cropping, which
    is where the propagation is exactly unitary.
    """

    intensities: np.ndarray
    z_values: np.ndarray
    d_ss: float
    d_fs: float
    slice_power: np.ndarray
    input_power: float


@dataclass(frozen=True)
class ThicknessParams:
    """Single-material projection parameters.

    ``delta`` is the refractive index decrement, ``mu`` the linear
    attenuation coefficient (1/m), ``zbar`` the effective propagation
    distance and ``pixel`` the reference-grid sampling (meters).
    """

    delta: float
    mu: float
    zbar: float
    pixel: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class ThicknessResult:
    thickness: np.ndarray
    valid: np.ndarray
    clipped: int


@dataclass(frozen=True)
class SplitHalfResult:
    map_a: PixelMap
    map_b: PixelMap
    hist_edges: np.ndarray
    hist_ss: np.ndarray
    hist_fs: np.ndarray
    sigma: float


def phase_gradient(u: PixelMap, geom: Geometry, scan: ScanData) -> np.ndarray:
    """Phase gradient (rad/m) implied by the pixel map, shape [2, SS, FS]."""
    ss, fs = u.shape
    x_phys = np.arange(ss, dtype=np.float64)[:, None] * scan.x_pixel_size
    y_phys = np.arange(fs, dtype=np.float64)[None, :] * scan.y_pixel_size
    scale = 2.0 * np.pi / (scan.wavelength * scan.distance)
    g_ss = (x_phys - u.u[0] * geom.du) * scale
    g_fs = (y_phys - u.u[1] * geom.dv) * scale
    return np.stack([np.broadcast_to(g_ss, (ss, fs)), np.broadcast_to(g_fs, (ss, fs))])


def calculate_phase(
    u: PixelMap,
    geom: Geometry,
    scan: ScanData,
    m: PixelMask,
    tol: float = 1e-12,
) -> Phase:
    """Integrate the map-implied phase gradients into the wavefront phase.

    Uses the same masked least-squares integration as the irrotational
    projection, anchored to zero at the first good pixel. The result is the
    full detector-plane phase; separating the overall tilt and ideal
    quadratic curvature is left to :func:`decompose_low_orders`.
    """
    g = phase_gradient(u, geom, scan)
    result = integration.integrate_gradient(
        g[0] * scan.x_pixel_size, g[1] * scan.y_pixel_size, m.mask, tol=tol
    )
    return Phase(phi=result.phi, mask=m.mask.copy(), converged=result.converged)


def decompose_low_orders(phi: np.ndarray, mask: np.ndarray):
    """Split a phase into piston + tilt + separable quadratic + residual.

    Returns ``(residual, coeffs)`` where ``coeffs`` maps the terms
    ``1, x, y, x^2, y^2`` (grid units, origin at the grid centre) to their
    least-squares coefficients over the mask.
    """
    ss, fs = phi.shape
    x = np.arange(ss, dtype=np.float64)[:, None] - (ss - 1) / 2.0
    y = np.arange(fs, dtype=np.float64)[None, :] - (fs - 1) / 2.0
    cols = [np.ones_like(phi), x * np.ones_like(phi), y * np.ones_like(phi),
            (x * x) * np.ones_like(phi), (y * y) * np.ones_like(phi)]
    a = np.column_stack([c[mask] for c in cols])
    coef, *_ = np.linalg.lstsq(a, phi[mask], rcond=None)
    model = sum(c * arr for c, arr in zip(coef, cols))
    residual = np.where(mask, phi - model, 0.0)
    names = ("piston", "tilt_ss", "tilt_fs", "quad_ss", "quad_fs")
    return residual, dict(zip(names, coef.tolist()))


def remove_piston_tilt(phi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Least-squares removal of the constant and linear phase terms."""
    ss, fs = phi.shape
    x = (np.arange(ss, dtype=np.float64)[:, None] - (ss - 1) / 2.0) * np.ones((1, fs))
    y = np.ones((ss, 1)) * (np.arange(fs, dtype=np.float64)[None, :] - (fs - 1) / 2.0)
    a = np.column_stack([np.ones(mask.sum()), x[mask], y[mask]])
    coef, *_ = np.linalg.lstsq(a, phi[mask], rcond=None)
    model = coef[0] + coef[1] * x + coef[2] * y
    return np.where(mask, phi - model, 0.0)


def zernike_fit(phase: Phase, aperture: np.ndarray, max_noll: int = 15) -> ZernikeFit:
    """Project the phase onto the orthonormalized aberration basis.

    The basis is orthonormal over the actual masked aperture (Gram matrix
    the identity within numerical precision), so the coefficients are plain
    projections and the residual is what the basis cannot represent.
    """
    support = aperture & phase.mask
    basis = make_basis(support, max_noll)
    coeffs = basis.coefficients(phase.phi)
    model = basis.synthesize(coeffs)
    resid = phase.phi[support] - model[support]
    return ZernikeFit(
        coefficients=[(j, float(c)) for j, c in zip(basis.indices, coeffs)],
        basis=basis,
        residual_rms=float(np.sqrt((resid**2).mean())),
    )


def focus_profile(
    phase: Phase,
    w: Whitefield,
    scan: ScanData,
    geom: Geometry,
    z_range: tuple[float, float, int],
    focus_distance: float | None = None,
) -> FocusVolume:
    """Propagate sqrt(W) * exp(i*phi) to planes around the beam focus.

    The field is zero-padded by a factor 2 and moved with the angular
    spectrum propagator, which conserves power exactly on the padded grid;
    per-slice intensities are cropped back to the detector frame. ``z`` is
    measured from the nominal focus, a distance ``z + (z1_ss + z1_fs) / 2``
    upstream of the detector by default. Raises :class:`SamplingViolation`
    when the phase gradients would steer rays beyond the padding.
    """
    z_min, z_max, nz = z_range
    if nz < 1:
        raise ValueError("z_range must request at least one plane")
    zs = np.linspace(z_min, z_max, int(nz))
    if focus_distance is None:
        focus_distance = geom.z + 0.5 * (geom.z1_ss + geom.z1_fs)

    amp = np.sqrt(np.clip(w.w, 0.0, None))
    field = np.where(phase.mask, amp * np.exp(1j * phase.phi), 0.0)
    ss, fs = field.shape
    padded_shape = (2 * ss, 2 * fs)
    lo = (ss // 2, fs // 2)
    padded = np.zeros(padded_shape, dtype=np.complex128)
    padded[lo[0]:lo[0] + ss, lo[1]:lo[1] + fs] = field

    g = integration.grad(phase.phi)
    gmax_ss = np.abs(g[0][phase.mask]).max() / scan.x_pixel_size if phase.mask.any() else 0.0
    gmax_fs = np.abs(g[1][phase.mask]).max() / scan.y_pixel_size if phase.mask.any() else 0.0
    dmax = max(abs(float(zp) - focus_distance) for zp in zs)
    theta = scan.wavelength / (2 * np.pi)
    disp_ss = theta * gmax_ss * dmax / scan.x_pixel_size
    disp_fs = theta * gmax_fs * dmax / scan.y_pixel_size
    if disp_ss > ss / 2 or disp_fs > fs / 2:
        raise SamplingViolation(
            f"ray displacement ({disp_ss:.1f}, {disp_fs:.1f}) px exceeds the padding "
            f"({ss // 2}, {fs // 2}) px"
        )

    input_power = float((np.abs(padded) ** 2).sum())
    intensities = np.empty((len(zs), ss, fs), dtype=np.float64)
    slice_power = np.empty(len(zs), dtype=np.float64)
    for k, zp in enumerate(zs):
        out = angular_spectrum(padded, scan.wavelength, float(zp) - focus_distance,
                               scan.x_pixel_size, scan.y_pixel_size)
        inten = np.abs(out) ** 2
        slice_power[k] = float(inten.sum())
        intensities[k] = inten[lo[0]:lo[0] + ss, lo[1]:lo[1] + fs]
    return FocusVolume(
        intensities=intensities,
        z_values=zs,
        d_ss=scan.x_pixel_size,
        d_fs=scan.y_pixel_size,
        slice_power=slice_power,
        input_power=input_power,
    )


def calculate_sample_thickness(ref: ReferenceImage, params: ThicknessParams) -> ThicknessResult:
    """Single-material thickness from the reference image (TIE low order).

    Applies the inverse filter ``mu / (mu + zbar * delta * k^2)`` to the
    flat-field-normalized reference and converts the result to thickness
    through the Beer-Lambert log. Invalid cells are nearest-neighbour
    filled before the FFT and re-flagged after; non-positive filtered
    intensities are clipped (counted in ``clipped``). Scaling the reference
    and its flat field together leaves the result unchanged.
    """
    valid = ref.valid
    if not valid.any():
        raise ValueError("reference has no valid cells")
    rows = np.flatnonzero(valid.any(axis=1))
    cols = np.flatnonzero(valid.any(axis=0))
    sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    crop = ref.i_ref[sl].copy()
    vcrop = valid[sl]

    if not vcrop.all():
        _, (inds_ss, inds_fs) = distance_transform_edt(~vcrop, return_indices=True)
        crop = crop[inds_ss, inds_fs]

    border = np.zeros_like(vcrop)
    bw = max(1, min(crop.shape) // 20)
    border[:bw] = border[-bw:] = True
    border[:, :bw] = border[:, -bw:] = True
    ring = border & vcrop
    flat = float(crop[ring].mean()) if ring.any() else float(crop[vcrop].mean())
    if flat <= 0:
        raise ValueError("flat-field estimate is non-positive")
    norm = crop / flat

    clipped = 0
    if params.delta == 0.0:
        filtered = norm
    else:
        k2 = FrequencyGrid.for_shape(crop.shape, params.pixel, params.pixel).k_squared()
        filt = params.mu / (params.mu + params.zbar * params.delta * k2)
        filtered = np.fft.ifft2(np.fft.fft2(norm) * filt).real
    eps = 1e-12
    neg = filtered < eps
    clipped = int(neg.sum())
    filtered = np.maximum(filtered, eps)
    t_crop = -np.log(filtered) / params.mu

    thickness = np.zeros_like(ref.i_ref)
    thickness[sl] = np.where(vcrop, t_crop, 0.0)
    return ThicknessResult(thickness=thickness, valid=valid.copy(), clipped=clipped)


def _splitmix(seed: int, idx: np.ndarray) -> np.ndarray:
    """Counter-based 64-bit mix; returns one decorrelated bit per index."""
    with np.errstate(over="ignore"):
        x = (idx.astype(np.uint64) + np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15))
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return (x & np.uint64(1)).astype(bool)


def split_half_recon(
    scan: ScanData,
    w: Whitefield,
    m: PixelMask,
    ref: ReferenceImage,
    u: PixelMap,
    t: PixelTranslations,
    win: recon.SearchWindow,
    seed: int = 0,
    opts: recon.UpdateOptions = recon.UpdateOptions(integrate=False, sigma=0.0),
    roi: Roi | None = None,
) -> SplitHalfResult:
    """Pixel-map uncertainty from two random halves of the samples.

    Every (frame, pixel) sample is assigned to half A or B by a
    counter-based hash of its flat index (schedule independent, bitwise
    reproducible for a given seed), the pixel map is refined once per half
    against the shared reference, and the per-component differences are
    histogrammed. ``sigma`` is the robust standard deviation of the
    differences divided by sqrt(2), i.e. the implied uncertainty of one
    full-data map.
    """
    n, ss, fs = scan.frames.shape
    pick = _splitmix(seed, np.arange(n * ss * fs, dtype=np.uint64)).reshape(n, ss, fs)
    fw_a = pick.astype(np.float64)
    fw_b = 1.0 - fw_a

    map_a, _ = recon.update_pixel_map(scan, w, m, ref, u, t, win, opts, roi, frame_weights=fw_a)
    map_b, _ = recon.update_pixel_map(scan, w, m, ref, u, t, win, opts, roi, frame_weights=fw_b)

    good = scan.good_indices()
    counts_a = fw_a[good].sum(axis=0)
    counts_b = fw_b[good].sum(axis=0)
    both = m.mask & (counts_a > 0) & (counts_b > 0)
    if roi is not None:
        sel = np.zeros_like(both)
        sel[roi.slices] = True
        both &= sel

    diff_ss = (map_a.u[0] - map_b.u[0])[both]
    diff_fs = (map_a.u[1] - map_b.u[1])[both]
    edges = np.linspace(-2.0, 2.0, 82)
    hist_ss, _ = np.histogram(diff_ss, bins=edges)
    hist_fs, _ = np.histogram(diff_fs, bins=edges)

    pooled = np.concatenate([diff_ss, diff_fs])
    med = np.median(pooled)
    sigma = 1.4826 * float(np.median(np.abs(pooled - med))) / np.sqrt(2.0)
    return SplitHalfResult(
        map_a=map_a,
        map_b=map_b,
        hist_edges=edges,
        hist_ss=hist_ss,
        hist_fs=hist_fs,
        sigma=sigma,
    )
