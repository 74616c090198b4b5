"""Forward-model scan generator used as the test oracle.

Builds a wavefront phase (separable ideal curvature plus Zernike
aberrations), derives the ground-truth pixel map through the same discrete
gradient the phase integration uses, renders a reference texture (optionally
as an in-line hologram at the effective propagation distance), and samples
frames through the same bilinear gather the reconstruction uses. Noiseless
recovery is therefore exact up to the search quantization, which isolates
algorithmic errors from model mismatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import integration, interp
from .data_model import (
    GroundTruth,
    PixelMap,
    PixelTranslations,
    ReferenceImage,
    ScanData,
)
from .propagation import fresnel_paraxial
from .zernike import make_basis


@dataclass(frozen=True)
class SimSpec:
    """Parameters of a simulated scan.

    Aberration coefficients are radians of the orthonormalized Noll basis
    over the full detector aperture. Translations form a centred raster of
    ``nx x ny`` positions spaced ``step_px`` reference pixels (or a Fermat
    spiral when ``spiral`` is set). ``hologram`` renders the texture as an
    in-line hologram of a phase screen at the per-axis effective distance,
    which is what puts fringe rings into the frame spectra.
    """

    shape: tuple[int, int] = (128, 128)
    wavelength: float = 5e-10
    distance: float = 1.0
    z1_ss: float = 5.0e-3
    z1_fs: float = 5.0e-3
    x_pixel_size: float = 1e-5
    y_pixel_size: float = 1e-5
    aberrations: dict = field(default_factory=dict)
    whitefield: str = "flat"
    peak_counts: float = 1000.0
    whitefield_width: float = 0.8
    texture: str = "blobs"
    texture_contrast: float = 0.4
    texture_scale: float = 3.0
    hologram: bool = False
    hologram_phase_rms: float = 0.5
    nx: int = 5
    ny: int = 5
    step_px: float = 4.25
    spiral: bool = False
    poisson: bool = False
    seed: int = 0
    margin: int = 8


def _magnifications(spec: SimSpec):
    mag_ss = (spec.z1_ss + spec.distance) / spec.z1_ss
    mag_fs = (spec.z1_fs + spec.distance) / spec.z1_fs
    du = spec.x_pixel_size / mag_ss
    dv = spec.y_pixel_size / mag_fs
    return mag_ss, mag_fs, du, dv


def _positions(spec: SimSpec):
    if spec.spiral:
        n = spec.nx * spec.ny
        k = np.arange(n, dtype=np.float64)
        golden = np.pi * (3.0 - np.sqrt(5.0))
        r = spec.step_px * np.sqrt(k)
        di = r * np.cos(golden * k)
        dj = r * np.sin(golden * k)
        return di, dj
    ix = np.arange(spec.nx, dtype=np.float64) - (spec.nx - 1) / 2.0
    iy = np.arange(spec.ny, dtype=np.float64) - (spec.ny - 1) / 2.0
    di, dj = np.meshgrid(ix * spec.step_px, iy * spec.step_px, indexing="ij")
    return di.ravel(), dj.ravel()


def _whitefield(spec: SimSpec, rng) -> np.ndarray:
    ss, fs = spec.shape
    if spec.whitefield == "flat":
        return np.full((ss, fs), spec.peak_counts, dtype=np.float64)
    if spec.whitefield == "gaussian":
        x = (np.arange(ss) - (ss - 1) / 2.0) / (ss / 2.0)
        y = (np.arange(fs) - (fs - 1) / 2.0) / (fs / 2.0)
        r2 = (x[:, None] ** 2 + y[None, :] ** 2) / (spec.whitefield_width**2)
        return spec.peak_counts * np.exp(-0.5 * r2)
    raise ValueError(f"unknown whitefield model {spec.whitefield!r}")


def _texture(spec: SimSpec, shape, du, dv, rng) -> np.ndarray:
    if isinstance(spec.texture, np.ndarray):
        tex = np.asarray(spec.texture, dtype=np.float64)
        if tex.shape != shape:
            raise ValueError("user texture must match the reference grid shape")
        return tex
    if spec.hologram:
        screen = gaussian_filter(rng.standard_normal(shape), spec.texture_scale)
        screen *= spec.hologram_phase_rms / max(screen.std(), 1e-12)
        zbar_ss = spec.z1_ss * spec.distance / (spec.z1_ss + spec.distance)
        zbar_fs = spec.z1_fs * spec.distance / (spec.z1_fs + spec.distance)
        u = fresnel_paraxial(np.exp(1j * screen), spec.wavelength, zbar_ss, zbar_fs, du, dv)
        return np.abs(u) ** 2
    if spec.texture == "blobs":
        noise = gaussian_filter(rng.standard_normal(shape), spec.texture_scale)
        noise /= max(noise.std(), 1e-12)
        return np.clip(1.0 + spec.texture_contrast * noise, 0.05, None)
    if spec.texture == "spokes":
        ss, fs = shape
        x = np.arange(ss)[:, None] - (ss - 1) / 2.0
        y = np.arange(fs)[None, :] - (fs - 1) / 2.0
        theta = np.arctan2(y, x)
        r = np.hypot(x, y)
        spokes = np.sin(16.0 * theta) * (r > 4)
        pattern = gaussian_filter(np.sign(spokes) * (r > 4), 1.0)
        return np.clip(1.0 + spec.texture_contrast * pattern, 0.05, None)
    raise ValueError(f"unknown texture {spec.texture!r}")


def simulate_scan(spec: SimSpec) -> tuple[ScanData, GroundTruth]:
    """Generate a scan and the ground truth it was rendered from."""
    rng = np.random.default_rng(spec.seed)
    ss, fs = spec.shape
    lam, z = spec.wavelength, spec.distance
    mag_ss, mag_fs, du, dv = _magnifications(spec)

    # Wavefront phase: discrete ideal curvature (whose forward differences
    # reproduce the identity pixel map exactly) plus the aberration terms.
    i_idx = np.arange(ss, dtype=np.float64)[:, None]
    j_idx = np.arange(fs, dtype=np.float64)[None, :]
    c_ss = math.pi * spec.x_pixel_size**2 / (lam * (spec.z1_ss + z))
    c_fs = math.pi * spec.y_pixel_size**2 / (lam * (spec.z1_fs + z))
    phase = c_ss * i_idx * (i_idx - 1) + c_fs * j_idx * (j_idx - 1)

    zern_coeffs = []
    phi_ab = np.zeros((ss, fs), dtype=np.float64)
    if spec.aberrations:
        max_noll = max(spec.aberrations)
        basis = make_basis(np.ones((ss, fs), dtype=bool), max_noll)
        coeffs = np.zeros(max_noll)
        for j, c in spec.aberrations.items():
            coeffs[j - 1] = c
        phi_ab = basis.synthesize(coeffs)
        zern_coeffs = sorted(spec.aberrations.items())
        phase = phase + phi_ab

    g_ab = integration.grad(phi_ab)
    u = np.empty((2, ss, fs), dtype=np.float64)
    u[0] = i_idx - (lam * z / (2 * math.pi)) * g_ab[0] / (spec.x_pixel_size * du)
    u[1] = j_idx - (lam * z / (2 * math.pi)) * g_ab[1] / (spec.y_pixel_size * dv)

    di, dj = _positions(spec)
    n = di.size

    n0 = int(math.floor(u[0].min() - di.max())) - spec.margin
    m0 = int(math.floor(u[1].min() - dj.max())) - spec.margin
    ref_shape = (
        int(math.ceil(u[0].max() - di.min())) - n0 + 1 + spec.margin,
        int(math.ceil(u[1].max() - dj.min())) - m0 + 1 + spec.margin,
    )
    tex = _texture(spec, ref_shape, du, dv, rng)

    w = _whitefield(spec, rng)
    ones = np.ones(ref_shape, dtype=bool)
    frames = np.empty((n, ss, fs), dtype=np.float64)
    for k in range(n):
        vals, ok = interp.gather(tex, ones, u[0] - di[k] - n0, u[1] - dj[k] - m0)
        if not ok.all():
            raise ValueError("sample displacement exceeds the reference extent")
        frames[k] = w * vals
    if spec.poisson:
        frames = rng.poisson(frames).astype(np.float64)

    translations = np.zeros((n, 3), dtype=np.float64)
    translations[:, 0] = di * du
    translations[:, 1] = dj * dv
    basis_vectors = np.zeros((n, 2, 3), dtype=np.float64)
    basis_vectors[:, 0, 0] = spec.x_pixel_size
    basis_vectors[:, 1, 1] = spec.y_pixel_size

    scan = ScanData(
        frames=frames,
        wavelength=lam,
        distance=z,
        x_pixel_size=spec.x_pixel_size,
        y_pixel_size=spec.y_pixel_size,
        basis_vectors=basis_vectors,
        translations=translations,
        good_frames=np.ones(n, dtype=bool),
    )
    truth = GroundTruth(
        phase=phase,
        pixel_map=PixelMap(u),
        reference=ReferenceImage(
            i_ref=tex, wsum=np.ones(ref_shape), origin=(n0, m0), du=du, dv=dv
        ),
        translations=PixelTranslations(di=di, dj=dj),
        zernike_coeffs=zern_coeffs,
    )
    return scan, truth
