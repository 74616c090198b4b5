"""Shared domain types for the speckle-tracking reconstruction engine.

Conventions used throughout the package:

* Axis order is ``[slow-scan, fast-scan]`` everywhere. The slow-scan axis is
  the "x" axis (component 0 of vector fields), the fast-scan axis is "y"
  (component 1).
* All physical quantities are SI (meters, radians).
* Pixel maps are expressed in reference-grid pixel units, i.e. in units of
  the demagnified pixel sizes ``du = x_pixel_size / mag_ss`` and
  ``dv = y_pixel_size / mag_fs``.

All types are value objects: construct once, then share read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative tolerance for checking that detector basis-vector norms match the
# declared pixel sizes.
BASIS_NORM_RTOL = 1e-6
# Per-frame basis vectors must be constant across the scan to within this
# absolute deviation (meters); varying-orientation scans are rejected.
BASIS_CONST_ATOL = 1e-9


@dataclass(frozen=True)
class ScanData:
    """A projection-image scan with detector geometry and sample positions.

    Attributes:
        frames: photon counts, shape [N, SS, FS] (frame, slow-scan, fast-scan).
        wavelength: beam wavelength in meters.
        distance: sample to detector distance in meters.
        x_pixel_size: detector pixel pitch along the slow-scan axis, meters.
        y_pixel_size: detector pixel pitch along the fast-scan axis, meters.
        basis_vectors: [N, 2, 3] lab-frame step vectors of the detector
            slow/fast axes, meters.
        translations: [N, 3] lab-frame sample positions, meters, origin at
            the beam focus.
        good_frames: boolean [N], frames to use in the analysis.
    """

    frames: np.ndarray
    wavelength: float
    distance: float
    x_pixel_size: float
    y_pixel_size: float
    basis_vectors: np.ndarray
    translations: np.ndarray
    good_frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def good_indices(self) -> np.ndarray:
        return np.flatnonzero(self.good_frames)


@dataclass(frozen=True)
class PixelMask:
    """Boolean detector mask, True marks good pixels."""

    mask: np.ndarray


@dataclass(frozen=True)
class Whitefield:
    """Estimate of the image recorded without a sample (counts)."""

    w: np.ndarray


@dataclass(frozen=True)
class Roi:
    """Half-open rectangular detector region of interest."""

    ss_min: int
    ss_max: int
    fs_min: int
    fs_max: int

    def __post_init__(self):
        if not (0 <= self.ss_min < self.ss_max and 0 <= self.fs_min < self.fs_max):
            raise ValueError(f"empty or negative ROI: {self}")

    @classmethod
    def full(cls, shape) -> "Roi":
        return cls(0, shape[0], 0, shape[1])

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.ss_min, self.ss_max), slice(self.fs_min, self.fs_max)

    def contains(self, shape) -> bool:
        return self.ss_max <= shape[0] and self.fs_max <= shape[1]

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.ss_min, self.ss_max, self.fs_min, self.fs_max


@dataclass(frozen=True)
class Geometry:
    """Separable projection geometry derived from per-axis defocus.

    ``mag = (z1 + z) / z1`` per axis, ``du = x_pixel_size / mag_ss`` and
    ``dv = y_pixel_size / mag_fs`` are the reference-grid sampling periods,
    and ``zbar = z1 * z / (z1 + z)`` is the effective propagation distance
    from the sample to the reference-image plane.
    """

    z1_ss: float
    z1_fs: float
    z: float
    mag_ss: float
    mag_fs: float
    du: float
    dv: float
    zbar_ss: float
    zbar_fs: float


@dataclass(frozen=True)
class PixelMap:
    """Per-detector-pixel coordinates into the reference grid.

    ``u[0]`` is the slow-scan component, ``u[1]`` the fast-scan component,
    both in reference-grid pixel units. The identity map ``u[0][i,j] = i``,
    ``u[1][i,j] = j`` corresponds to an unaberrated diverging beam.
    """

    u: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[1], self.u.shape[2]

    @classmethod
    def identity(cls, shape) -> "PixelMap":
        ss, fs = shape
        u = np.empty((2, ss, fs), dtype=np.float64)
        u[0] = np.arange(ss, dtype=np.float64)[:, None]
        u[1] = np.arange(fs, dtype=np.float64)[None, :]
        return cls(u)

    def displacement(self) -> np.ndarray:
        """Map minus the identity, in reference pixels."""
        return self.u - PixelMap.identity(self.shape).u


@dataclass(frozen=True)
class PixelTranslations:
    """Per-frame sample translations converted to reference-grid pixels."""

    di: np.ndarray
    dj: np.ndarray

    def __len__(self) -> int:
        return len(self.di)


@dataclass(frozen=True)
class ReferenceImage:
    """Merged, distortion-corrected virtual image of the sample.

    ``origin = (n0, m0)`` holds the offsets subtracted from the mapped
    coordinates ``u - delta`` so that index 0 of ``i_ref`` corresponds to
    their minimum. Cells with ``wsum == 0`` were never written and are
    invalid.
    """

    i_ref: np.ndarray
    wsum: np.ndarray
    origin: tuple[int, int]
    du: float
    dv: float

    @property
    def valid(self) -> np.ndarray:
        return self.wsum > 0


@dataclass(frozen=True)
class ErrorMetrics:
    """Decompositions of the weighted least-squares target.

    ``total`` is the sum over all good frames and masked pixels of the
    normalized residuals; ``per_frame`` and ``per_pixel`` are the partial
    sums; ``reference_plane`` maps the residuals onto the reference grid.
    """

    total: float
    per_frame: np.ndarray
    per_pixel: np.ndarray
    reference_plane: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class GroundTruth:
    """Simulator-side record of the quantities a reconstruction estimates."""

    phase: np.ndarray
    pixel_map: PixelMap
    reference: ReferenceImage
    translations: PixelTranslations
    zernike_coeffs: list = field(default_factory=list)


def validate(scan: ScanData) -> list[str]:
    """Check every ScanData invariant, returning one message per violation.

    Reports, never raises: an empty list means the scan is well formed.
    """
    problems: list[str] = []
    frames = np.asarray(scan.frames)
    if frames.ndim != 3:
        problems.append(f"frames must be 3-D [N,SS,FS], got ndim={frames.ndim}")
        return problems
    n, ss, fs = frames.shape
    if n < 1:
        problems.append("frames must contain at least one image")
    if not scan.wavelength > 0:
        problems.append("wavelength must be > 0")
    if not scan.distance > 0:
        problems.append("distance must be > 0")
    if not scan.x_pixel_size > 0:
        problems.append("x_pixel_size must be > 0")
    if not scan.y_pixel_size > 0:
        problems.append("y_pixel_size must be > 0")
    if not np.all(np.isfinite(frames)):
        problems.append("frames must be finite")
    elif frames.size and frames.min() < 0:
        problems.append("frames values must be >= 0")

    bv = np.asarray(scan.basis_vectors)
    if bv.shape != (n, 2, 3):
        problems.append(f"basis_vectors must have shape ({n}, 2, 3), got {bv.shape}")
    else:
        norms = np.linalg.norm(bv, axis=2)
        for axis, pitch, name in ((0, scan.x_pixel_size, "slow"), (1, scan.y_pixel_size, "fast")):
            if pitch > 0 and not np.allclose(norms[:, axis], pitch, rtol=BASIS_NORM_RTOL, atol=0):
                problems.append(f"basis_vectors row norm mismatch on {name} axis (expected {pitch})")
        if np.abs(bv - bv[0]).max() > BASIS_CONST_ATOL:
            problems.append("basis_vectors must be constant across frames")

    tr = np.asarray(scan.translations)
    if tr.shape != (n, 3):
        problems.append(f"translations must have shape ({n}, 3), got {tr.shape}")
    elif not np.all(np.isfinite(tr)):
        problems.append("translations must be finite")

    gf = np.asarray(scan.good_frames)
    if gf.shape != (n,):
        problems.append(f"good_frames must have shape ({n},), got {gf.shape}")
    elif not gf.any():
        problems.append("good_frames must select at least one frame")
    return problems
