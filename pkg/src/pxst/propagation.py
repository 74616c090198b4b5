"""Angular-spectrum propagation and FFT frequency grids.

The transfer function keeps unit modulus for all propagating spatial
frequencies (evanescent components are suppressed), so total power on the
padded grid is conserved exactly; this is what makes the focus-profile
unitarity checks meaningful. Separable astigmatic propagation (different
effective distances per axis) uses the paraxial quadratic phase, which is
also what the hologram rendering in the simulator relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FrequencyGrid:
    """FFT-layout spatial frequencies (cycles/m); DC at index 0."""

    q_ss: np.ndarray
    q_fs: np.ndarray

    @classmethod
    def for_shape(cls, shape, d_ss: float, d_fs: float) -> "FrequencyGrid":
        return cls(
            q_ss=np.fft.fftfreq(shape[0], d=d_ss),
            q_fs=np.fft.fftfreq(shape[1], d=d_fs),
        )

    def k_squared(self) -> np.ndarray:
        """(2*pi*q)^2 on the full grid."""
        return (2 * np.pi) ** 2 * (self.q_ss[:, None] ** 2 + self.q_fs[None, :] ** 2)


def angular_spectrum(field: np.ndarray, wavelength: float, distance: float,
                     d_ss: float, d_fs: float) -> np.ndarray:
    """Propagate a sampled complex field by ``distance`` (may be negative)."""
    grid = FrequencyGrid.for_shape(field.shape, d_ss, d_fs)
    q2 = grid.q_ss[:, None] ** 2 + grid.q_fs[None, :] ** 2
    arg = 1.0 - (wavelength**2) * q2
    prop = arg > 0
    kz = np.where(prop, 2 * np.pi / wavelength * np.sqrt(np.where(prop, arg, 0.0)), 0.0)
    h = np.where(prop, np.exp(1j * kz * distance), 0.0)
    return np.fft.ifft2(np.fft.fft2(field) * h)


def fresnel_paraxial(field: np.ndarray, wavelength: float,
                     distance_ss: float, distance_fs: float,
                     d_ss: float, d_fs: float) -> np.ndarray:
    """Paraxial (Fresnel) propagation with independent per-axis distances."""
    grid = FrequencyGrid.for_shape(field.shape, d_ss, d_fs)
    phase = -np.pi * wavelength * (
        distance_ss * grid.q_ss[:, None] ** 2 + distance_fs * grid.q_fs[None, :] ** 2
    )
    return np.fft.ifft2(np.fft.fft2(field) * np.exp(1j * phase))
