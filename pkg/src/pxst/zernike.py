"""Zernike polynomials in Noll ordering, orthonormalized on masked apertures.

Real pupils here are usually rectangular (crossed 1-D lenses), so the
classical disc orthogonality does not hold on the sampled support. The
basis is therefore built by sampling the polynomials on the aperture's
bounding ellipse and re-orthonormalizing them over the actual masked
pixels (QR), which keeps coefficient extraction a plain projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np


def noll_to_nm(j: int) -> tuple[int, int]:
    """Radial degree n and azimuthal frequency m for Noll index j (j >= 1).

    Even j carries the cosine (m > 0) term, odd j the sine (m < 0).
    """
    if j < 1:
        raise ValueError("Noll indices start at 1")
    n = 0
    k = j - 1
    while k > n:
        n += 1
        k -= n
    m = (-1) ** j * (n % 2 + 2 * ((k + (n + 1) % 2) // 2))
    return n, m


def _radial(n: int, m_abs: int, rho: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho)
    for k in range((n - m_abs) // 2 + 1):
        c = (-1) ** k * factorial(n - k) / (
            factorial(k) * factorial((n + m_abs) // 2 - k) * factorial((n - m_abs) // 2 - k)
        )
        out += c * rho ** (n - 2 * k)
    return out


def zernike_noll(j: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Zernike polynomial of Noll index j with the usual sqrt normalization."""
    n, m = noll_to_nm(j)
    r = _radial(n, abs(m), rho)
    if m == 0:
        return np.sqrt(n + 1.0) * r
    if m > 0:
        return np.sqrt(2.0 * (n + 1)) * r * np.cos(m * theta)
    return np.sqrt(2.0 * (n + 1)) * r * np.sin(-m * theta)


@dataclass(frozen=True)
class ZernikeBasis:
    """Orthonormal aberration basis over a masked aperture.

    ``samples[k]`` is the k-th orthonormalized function on the full grid
    (zero outside the mask); inner products are means over the masked
    pixels, so the Gram matrix of the samples is the identity.
    """

    indices: tuple[int, ...]
    samples: np.ndarray
    mask: np.ndarray

    def coefficients(self, phase: np.ndarray) -> np.ndarray:
        flat = phase[self.mask]
        return np.array([float((s[self.mask] * flat).mean()) for s in self.samples])

    def synthesize(self, coeffs) -> np.ndarray:
        out = np.zeros(self.mask.shape, dtype=np.float64)
        for c, s in zip(coeffs, self.samples):
            out += c * s
        return out


def make_basis(mask: np.ndarray, max_noll: int) -> ZernikeBasis:
    """Orthonormalized Noll basis 1..max_noll on the masked aperture.

    Coordinates are normalized on the aperture's bounding ellipse. Raises
    when the masked support cannot resolve the requested number of terms.
    """
    mask = np.asarray(mask, dtype=bool)
    pts = np.argwhere(mask)
    if len(pts) < max_noll:
        raise ValueError(f"aperture has {len(pts)} pixels < {max_noll} terms")
    ss_lo, fs_lo = pts.min(axis=0)
    ss_hi, fs_hi = pts.max(axis=0)
    cx, cy = (ss_lo + ss_hi) / 2.0, (fs_lo + fs_hi) / 2.0
    ax = max((ss_hi - ss_lo) / 2.0, 0.5)
    ay = max((fs_hi - fs_lo) / 2.0, 0.5)
    xs = (pts[:, 0] - cx) / ax
    ys = (pts[:, 1] - cy) / ay
    rho = np.hypot(xs, ys)
    theta = np.arctan2(ys, xs)

    raw = np.column_stack([zernike_noll(j, rho, theta) for j in range(1, max_noll + 1)])
    # QR over the discrete support; normalize to unit mean-square samples.
    q, r = np.linalg.qr(raw)
    if np.linalg.matrix_rank(r) < max_noll:
        raise ValueError("rank-deficient aperture sampling for Zernike basis")
    # Keep each basis function aligned with its parent polynomial's sign.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    npix = len(pts)
    q *= np.sqrt(npix)

    samples = np.zeros((max_noll,) + mask.shape, dtype=np.float64)
    for k in range(max_noll):
        samples[k][mask] = q[:, k]
    return ZernikeBasis(indices=tuple(range(1, max_noll + 1)), samples=samples, mask=mask)
