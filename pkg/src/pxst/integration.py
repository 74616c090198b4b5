"""Least-squares integration of 2-D gradient fields on masked grids.

The discrete gradient is a forward difference along each axis; the final
row/column, where no forward neighbour exists, is filled with the backward
difference so that vector fields keep the full grid shape. Integration
minimizes the masked residual ``sum |grad(phi) - g|**2`` over the forward
links whose both endpoints are unmasked, which amounts to a weighted Poisson
problem with natural (Neumann) boundaries. It is solved with conjugate
gradients; the potential is anchored to zero at the first good pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def grad(phi: np.ndarray) -> np.ndarray:
    """Discrete gradient of ``phi``, shape [2, SS, FS].

    Forward differences, with the last row/column repeating the preceding
    backward difference.
    """
    gx = np.empty_like(phi)
    gy = np.empty_like(phi)
    gx[:-1] = phi[1:] - phi[:-1]
    gx[-1] = phi[-1] - phi[-2]
    gy[:, :-1] = phi[:, 1:] - phi[:, :-1]
    gy[:, -1] = phi[:, -1] - phi[:, -2]
    return np.stack([gx, gy])


def _link_weights(mask: np.ndarray):
    wx = (mask[:-1] & mask[1:]).astype(np.float64)
    wy = (mask[:, :-1] & mask[:, 1:]).astype(np.float64)
    return wx, wy


def _apply_normal(phi, wx, wy, anchor):
    """(Gx' Wx Gx + Gy' Wy Gy + e_a e_a') phi, all matrix-free."""
    out = np.zeros_like(phi)
    dx = wx * (phi[1:] - phi[:-1])
    out[:-1] -= dx
    out[1:] += dx
    dy = wy * (phi[:, 1:] - phi[:, :-1])
    out[:, :-1] -= dy
    out[:, 1:] += dy
    out[anchor] += phi[anchor]
    return out


@dataclass
class IntegrationResult:
    phi: np.ndarray
    converged: bool
    residual: float
    iterations: int


def integrate_gradient(
    gx: np.ndarray,
    gy: np.ndarray,
    mask: np.ndarray,
    tol: float = 1e-12,
    maxiter: int | None = None,
) -> IntegrationResult:
    """Potential whose discrete gradient best matches ``(gx, gy)`` on ``mask``.

    Only forward links with both endpoints unmasked enter the fit. The
    returned potential is zero at the first good pixel. When CG fails to
    reach ``tol`` within ``maxiter`` the best iterate found is returned with
    ``converged=False``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("integrate_gradient: mask has no good pixels")
    anchor = tuple(np.argwhere(mask)[0])
    wx, wy = _link_weights(mask)

    b = np.zeros(mask.shape, dtype=np.float64)
    bx = wx * gx[:-1]
    b[:-1] -= bx
    b[1:] += bx
    by = wy * gy[:, :-1]
    b[:, :-1] -= by
    b[:, 1:] += by

    if maxiter is None:
        maxiter = 20 * mask.size

    # Plain CG on the SPD normal operator; the anchor term pins the gauge.
    phi = np.zeros_like(b)
    r = b - _apply_normal(phi, wx, wy, anchor)
    p = r.copy()
    rs = float(np.vdot(r, r))
    bnorm = float(np.sqrt(np.vdot(b, b))) or 1.0
    best = phi.copy()
    best_res = np.sqrt(rs) / bnorm
    it = 0
    while np.sqrt(rs) / bnorm > tol and it < maxiter:
        ap = _apply_normal(p, wx, wy, anchor)
        alpha = rs / float(np.vdot(p, ap))
        phi += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        res = np.sqrt(rs_new) / bnorm
        if res < best_res:
            best_res = res
            best = phi.copy()
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1

    converged = best_res <= tol
    phi = best
    phi = phi - phi[anchor]
    return IntegrationResult(phi=phi, converged=converged, residual=best_res, iterations=it)


def project_irrotational(
    dx: np.ndarray,
    dy: np.ndarray,
    mask: np.ndarray,
    tol: float = 1e-12,
    maxiter: int | None = None,
):
    """Nearest (least-squares) curl-free field to ``(dx, dy)`` on ``mask``.

    Returns ``(d_proj, result)`` with ``d_proj`` of shape [2, SS, FS] equal
    to the discrete gradient of the fitted potential.
    """
    result = integrate_gradient(dx, dy, mask, tol=tol, maxiter=maxiter)
    return grad(result.phi), result


def curl(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Discrete curl on the interior cells: d(dy)/dss - d(dx)/dfs."""
    return (dy[1:, :-1] - dy[:-1, :-1]) - (dx[:-1, 1:] - dx[:-1, :-1])
