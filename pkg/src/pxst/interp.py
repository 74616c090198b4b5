"""Masked bilinear interpolation: gather at and scatter to fractional pixels.

Reading uses the standard bilinear weights ``(1-fx)(1-fy)`` etc., with masked
corners dropped and the remaining weights renormalized. Writing distributes a
value over the four neighbouring cells with the same weights, accumulating the
weights alongside for a final normalization pass. Both directions are local:
no point influences cells beyond its unit square, so sharp features never
produce long-range artefacts and masked corners are handled exactly.

Shift-and-unshift is *not* an identity under this scheme; only the trivial
closures (constant fields, integer nodes) are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WeightedAccumulator:
    """Value and weight planes accumulated by :func:`scatter_accumulate`."""

    values: np.ndarray
    weights: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "WeightedAccumulator":
        return cls(np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.float64))


def _corner_terms(x, y, shape):
    """Floor corners, clipped indices and bilinear weights for points (x, y)."""
    ss, fs = shape
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    i0 = np.clip(x0.astype(np.intp), 0, ss - 1)
    j0 = np.clip(y0.astype(np.intp), 0, fs - 1)
    # Points exactly on the last row/column get zero weight on the clipped
    # neighbour, so the degenerate 1-D/0-D forms fall out of the algebra.
    i1 = np.clip(i0 + 1, 0, ss - 1)
    j1 = np.clip(j0 + 1, 0, fs - 1)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w10 = fx * (1.0 - fy)
    w11 = fx * fy
    return (i0, j0, i1, j1), (w00, w01, w10, w11)


def gather(f: np.ndarray, m: np.ndarray, x, y):
    """Sample ``f`` (masked by ``m``) at fractional coordinates ``(x, y)``.

    Masked corners are excluded and the remaining bilinear weights
    renormalized. Returns ``(values, valid)`` of the same shape as ``x``;
    a point is invalid when it lies outside ``[0, SS-1] x [0, FS-1]`` or
    when every contributing corner is masked.
    """
    f = np.asarray(f)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mf = m.astype(np.float64)
    fm = np.where(m, f, 0.0)

    inside = (x >= 0) & (x <= f.shape[0] - 1) & (y >= 0) & (y <= f.shape[1] - 1)
    (i0, j0, i1, j1), (w00, w01, w10, w11) = _corner_terms(x, y, f.shape)

    den = (
        w00 * mf[i0, j0]
        + w01 * mf[i0, j1]
        + w10 * mf[i1, j0]
        + w11 * mf[i1, j1]
    )
    num = (
        w00 * fm[i0, j0]
        + w01 * fm[i0, j1]
        + w10 * fm[i1, j0]
        + w11 * fm[i1, j1]
    )
    valid = inside & (den > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(valid, num / np.where(den > 0, den, 1.0), 0.0)
    return values, valid


def scatter_accumulate(acc: WeightedAccumulator, x, y, value, weight=1.0) -> int:
    """Distribute ``value * weight`` at fractional points into ``acc``.

    Each of the up to four neighbouring cells receives
    ``value * weight * w_corner`` into ``acc.values`` and
    ``weight * w_corner`` into ``acc.weights``. Points outside
    ``[0, SS-1] x [0, FS-1]`` are dropped whole; the count of dropped points
    is returned.
    """
    shape = acc.values.shape
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).ravel()
    y = np.atleast_1d(np.asarray(y, dtype=np.float64)).ravel()
    value = np.broadcast_to(np.asarray(value, dtype=np.float64), x.shape).ravel()
    weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), x.shape).ravel()

    inside = (x >= 0) & (x <= shape[0] - 1) & (y >= 0) & (y <= shape[1] - 1)
    dropped = int(x.size - inside.sum())
    if dropped:
        x, y = x[inside], y[inside]
        value, weight = value[inside], weight[inside]
    if x.size == 0:
        return dropped

    (i0, j0, i1, j1), weights = _corner_terms(x, y, shape)
    size = shape[0] * shape[1]
    vw = value * weight
    for ii, jj, w in (
        (i0, j0, weights[0]),
        (i0, j1, weights[1]),
        (i1, j0, weights[2]),
        (i1, j1, weights[3]),
    ):
        flat = ii * shape[1] + jj
        acc.values += np.bincount(flat, weights=vw * w, minlength=size).reshape(shape)
        acc.weights += np.bincount(flat, weights=weight * w, minlength=size).reshape(shape)
    return dropped


def normalize(acc: WeightedAccumulator):
    """Divide accumulated values by accumulated weights.

    Returns ``(out, valid)`` where ``valid`` marks cells that received any
    weight; unwritten cells are zero and flagged invalid.
    """
    valid = acc.weights > 0
    out = np.zeros_like(acc.values)
    np.divide(acc.values, acc.weights, out=out, where=valid)
    return out, valid
