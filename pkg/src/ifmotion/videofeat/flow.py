"""Dense optical flow: polynomial-expansion estimator and flow-file I/O.

The estimator follows the two-frame polynomial-expansion scheme: each
neighbourhood is approximated by a quadratic polynomial fitted with a
Gaussian applicability, and the displacement is read off from how the
linear coefficients change between the two frames.  It runs coarse to fine
over an image pyramid.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import DataError

FLOW_MAGIC = b"IFMFLOW1"


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in pixels/frame; ``u`` along columns, ``v`` along rows."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if u.ndim != 2 or u.shape != v.shape:
            raise DataError("flow components must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise DataError("flow contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def width(self):
        return self.u.shape[1]

    @property
    def height(self):
        return self.u.shape[0]

    def resized(self, scale):
        """Flow on a grid rescaled by ``scale`` (vectors scaled too)."""
        if scale == 1.0:
            return self
        shape = scaled_shape(self.u.shape, scale)
        return FlowField(resize(self.u, shape) * scale, resize(self.v, shape) * scale)


def scaled_shape(shape, scale):
    return (max(1, int(round(shape[0] * scale))), max(1, int(round(shape[1] * scale))))


def resize(img, shape):
    """Bilinear resize of a 2-D array to ``shape`` (pixel-centre aligned)."""
    img = np.asarray(img, dtype=float)
    if img.shape == tuple(shape):
        return img.copy()
    h, w = img.shape
    rows = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    cols = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    if shape[0] < h or shape[1] < w:
        sigma = (max(0.0, 0.5 * (h / shape[0] - 1)), max(0.0, 0.5 * (w / shape[1] - 1)))
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def _as_gray(frame):
    arr = np.asarray(frame)
    if arr.ndim != 2:
        raise DataError("frames must be 2-D grayscale images")
    arr = arr.astype(float)
    if np.issubdtype(np.asarray(frame).dtype, np.integer):
        arr /= 255.0
    return arr


class _PolyExpansion:
    """Quadratic fit with Gaussian applicability over a (2n+1)^2 window."""

    def __init__(self, n=5, sigma=1.1):
        x = np.arange(-n, n + 1, dtype=float)
        g = np.exp(-x ** 2 / (2 * sigma ** 2))
        self.kernels = (g, x * g, x * x * g)
        xx, yy = np.meshgrid(x, x)
        a = np.outer(g, g)
        basis = np.stack([np.ones_like(xx), xx, yy, xx ** 2, yy ** 2, xx * yy]).reshape(6, -1)
        gram = (basis * a.reshape(-1)) @ basis.T
        self.ginv = np.linalg.inv(gram)

    def __call__(self, img):
        g0, g1, g2 = self.kernels

        def sep(ky, kx):
            tmp = ndimage.correlate1d(img, kx, axis=1, mode="nearest")
            return ndimage.correlate1d(tmp, ky, axis=0, mode="nearest")

        proj = np.stack([sep(g0, g0), sep(g0, g1), sep(g1, g0), sep(g0, g2), sep(g2, g0), sep(g1, g1)])
        r = np.tensordot(self.ginv, proj, axes=1)
        A = np.empty(img.shape + (2, 2))
        A[..., 0, 0] = r[3]
        A[..., 1, 1] = r[4]
        A[..., 0, 1] = A[..., 1, 0] = 0.5 * r[5]
        b = np.stack([r[1], r[2]], axis=-1)
        return A, b


def _update(A1, b1, A2, b2, d, window_sigma):
    h, w = A1.shape[:2]
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    coords = [rr + d[..., 1], cc + d[..., 0]]
    A2w = np.empty_like(A2)
    for i in range(2):
        for j in range(2):
            A2w[..., i, j] = ndimage.map_coordinates(A2[..., i, j], coords, order=1, mode="nearest")
    b2w = np.stack([ndimage.map_coordinates(b2[..., k], coords, order=1, mode="nearest")
                    for k in range(2)], axis=-1)
    A = 0.5 * (A1 + A2w)
    db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, d)
    G = np.einsum("...ki,...kj->...ij", A, A)
    hvec = np.einsum("...ki,...k->...i", A, db)
    G = ndimage.gaussian_filter(G, (window_sigma, window_sigma, 0, 0), mode="nearest")
    hvec = ndimage.gaussian_filter(hvec, (window_sigma, window_sigma, 0), mode="nearest")
    trace = G[..., 0, 0] + G[..., 1, 1]
    reg = 1e-3 * trace.max() + 1e-12
    a, b_, c = G[..., 0, 0] + reg, G[..., 0, 1], G[..., 1, 1] + reg
    det = a * c - b_ * b_
    du = (c * hvec[..., 0] - b_ * hvec[..., 1]) / det
    dv = (a * hvec[..., 1] - b_ * hvec[..., 0]) / det
    return np.stack([du, dv], axis=-1)


def estimate_flow(frame_a, frame_b, levels=3, iterations=2, poly_n=5, poly_sigma=1.1,
                  window_sigma=2.5) -> FlowField:
    """Dense flow from ``frame_a`` to ``frame_b``.

    A point at ``p`` in ``frame_a`` is found at ``p + (u, v)`` in ``frame_b``.
    """
    a = _as_gray(frame_a)
    b = _as_gray(frame_b)
    if a.shape != b.shape:
        raise DataError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    expand = _PolyExpansion(poly_n, poly_sigma)
    pyr_a, pyr_b = [a], [b]
    for _ in range(levels - 1):
        shape = (max(1, pyr_a[-1].shape[0] // 2), max(1, pyr_a[-1].shape[1] // 2))
        if min(shape) < 2 * poly_n + 1:
            break
        pyr_a.append(resize(pyr_a[-1], shape))
        pyr_b.append(resize(pyr_b[-1], shape))
    d = None
    for la, lb in zip(reversed(pyr_a), reversed(pyr_b)):
        if d is None:
            d = np.zeros(la.shape + (2,))
        else:
            fy, fx = la.shape[0] / d.shape[0], la.shape[1] / d.shape[1]
            d = np.stack([resize(d[..., 0], la.shape) * fx, resize(d[..., 1], la.shape) * fy], axis=-1)
        A1, b1 = expand(la)
        A2, b2 = expand(lb)
        for _ in range(iterations):
            d = _update(A1, b1, A2, b2, d, window_sigma)
    return FlowField(d[..., 0], d[..., 1])


def median_flow(flow: FlowField) -> FlowField:
    """3x3 median-filtered copy used for point tracking."""
    return FlowField(ndimage.median_filter(flow.u, size=3, mode="nearest"),
                     ndimage.median_filter(flow.v, size=3, mode="nearest"))


# -------------------------------------------------------------------- I/O

def write_flow(path, flow: FlowField):
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<ii", flow.width, flow.height))
        fh.write(flow.u.astype("<f4").tobytes())
        fh.write(flow.v.astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:8] != FLOW_MAGIC:
        raise DataError(f"{path}: not a flow file (bad magic)")
    if len(data) < 16:
        raise DataError(f"{path}: truncated header")
    w, h = struct.unpack("<ii", data[8:16])
    n = w * h
    if w <= 0 or h <= 0 or len(data) != 16 + 8 * n:
        raise DataError(f"{path}: size does not match header {w}x{h}")
    planes = np.frombuffer(data, dtype="<f4", offset=16).astype(float)
    return FlowField(planes[:n].reshape(h, w), planes[n:].reshape(h, w))
