"""Filtered backprojection for the flat-detector fanbeam geometry.

The pipeline is cosine reweighting, ramp filtering with a Hamming window and
a pixel-driven backprojection with the usual ``d_source^2 / U^2`` distance
weight.  Only pixels inside the inscribed circle (the field of view covered
by every fan) are reconstructed; the rest of the grid is set to zero.

Every stage is linear; :func:`fbp_adjoint` is its exact transpose, needed
to backpropagate through data-consistency layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import FanbeamGeometry
from .projector import OperatorParams


@dataclass(frozen=True)
class FbpParams:
    s_fbp: float = 1.0
    window: bool = True
    pad: int | None = None

    def __post_init__(self) -> None:
        if not self.s_fbp > 0:
            raise ValueError(f"s_fbp must be positive, got {self.s_fbp}")


def _geometry(g: FanbeamGeometry | OperatorParams) -> FanbeamGeometry:
    return g.geometry if isinstance(g, OperatorParams) else g


def nominal_fbp_scale(p: OperatorParams) -> float:
    """Scale that undoes detector magnification and the forward intensity scale."""
    g = p.geometry
    return (g.d_source + g.d_detector) / (2.0 * g.d_source * p.s_fwd)


def fan_weights(t: np.ndarray, d_source: float) -> np.ndarray:
    """Cosine of the fan angle for isocentre-plane offsets ``t``."""
    t = np.asarray(t, dtype=np.float64)
    return d_source / np.sqrt(d_source * d_source + t * t)


def cosine_reweight(y: np.ndarray, g: FanbeamGeometry | OperatorParams) -> np.ndarray:
    g = _geometry(g)
    # detector offsets scaled back to the plane through the rotation centre
    t_iso = g.detector_offsets * g.d_source / (g.d_source + g.d_detector)
    w = fan_weights(t_iso, g.d_source)
    return (np.asarray(y, dtype=np.float64) * w[None, :]).astype(y.dtype, copy=False)


def _pad_length(n: int, pad: int | None) -> int:
    p = 1 << max(1, math.ceil(math.log2(2 * n)))
    if pad is not None:
        if pad < n:
            raise ValueError(f"pad {pad} shorter than the row length {n}")
        p = max(p, 1 << math.ceil(math.log2(pad)))
    return p


def ramp_kernel(length: int, spacing: float = 1.0) -> np.ndarray:
    """Spatial ramp kernel on circular offsets ``fftfreq(length) * length``."""
    n = np.rint(np.fft.fftfreq(length) * length).astype(np.int64)
    h = np.zeros(length)
    h[n == 0] = 1.0 / (4.0 * spacing**2)
    odd = n % 2 != 0
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    return h


def hamming_transfer(length: int) -> np.ndarray:
    """Hamming window on the non-negative rfft frequencies, cut at Nyquist."""
    f = np.fft.rfftfreq(length)
    return 0.54 + 0.46 * np.cos(np.pi * f / 0.5)


def ramp_filter_hamming(
    y: np.ndarray, spacing: float = 1.0, window: bool = True, pad: int | None = None
) -> np.ndarray:
    y = np.asarray(y)
    n = y.shape[-1]
    length = _pad_length(n, pad)
    transfer = np.fft.rfft(ramp_kernel(length, spacing)).real
    if window:
        transfer = transfer * hamming_transfer(length)
    spec = np.fft.rfft(y.astype(np.float64), n=length, axis=-1)
    out = np.fft.irfft(spec * transfer, n=length, axis=-1)[..., :n] * spacing
    return out.astype(y.dtype if y.dtype in (np.float32, np.float64) else np.float64, copy=False)


@njit(cache=True, fastmath=True)
def _pixel_bp_kernel(q, cosv, sinv, d_s, d_d, r_fov, n_x, n_y, d_phi, img):
    n_a, n_d = q.shape
    cx = (n_x - 1) * 0.5
    cy = (n_y - 1) * 0.5
    centre = (n_d - 1) * 0.5
    mag = d_s + d_d
    for iy in range(n_y):
        y = iy - cy
        for ix in range(n_x):
            x = ix - cx
            img[iy, ix] = 0.0
            if x * x + y * y > r_fov * r_fov:
                continue
            acc = 0.0
            for j in range(n_a):
                c = cosv[j]
                s = sinv[j]
                along = -x * s + y * c  # towards the source
                across = x * c + y * s  # along the detector
                u = d_s - along
                pos = mag * across / u + centre
                if pos < 0.0 or pos > n_d - 1:
                    continue
                i0 = int(pos)
                if i0 >= n_d - 1:
                    i0 = n_d - 2
                a = pos - i0
                val = (1.0 - a) * q[j, i0] + a * q[j, i0 + 1]
                acc += val * d_s * d_s / (u * u)
            img[iy, ix] = acc * d_phi


@njit(cache=True, fastmath=True)
def _pixel_bp_adjoint_kernel(img, cosv, sinv, d_s, d_d, r_fov, d_phi, q):
    n_a, n_d = q.shape
    n_y, n_x = img.shape
    cx = (n_x - 1) * 0.5
    cy = (n_y - 1) * 0.5
    centre = (n_d - 1) * 0.5
    mag = d_s + d_d
    for j in range(n_a):
        c = cosv[j]
        s = sinv[j]
        for iy in range(n_y):
            y = iy - cy
            for ix in range(n_x):
                x = ix - cx
                if x * x + y * y > r_fov * r_fov:
                    continue
                along = -x * s + y * c
                across = x * c + y * s
                u = d_s - along
                pos = mag * across / u + centre
                if pos < 0.0 or pos > n_d - 1:
                    continue
                i0 = int(pos)
                if i0 >= n_d - 1:
                    i0 = n_d - 2
                a = pos - i0
                w = img[iy, ix] * d_s * d_s / (u * u) * d_phi
                q[j, i0] += (1.0 - a) * w
                q[j, i0 + 1] += a * w


def _bp_args(g: FanbeamGeometry):
    return np.cos(g.angles), np.sin(g.angles), float(g.d_source), float(g.d_detector)


def pixel_driven_backproject(q: np.ndarray, g: FanbeamGeometry | OperatorParams) -> np.ndarray:
    g = _geometry(g)
    q = np.asarray(q)
    if q.shape != g.sino_shape:
        raise ValueError(f"sinogram shape {q.shape} does not match {g.sino_shape}")
    if g.n_detector < 2:
        raise ValueError("pixel-driven backprojection needs at least two detector elements")
    cosv, sinv, d_s, d_d = _bp_args(g)
    img = np.empty(g.image_shape, dtype=np.float64)
    _pixel_bp_kernel(q.astype(np.float64), cosv, sinv, d_s, d_d, g.r_image, g.n_x, g.n_y,
                     2.0 * np.pi / g.n_angle, img)
    return img.astype(q.dtype if q.dtype == np.float32 else np.float64, copy=False)


def pixel_driven_backproject_adjoint(img: np.ndarray, g: FanbeamGeometry | OperatorParams) -> np.ndarray:
    g = _geometry(g)
    img = np.asarray(img)
    if img.shape != g.image_shape:
        raise ValueError(f"image shape {img.shape} does not match {g.image_shape}")
    cosv, sinv, d_s, d_d = _bp_args(g)
    q = np.zeros(g.sino_shape, dtype=np.float64)
    _pixel_bp_adjoint_kernel(img.astype(np.float64), cosv, sinv, d_s, d_d, g.r_image,
                             2.0 * np.pi / g.n_angle, q)
    return q.astype(img.dtype if img.dtype == np.float32 else np.float64, copy=False)


def fbp(y: np.ndarray, p: FanbeamGeometry | OperatorParams, f: FbpParams | None = None) -> np.ndarray:
    """``s_fbp * BP(ramp(reweight(y)))``."""
    f = f or FbpParams()
    g = _geometry(p)
    y = np.asarray(y)
    if y.shape != g.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match {g.sino_shape}")
    filtered = ramp_filter_hamming(cosine_reweight(y.astype(np.float64), g), g.s_detector, f.window, f.pad)
    out = f.s_fbp * pixel_driven_backproject(filtered, g)
    return out.astype(y.dtype if y.dtype == np.float32 else np.float64, copy=False)


def fbp_adjoint(x: np.ndarray, p: FanbeamGeometry | OperatorParams, f: FbpParams | None = None) -> np.ndarray:
    """Transpose of :func:`fbp`; the windowed ramp filter is symmetric."""
    f = f or FbpParams()
    g = _geometry(p)
    x = np.asarray(x)
    q = pixel_driven_backproject_adjoint(x.astype(np.float64), g)
    out = f.s_fbp * cosine_reweight(ramp_filter_hamming(q, g.s_detector, f.window, f.pad), g)
    return out.astype(x.dtype if x.dtype == np.float32 else np.float64, copy=False)
