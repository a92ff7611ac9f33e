"""Ray-driven fanbeam forward projection with geometry derivatives.

Each ray is clipped to the circle of radius ``r_image + 1`` around the origin
and integrated with the midpoint rule on ``n = ceil(chord / step)`` equal
sub-intervals, sampling the image by bilinear interpolation (zero outside the
grid).  The operator is linear in the image and exactly adjoint to
:func:`unfiltered_backproject`.

Derivatives with respect to ``d_source`` and the view angles are obtained by
forward-mode differentiation of the sample coordinates.  Sample ``k`` of a
ray sits at ``S + (-b + a_k q) e`` with ``a_k = (2k + 1)/n - 1``, so its
tangent is affine in ``a_k`` and three running sums per ray suffice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .geometry import FanbeamGeometry, detector_distance_slope

PAD = 2


@dataclass(frozen=True)
class OperatorParams:
    """Learnable geometry ``(s_fwd, d_source, angles)`` plus the frozen grid."""

    s_fwd: float
    d_source: float
    angles: np.ndarray
    n_detector: int
    n_x: int
    n_y: int
    step: float = 0.5
    geometry: FanbeamGeometry = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not (self.s_fwd > 0 and math.isfinite(self.s_fwd)):
            raise ValueError(f"s_fwd must be positive, got {self.s_fwd}")
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        g = FanbeamGeometry(
            d_source=float(self.d_source),
            n_detector=self.n_detector,
            angles=self.angles,
            n_x=self.n_x,
            n_y=self.n_y,
        )
        object.__setattr__(self, "angles", g.angles)
        object.__setattr__(self, "geometry", g)

    @classmethod
    def from_geometry(cls, g: FanbeamGeometry, s_fwd: float = 1.0, step: float = 0.5) -> OperatorParams:
        return cls(s_fwd, g.d_source, g.angles, g.n_detector, g.n_x, g.n_y, step)

    @property
    def n_angle(self) -> int:
        return self.angles.size

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angle, self.n_detector)

    def to_vector(self) -> np.ndarray:
        """Parameter vector ``[s_fwd, d_source, phi_0, ..., phi_{n-1}]``."""
        return np.concatenate([[self.s_fwd, self.d_source], self.angles])

    def with_vector(self, v: np.ndarray) -> OperatorParams:
        v = np.asarray(v, dtype=np.float64)
        if v.size != 2 + self.n_angle:
            raise ValueError(f"expected {2 + self.n_angle} parameters, got {v.size}")
        return replace(self, s_fwd=float(v[0]), d_source=float(v[1]), angles=v[2:].copy())

    def to_dict(self) -> dict:
        return {"s_fwd": float(self.s_fwd), "step": float(self.step), **self.geometry.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> OperatorParams:
        g = FanbeamGeometry.from_dict(doc)
        return cls.from_geometry(g, s_fwd=float(doc.get("s_fwd", 1.0)), step=float(doc.get("step", 0.5)))


@dataclass
class ParamGradient:
    """Sinogram-shaped partial derivatives of ``A_theta x``.

    ``d_angles[j, i]`` holds the derivative of entry ``(j, i)`` with respect to
    the angle of view ``j``; derivatives with respect to any other angle are
    zero and not stored.
    """

    d_s_fwd: np.ndarray
    d_d_source: np.ndarray
    d_angles: np.ndarray


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def _forward_kernel(img, cosv, sinv, offsets, d_s, d_d, radius, step, out):
    # img is the zero-padded grid; its centre coincides with the original one
    ny, nx = img.shape
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    n_a, n_d = out.shape
    c2 = d_s * d_s - radius * radius
    for j in range(n_a):
        c = cosv[j]
        s = sinv[j]
        sx = -d_s * s
        sy = d_s * c
        for i in range(n_d):
            t = offsets[i]
            vx = t * c + d_d * s - sx
            vy = t * s - d_d * c - sy
            length = math.sqrt(vx * vx + vy * vy)
            ex = vx / length
            ey = vy / length
            b = sx * ex + sy * ey
            disc = b * b - c2
            if disc <= 0.0:
                out[j, i] = 0.0
                continue
            q = math.sqrt(disc)
            n = max(1, int(math.ceil(2.0 * q / step)))
            h = 2.0 * q / n
            u0 = -b - q + 0.5 * h
            bx = sx + u0 * ex + cx
            by = sy + u0 * ey + cy
            hx = h * ex
            hy = h * ey
            acc = 0.0
            for k in range(n):
                px = bx + k * hx
                py = by + k * hy
                # padded coordinates are >= 0.5, so truncation is floor
                x0 = int(px)
                y0 = int(py)
                ax = px - x0
                ay = py - y0
                acc += (1.0 - ay) * ((1.0 - ax) * img[y0, x0] + ax * img[y0, x0 + 1]) + ay * (
                    (1.0 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1]
                )
            out[j, i] = acc * h


@njit(cache=True, fastmath=True)
def _backproject_kernel(sino, cosv, sinv, offsets, d_s, d_d, radius, step, img):
    # img is the zero-padded grid; its centre coincides with the original one
    ny, nx = img.shape
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    n_a, n_d = sino.shape
    c2 = d_s * d_s - radius * radius
    for j in range(n_a):
        c = cosv[j]
        s = sinv[j]
        sx = -d_s * s
        sy = d_s * c
        for i in range(n_d):
            val = sino[j, i]
            if val == 0.0:
                continue
            t = offsets[i]
            vx = t * c + d_d * s - sx
            vy = t * s - d_d * c - sy
            length = math.sqrt(vx * vx + vy * vy)
            ex = vx / length
            ey = vy / length
            b = sx * ex + sy * ey
            disc = b * b - c2
            if disc <= 0.0:
                continue
            q = math.sqrt(disc)
            n = max(1, int(math.ceil(2.0 * q / step)))
            h = 2.0 * q / n
            u0 = -b - q + 0.5 * h
            bx = sx + u0 * ex + cx
            by = sy + u0 * ey + cy
            hx = h * ex
            hy = h * ey
            w = val * h
            for k in range(n):
                px = bx + k * hx
                py = by + k * hy
                # padded coordinates are >= 0.5, so truncation is floor
                x0 = int(px)
                y0 = int(py)
                ax = px - x0
                ay = py - y0
                img[y0, x0] += w * (1.0 - ay) * (1.0 - ax)
                img[y0, x0 + 1] += w * (1.0 - ay) * ax
                img[y0 + 1, x0] += w * ay * (1.0 - ax)
                img[y0 + 1, x0 + 1] += w * ay * ax


@njit(cache=True, fastmath=True)
def _forward_tangent_kernel(img, cosv, sinv, offsets, d_s, d_d, kappa, radius, step, out, d_ds, d_phi):
    # img is the zero-padded grid; its centre coincides with the original one
    ny, nx = img.shape
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    n_a, n_d = out.shape
    c2 = d_s * d_s - radius * radius
    for j in range(n_a):
        c = cosv[j]
        s = sinv[j]
        sx = -d_s * s
        sy = d_s * c
        for i in range(n_d):
            t = offsets[i]
            vx = t * c + d_d * s - sx
            vy = t * s - d_d * c - sy
            length = math.sqrt(vx * vx + vy * vy)
            ex = vx / length
            ey = vy / length
            b = sx * ex + sy * ey
            disc = b * b - c2
            if disc <= 0.0:
                out[j, i] = 0.0
                d_ds[j, i] = 0.0
                d_phi[j, i] = 0.0
                continue
            q = math.sqrt(disc)
            n = max(1, int(math.ceil(2.0 * q / step)))
            h = 2.0 * q / n
            u0 = -b - q + 0.5 * h
            bx = sx + u0 * ex + cx
            by = sy + u0 * ey + cy
            hx = h * ex
            hy = h * ey
            f_sum = 0.0
            g0x = 0.0
            g0y = 0.0
            g1x = 0.0
            g1y = 0.0
            inv_n = 1.0 / n
            for k in range(n):
                px = bx + k * hx
                py = by + k * hy
                # padded coordinates are >= 0.5, so truncation is floor
                x0 = int(px)
                y0 = int(py)
                ax = px - x0
                ay = py - y0
                v00 = img[y0, x0]
                v01 = img[y0, x0 + 1]
                v10 = img[y0 + 1, x0]
                v11 = img[y0 + 1, x0 + 1]
                f_sum += (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)
                gx = (1.0 - ay) * (v01 - v00) + ay * (v11 - v10)
                gy = (1.0 - ax) * (v10 - v00) + ax * (v11 - v01)
                a_k = (2.0 * k + 1.0) * inv_n - 1.0
                g0x += gx
                g0y += gy
                g1x += a_k * gx
                g1y += a_k * gy
            out[j, i] = f_sum * h
            for which in range(2):
                if which == 0:
                    # d/d d_source: source moves radially, detector distance via kappa
                    dsx = -s
                    dsy = c
                    ddx = kappa * s
                    ddy = -kappa * c
                    dnorm2 = 2.0 * d_s
                else:
                    # d/d phi: rigid rotation of source and detector
                    dsx = -d_s * c
                    dsy = -d_s * s
                    ddx = -t * s + d_d * c
                    ddy = t * c + d_d * s
                    dnorm2 = 0.0
                dvx = ddx - dsx
                dvy = ddy - dsy
                proj = ex * dvx + ey * dvy
                dex = (dvx - ex * proj) / length
                dey = (dvy - ey * proj) / length
                db = dsx * ex + dsy * ey + sx * dex + sy * dey
                dq = (2.0 * b * db - dnorm2) / (2.0 * q)
                dh = 2.0 * dq * inv_n
                a_x = dsx - db * ex - b * dex
                a_y = dsy - db * ey - b * dey
                b_x = dq * ex + q * dex
                b_y = dq * ey + q * dey
                dval = dh * f_sum + h * (g0x * a_x + g0y * a_y + g1x * b_x + g1y * b_y)
                if which == 0:
                    d_ds[j, i] = dval
                else:
                    d_phi[j, i] = dval


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def _check_image(x: np.ndarray, p: OperatorParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != p.image_shape:
        raise ValueError(f"image shape {x.shape} does not match grid {p.image_shape}")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return x


def _check_sino(y: np.ndarray, p: OperatorParams) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != p.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match {p.sino_shape}")
    if y.dtype not in (np.float32, np.float64):
        y = y.astype(np.float64)
    return y


def _ray_args(p: OperatorParams):
    g = p.geometry
    return (
        np.cos(g.angles),
        np.sin(g.angles),
        g.detector_offsets,
        float(g.d_source),
        float(g.d_detector),
        g.r_image + 1.0,
        float(p.step),
    )


def _padded(x: np.ndarray) -> np.ndarray:
    return np.pad(x, PAD)


def forward_project(x: np.ndarray, p: OperatorParams) -> np.ndarray:
    """Sinogram ``A_theta x`` of shape ``(n_angle, n_detector)``, same dtype as ``x``."""
    x = _check_image(x, p)
    cosv, sinv, offs, d_s, d_d, radius, step = _ray_args(p)
    out = np.empty(p.sino_shape, dtype=np.float64)
    _forward_kernel(_padded(x), cosv, sinv, offs, d_s, d_d, radius, step, out)
    return (p.s_fwd * out).astype(x.dtype, copy=False)


def unfiltered_backproject(y: np.ndarray, p: OperatorParams) -> np.ndarray:
    """Exact adjoint ``A_theta^T y`` of :func:`forward_project`."""
    y = _check_sino(y, p)
    cosv, sinv, offs, d_s, d_d, radius, step = _ray_args(p)
    buf = np.zeros((p.n_y + 2 * PAD, p.n_x + 2 * PAD), dtype=np.float64)
    _backproject_kernel(y, cosv, sinv, offs, d_s, d_d, radius, step, buf)
    out = buf[PAD:-PAD, PAD:-PAD] * p.s_fwd
    return out.astype(y.dtype, copy=False)


def project_with_param_grads(x: np.ndarray, p: OperatorParams) -> tuple[np.ndarray, ParamGradient]:
    x = _check_image(x, p)
    cosv, sinv, offs, d_s, d_d, radius, step = _ray_args(p)
    kappa = detector_distance_slope(d_s, p.n_detector, 1.0, p.geometry.r_image)
    raw = np.empty(p.sino_shape, dtype=np.float64)
    d_ds = np.empty_like(raw)
    d_phi = np.empty_like(raw)
    _forward_tangent_kernel(_padded(x), cosv, sinv, offs, d_s, d_d, kappa, radius, step, raw, d_ds, d_phi)
    s = p.s_fwd
    grad = ParamGradient(d_s_fwd=raw.astype(x.dtype), d_d_source=(s * d_ds).astype(x.dtype),
                         d_angles=(s * d_phi).astype(x.dtype))
    return (s * raw).astype(x.dtype), grad


def loss_value(batch: Sequence[tuple[np.ndarray, np.ndarray]], p: OperatorParams) -> float:
    """``(1/M) sum ||A_theta x - y||^2`` over the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    total = 0.0
    for x, y in batch:
        r = forward_project(x, p).astype(np.float64) - y
        total += float(np.vdot(r, r))
    return total / len(batch)


def loss_param_gradient(
    batch: Sequence[tuple[np.ndarray, np.ndarray]], p: OperatorParams
) -> tuple[float, np.ndarray]:
    """Loss and its gradient over ``[s_fwd, d_source, phi_0, ...]``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    m = len(batch)
    grad = np.zeros(2 + p.n_angle)
    total = 0.0
    for x, y in batch:
        sino, pg = project_with_param_grads(x, p)
        r = sino.astype(np.float64) - y
        total += float(np.vdot(r, r))
        grad[0] += np.vdot(r, pg.d_s_fwd)
        grad[1] += np.vdot(r, pg.d_d_source)
        grad[2:] += np.einsum("ji,ji->j", r, pg.d_angles.astype(np.float64))
    return total / m, grad * (2.0 / m)


def dense_matrix(p: OperatorParams, dtype=np.float64) -> np.ndarray:
    """Materialise ``A_theta`` column by column (small grids only)."""
    n = p.n_x * p.n_y
    cols = np.empty((p.n_angle * p.n_detector, n), dtype=dtype)
    e = np.zeros(n, dtype=dtype)
    for k in range(n):
        e[k] = 1.0
        cols[:, k] = forward_project(e.reshape(p.image_shape), p).ravel()
        e[k] = 0.0
    return cols
