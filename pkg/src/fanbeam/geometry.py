"""Flat-detector fanbeam scanner geometry.

Conventions used throughout the package:

* the image grid has unit pixel size and is centred on the origin; array
  element ``img[iy, ix]`` sits at ``(ix - (n_x - 1) / 2, iy - (n_y - 1) / 2)``;
* at rotation angle 0 the source is at ``(0, d_source)`` and the detector
  array lies on the line ``y = -d_detector``; for other angles both are
  rotated counterclockwise about the origin;
* detector element ``i`` has offset ``(i - (n_detector - 1) / 2) * s_detector``
  along the array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class GeometryError(ValueError):
    pass


def derive_fov(d_source: float, r_image: float) -> float:
    """Half fan angle for which the inscribed circle fills every fan."""
    if not 0 < r_image < d_source:
        raise GeometryError(
            f"need 0 < r_image < d_source, got r_image={r_image}, d_source={d_source}"
        )
    return math.asin(r_image / d_source)


def derive_detector_distance(
    d_source: float, n_detector: int, s_detector: float, gamma: float
) -> float:
    if not 0 < gamma < math.pi / 2:
        raise GeometryError(f"fan angle {gamma} outside (0, pi/2)")
    d_det = n_detector * s_detector / (2.0 * math.tan(gamma)) - d_source
    if d_det <= 0:
        raise GeometryError(f"detector distance {d_det} is not positive")
    return d_det


def detector_distance_slope(d_source: float, n_detector: int, s_detector: float, r_image: float) -> float:
    """Derivative of the derived detector distance with respect to ``d_source``."""
    root = math.sqrt(d_source * d_source - r_image * r_image)
    return n_detector * s_detector * d_source / (2.0 * r_image * root) - 1.0


def equispaced_angles(n_angle: int, offset: float = 0.0) -> np.ndarray:
    return offset + 2.0 * np.pi * np.arange(n_angle) / n_angle


@dataclass(frozen=True)
class FanbeamGeometry:
    d_source: float
    n_detector: int
    angles: np.ndarray
    n_x: int
    n_y: int
    s_detector: float = 1.0
    fov: float = field(init=False)
    d_detector: float = field(init=False)

    def __post_init__(self) -> None:
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if angles.size == 0 or not np.all(np.isfinite(angles)):
            raise GeometryError("angles must be a non-empty finite vector")
        if self.n_detector < 1 or self.n_x < 1 or self.n_y < 1:
            raise GeometryError("grid and detector sizes must be positive")
        if self.s_detector != 1.0:
            raise GeometryError("detector spacing is normalised to 1")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        gamma = derive_fov(float(self.d_source), self.r_image)
        object.__setattr__(self, "fov", gamma)
        object.__setattr__(
            self,
            "d_detector",
            derive_detector_distance(float(self.d_source), self.n_detector, self.s_detector, gamma),
        )

    @property
    def n_angle(self) -> int:
        return self.angles.size

    @property
    def r_image(self) -> float:
        return min(self.n_x, self.n_y) / 2.0

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angle, self.n_detector)

    @property
    def detector_offsets(self) -> np.ndarray:
        i = np.arange(self.n_detector, dtype=np.float64)
        return (i - (self.n_detector - 1) / 2.0) * self.s_detector

    def replace(self, **changes: Any) -> FanbeamGeometry:
        kw = dict(
            d_source=self.d_source,
            n_detector=self.n_detector,
            angles=self.angles,
            n_x=self.n_x,
            n_y=self.n_y,
            s_detector=self.s_detector,
        )
        kw.update(changes)
        return FanbeamGeometry(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "d_source": float(self.d_source),
            "d_detector": float(self.d_detector),
            "n_detector": int(self.n_detector),
            "s_detector": float(self.s_detector),
            "n_angle": int(self.n_angle),
            "angles": [float(a) for a in self.angles],
            "n_x": int(self.n_x),
            "n_y": int(self.n_y),
            "fov": float(self.fov),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> FanbeamGeometry:
        g = cls(
            d_source=float(doc["d_source"]),
            n_detector=int(doc["n_detector"]),
            angles=np.asarray(doc["angles"], dtype=np.float64),
            n_x=int(doc["n_x"]),
            n_y=int(doc["n_y"]),
            s_detector=float(doc.get("s_detector", 1.0)),
        )
        # derived fields are stored redundantly; reject inconsistent files
        if "n_angle" in doc and int(doc["n_angle"]) != g.n_angle:
            raise GeometryError("stored n_angle disagrees with the angle list")
        for key in ("d_detector", "fov"):
            if key in doc and not math.isclose(float(doc[key]), getattr(g, key), rel_tol=1e-9):
                raise GeometryError(f"stored {key}={doc[key]} disagrees with derived {getattr(g, key)}")
        return g


def rotate(points: np.ndarray, phi: float | np.ndarray) -> np.ndarray:
    """Rotate ``(..., 2)`` points counterclockwise by ``phi``."""
    c, s = np.cos(phi), np.sin(phi)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def ray_endpoints(g: FanbeamGeometry, j: int, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Source and detector-element positions of ray ``(j, i)``."""
    if not 0 <= j < g.n_angle:
        raise IndexError(f"angle index {j} out of range [0, {g.n_angle})")
    if not 0 <= i < g.n_detector:
        raise IndexError(f"detector index {i} out of range [0, {g.n_detector})")
    phi = g.angles[j]
    t = (i - (g.n_detector - 1) / 2.0) * g.s_detector
    source = rotate(np.array([0.0, g.d_source]), phi)
    detector = rotate(np.array([t, -g.d_detector]), phi)
    return source, detector


def all_ray_endpoints(g: FanbeamGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`ray_endpoints`: arrays of shape ``(n_angle, n_detector, 2)``."""
    phi = g.angles[:, None]
    src = np.stack([-g.d_source * np.sin(phi), g.d_source * np.cos(phi)], axis=-1)
    src = np.broadcast_to(src, (g.n_angle, g.n_detector, 2)).copy()
    t, d = np.broadcast_arrays(g.detector_offsets[None, :], -g.d_detector)
    det = rotate(np.stack([t, d], axis=-1), phi)
    return src, det
