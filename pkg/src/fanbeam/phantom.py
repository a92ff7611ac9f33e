"""Synthetic four-tissue breast phantoms and a hidden-geometry simulator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numba import njit
from scipy import ndimage

from .fbp import FbpParams, fbp, nominal_fbp_scale
from .geometry import FanbeamGeometry, equispaced_angles
from .projector import OperatorParams, forward_project
from .tensor_io import DatasetManifest, Record, save_manifest, write_tensor

# label codes of the pre-smoothing tissue map
BACKGROUND, ADIPOSE, SKIN, FIBROGLANDULAR, MICROCALCIFICATION = range(5)

Quadrature = Literal["matched", "fine_step", "exact_siddon"]


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 256
    adipose: float = 0.2
    skin: float = 0.95
    fibroglandular: float = 0.85
    microcalcification: float = 1.0
    outline_axes: tuple[float, float] = (0.72, 0.86)  # fraction of the inscribed radius
    outline_tilt: tuple[float, float] = (0.0, 3.141592653589793)
    outline_shift: float = 0.04  # fraction of the inscribed radius
    skin_width: tuple[int, int] = (2, 4)
    n_blobs: tuple[int, int] = (5, 20)
    blob_radius: tuple[float, float] = (0.04, 0.14)  # fraction of the image size
    n_specks: tuple[int, int] = (0, 10)
    speck_size: tuple[int, int] = (1, 3)
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size < 32:
            raise ValueError(f"phantom size must be at least 32, got {self.size}")
        if self.sigma < 0:
            raise ValueError("smoothing sigma must be non-negative")
        for name in ("adipose", "skin", "fibroglandular", "microcalcification"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"attenuation {name}={v} outside (0, 1]")
        lo, hi = self.outline_axes
        if not 0 < lo <= hi < 0.95:
            raise ValueError("outline axes must satisfy 0 < lo <= hi < 0.95")

    def attenuation(self) -> np.ndarray:
        return np.array([0.0, self.adipose, self.skin, self.fibroglandular, self.microcalcification])


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def phantom_labels(cfg: PhantomConfig, index: int) -> np.ndarray:
    """Integer tissue map (before smoothing) of phantom ``index``."""
    rng = _rng(cfg.seed, index)
    n = cfg.size
    r = n / 2.0
    c = np.arange(n) - (n - 1) / 2.0
    yy, xx = np.meshgrid(c, c, indexing="ij")

    a, b = r * rng.uniform(*cfg.outline_axes, size=2)
    rot = rng.uniform(*cfg.outline_tilt)
    margin = r - 3.0 - max(a, b)
    ox, oy = rng.uniform(-1, 1, size=2) * max(0.0, min(margin, cfg.outline_shift * r))
    u = (xx - ox) * np.cos(rot) + (yy - oy) * np.sin(rot)
    v = -(xx - ox) * np.sin(rot) + (yy - oy) * np.cos(rot)
    outline = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    labels = np.where(outline, ADIPOSE, BACKGROUND).astype(np.int8)
    depth = ndimage.distance_transform_edt(outline)
    skin_w = rng.integers(cfg.skin_width[0], cfg.skin_width[1] + 1)
    interior = depth > skin_w

    for _ in range(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1)):
        # star-shaped blob: ellipse radius modulated by a few low harmonics
        rad = n * rng.uniform(*cfg.blob_radius)
        iy, ix = np.argwhere(interior)[rng.integers(interior.sum())]
        cx, cy = c[ix], c[iy]
        ang = np.arctan2(yy - cy, xx - cx)
        dist = np.hypot(xx - cx, yy - cy)
        ecc = rng.uniform(0.5, 1.0)
        phase = rng.uniform(0, np.pi)
        bound = rad * np.sqrt(1.0 / (np.cos(ang - phase) ** 2 + (np.sin(ang - phase) / ecc) ** 2))
        for k in range(2, 5):
            bound = bound * (1.0 + 0.12 * rng.uniform(-1, 1) * np.cos(k * ang + rng.uniform(0, 2 * np.pi)))
        labels[(dist <= bound) & interior] = FIBROGLANDULAR

    for _ in range(rng.integers(cfg.n_specks[0], cfg.n_specks[1] + 1)):
        s = int(rng.integers(cfg.speck_size[0], cfg.speck_size[1] + 1))
        iy, ix = np.argwhere(interior)[rng.integers(interior.sum())]
        labels[iy : iy + s, ix : ix + s] = np.where(
            interior[iy : iy + s, ix : ix + s], MICROCALCIFICATION, labels[iy : iy + s, ix : ix + s]
        )

    labels[outline & ~interior] = SKIN
    return labels


def generate_phantom(cfg: PhantomConfig, index: int) -> np.ndarray:
    """Deterministic float32 phantom with values in [0, 1], zero outside the outline."""
    labels = phantom_labels(cfg, index)
    img = cfg.attenuation()[labels]
    if cfg.sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.sigma, mode="constant")
    img[labels == BACKGROUND] = 0.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# exact intersection-length ray tracing (pixels as unit squares)
# --------------------------------------------------------------------------


@njit(cache=True)
def _siddon_kernel(img, cosv, sinv, offsets, d_s, d_d, out):
    ny, nx = img.shape
    hx = nx * 0.5
    hy = ny * 0.5
    n_a, n_d = out.shape
    for j in range(n_a):
        c = cosv[j]
        s = sinv[j]
        sx = -d_s * s
        sy = d_s * c
        for i in range(n_d):
            t = offsets[i]
            dx = t * c + d_d * s - sx
            dy = t * s - d_d * c - sy
            a_lo = 0.0
            a_hi = 1.0
            if dx != 0.0:
                a1 = (-hx - sx) / dx
                a2 = (hx - sx) / dx
                a_lo = max(a_lo, min(a1, a2))
                a_hi = min(a_hi, max(a1, a2))
            elif abs(sx) >= hx:
                out[j, i] = 0.0
                continue
            if dy != 0.0:
                a1 = (-hy - sy) / dy
                a2 = (hy - sy) / dy
                a_lo = max(a_lo, min(a1, a2))
                a_hi = min(a_hi, max(a1, a2))
            elif abs(sy) >= hy:
                out[j, i] = 0.0
                continue
            if a_hi <= a_lo:
                out[j, i] = 0.0
                continue
            # next plane crossings in x and y after a_lo
            inf = 1e300
            if dx > 0.0:
                kx = math.floor(sx + a_lo * dx + hx) + 1.0
                ax_next = (kx - hx - sx) / dx
                ax_step = 1.0 / dx
            elif dx < 0.0:
                kx = math.ceil(sx + a_lo * dx + hx) - 1.0
                ax_next = (kx - hx - sx) / dx
                ax_step = -1.0 / dx
            else:
                ax_next = inf
                ax_step = inf
            if dy > 0.0:
                ky = math.floor(sy + a_lo * dy + hy) + 1.0
                ay_next = (ky - hy - sy) / dy
                ay_step = 1.0 / dy
            elif dy < 0.0:
                ky = math.ceil(sy + a_lo * dy + hy) - 1.0
                ay_next = (ky - hy - sy) / dy
                ay_step = -1.0 / dy
            else:
                ay_next = inf
                ay_step = inf
            a = a_lo
            acc = 0.0
            while a < a_hi:
                a_next = min(ax_next, ay_next, a_hi)
                mid = 0.5 * (a + a_next)
                px = int(math.floor(sx + mid * dx + hx))
                py = int(math.floor(sy + mid * dy + hy))
                if 0 <= px < nx and 0 <= py < ny:
                    acc += (a_next - a) * img[py, px]
                if ax_next <= a_next:
                    ax_next += ax_step
                if ay_next <= a_next:
                    ay_next += ay_step
                a = a_next
            out[j, i] = acc * math.sqrt(dx * dx + dy * dy)


def siddon_project(x: np.ndarray, p: OperatorParams) -> np.ndarray:
    """Exact line integrals of the piecewise-constant image (unit square pixels)."""
    x = np.asarray(x)
    if x.shape != p.image_shape:
        raise ValueError(f"image shape {x.shape} does not match grid {p.image_shape}")
    g = p.geometry
    out = np.empty(p.sino_shape, dtype=np.float64)
    _siddon_kernel(x.astype(np.float64), np.cos(g.angles), np.sin(g.angles), g.detector_offsets,
                   float(g.d_source), float(g.d_detector), out)
    return (p.s_fwd * out).astype(x.dtype if x.dtype == np.float32 else np.float64, copy=False)


def measure(x: np.ndarray, p: OperatorParams, quadrature: Quadrature = "matched") -> np.ndarray:
    if quadrature == "matched":
        return forward_project(x, p)
    if quadrature == "fine_step":
        return forward_project(x, OperatorParams.from_geometry(p.geometry, p.s_fwd, step=0.05))
    if quadrature == "exact_siddon":
        return siddon_project(x, p)
    raise ValueError(f"unknown quadrature {quadrature!r}")


# --------------------------------------------------------------------------
# dataset simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    n_angle: int = 64
    n_detector: int = 512
    d_source: float | None = None  # default: 2.34375 * inscribed radius
    angle_offset: float = 0.0
    s_fwd: float = 1.0
    step: float = 0.5
    quadrature: Quadrature = "matched"
    noise_std: float = 0.0
    count: int = 256
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    with_fbp: bool = True
    dtype: Literal["f32", "f64"] = "f32"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError(f"count must be at least 1, got {self.count}")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or not math.isclose(sum(self.splits), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions {self.splits} must be non-negative and sum to 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.quadrature not in ("matched", "fine_step", "exact_siddon"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")

    def true_params(self, size: int) -> OperatorParams:
        d_s = self.d_source if self.d_source is not None else 2.34375 * size / 2.0
        g = FanbeamGeometry(d_s, self.n_detector, equispaced_angles(self.n_angle, self.angle_offset), size, size)
        return OperatorParams.from_geometry(g, s_fwd=self.s_fwd, step=self.step)


def split_assignment(count: int, fractions: tuple[float, float, float], seed: int) -> list[str]:
    n_val = int(round(fractions[1] * count))
    n_test = int(round(fractions[2] * count))
    n_train = count - n_val - n_test
    if n_train < 0:
        raise ValueError("split fractions leave no room for the training set")
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = np.random.default_rng([seed, 0xC0FFEE]).permutation(count)
    out = [""] * count
    for pos, idx in enumerate(order):
        out[idx] = labels[pos]
    return out


def simulate_dataset(pcfg: PhantomConfig, scfg: SimConfig, out_dir: str | Path) -> DatasetManifest:
    out_dir = Path(out_dir)
    for sub in ("phantoms", "sinograms") + (("fbp",) if scfg.with_fbp else ()):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    p = scfg.true_params(pcfg.size)
    dtype = np.float32 if scfg.dtype == "f32" else np.float64
    splits = split_assignment(scfg.count, scfg.splits, scfg.seed)
    fcfg = FbpParams(s_fbp=nominal_fbp_scale(p))
    records = []
    for index in range(scfg.count):
        rid = f"{index:05d}"
        x = generate_phantom(pcfg, index).astype(dtype)
        y = measure(x, p, scfg.quadrature)
        if scfg.noise_std > 0:
            noise = np.random.default_rng([scfg.seed, index, 1]).normal(0.0, scfg.noise_std, y.shape)
            y = (y + noise).astype(dtype)
        rec = Record(id=rid, phantom=f"phantoms/{rid}.ctt", sinogram=f"sinograms/{rid}.ctt",
                     fbp=f"fbp/{rid}.ctt" if scfg.with_fbp else None, split=splits[index])
        write_tensor(out_dir / rec.phantom, x)
        write_tensor(out_dir / rec.sinogram, y)
        if scfg.with_fbp:
            write_tensor(out_dir / rec.fbp, fbp(y, p, fcfg))
        records.append(rec)
    sim = {**p.to_dict(), "quadrature": scfg.quadrature, "noise_std": scfg.noise_std,
           "phantom": asdict(pcfg)}
    manifest = DatasetManifest(records=records, seed=scfg.seed, sim_geometry=sim, root=out_dir)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest
