"""Image quality metrics and per-dataset evaluation reports.

``psnr`` and ``ssim`` take ``data_range`` from the first (reference)
argument when it is not given, so they are symmetric only when the range
is passed explicitly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import correlate1d


def _pair(x: np.ndarray, xh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(xh, dtype=np.float64)
    if x.shape != xh.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xh.shape}")
    return x, xh


def rmse(x: np.ndarray, xh: np.ndarray) -> float:
    x, xh = _pair(x, xh)
    return float(np.sqrt(np.mean(np.square(x - xh))))


def _window_rmse(d: np.ndarray, i: int, j: int, patch: int) -> float:
    return float(np.sqrt(np.mean(np.square(d[i : i + patch, j : j + patch]))))


def wcrmse(x: np.ndarray, xh: np.ndarray, patch: int = 25, return_location: bool = False):
    """Largest RMSE over all ``patch x patch`` windows (stride 1).

    Window sums come from a summed-area table; the windows that come
    within rounding of the maximum are then re-evaluated directly, so the
    result is exactly the value an explicit double loop would return.
    """
    x, xh = _pair(x, xh)
    if x.ndim != 2:
        raise ValueError("wcrmse expects 2-D images")
    if x.shape[0] < patch or x.shape[1] < patch:
        raise ValueError(f"image {x.shape} smaller than patch {patch}")
    d = x - xh
    sat = np.zeros((d.shape[0] + 1, d.shape[1] + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(d * d, axis=0), axis=1)
    sums = sat[patch:, patch:] - sat[:-patch, patch:] - sat[patch:, :-patch] + sat[:-patch, :-patch]
    top = sums.max()
    slack = 1e-9 * max(top, 0.0) + 1e-12 * max(sat[-1, -1], 0.0) + 1e-300
    best, loc = -1.0, (0, 0)
    for i, j in zip(*np.nonzero(sums >= top - slack)):
        v = _window_rmse(d, int(i), int(j), patch)
        if v > best:
            best, loc = v, (int(i), int(j))
    return (best, loc) if return_location else best


def psnr(x: np.ndarray, xh: np.ndarray, data_range: float | None = None) -> float:
    x, xh = _pair(x, xh)
    if data_range is None:
        data_range = float(x.max() - x.min())
    mse = float(np.mean(np.square(x - xh)))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    h = w.size // 2
    return out[h : img.shape[0] - h, h : img.shape[1] - h]


def ssim(x: np.ndarray, xh: np.ndarray, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: float | None = None, sigma: float = 1.5) -> float:
    """Mean local SSIM with Gaussian-weighted population statistics (valid windows only)."""
    x, xh = _pair(x, xh)
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be a positive odd integer")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than window {window}")
    if data_range is None:
        data_range = float(x.max() - x.min())
    w = gaussian_window(window, sigma)
    mx, my = _filter_valid(x, w), _filter_valid(xh, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(xh * xh, w) - my * my
    cxy = _filter_valid(x * xh, w) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    # with data_range 0 the constants vanish; flat windows then count as a perfect match
    lum_den = mx * mx + my * my + c1
    cs_den = vx + vy + c2
    lum = np.divide(2 * mx * my + c1, lum_den, out=np.ones_like(lum_den), where=lum_den != 0)
    cs = np.divide(2 * cxy + c2, cs_den, out=np.ones_like(cs_den), where=cs_den != 0)
    return float((lum * cs).mean())


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def evaluate(cls, items: Iterable[tuple[str, np.ndarray, np.ndarray]], data_range: float = 1.0,
                 patch: int = 25) -> EvalReport:
        """``items`` yields ``(id, reference, reconstruction)``."""
        rows = []
        for rid, x, xh in items:
            wc, (i, j) = wcrmse(x, xh, patch, return_location=True)
            rows.append({
                "id": rid,
                "rmse": rmse(x, xh),
                "wcrmse": wc,
                "wc_row": i,
                "wc_col": j,
                "psnr": psnr(x, xh, data_range),
                "ssim": ssim(x, xh, data_range=data_range),
            })
        return cls(rows)

    def aggregate(self) -> dict:
        if not self.rows:
            return {"count": 0}
        out: dict = {"count": len(self.rows)}
        for key in ("rmse", "wcrmse", "psnr", "ssim"):
            v = np.array([r[key] for r in self.rows], dtype=np.float64)
            out[f"mean_{key}"] = float(np.mean(v))
            out[f"median_{key}"] = float(np.median(v))
        out["worst_rmse_id"] = max(self.rows, key=lambda r: r["rmse"])["id"]
        out["worst_wcrmse_id"] = max(self.rows, key=lambda r: r["wcrmse"])["id"]
        return out

    def to_csv(self, path: str | Path) -> None:
        fields = ["id", "rmse", "wcrmse", "wc_row", "wc_col", "psnr", "ssim"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_json(self, path: str | Path) -> None:
        # inf PSNR is written as the string "inf" to stay valid JSON
        agg = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
               for k, v in self.aggregate().items()}
        Path(path).write_text(json.dumps(agg, indent=2))
