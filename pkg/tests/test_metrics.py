import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fanbeam.metrics import EvalReport, gaussian_window, psnr, rmse, ssim, wcrmse


def brute_wcrmse(x, xh, patch):
    best = -1.0
    for i in range(x.shape[0] - patch + 1):
        for j in range(x.shape[1] - patch + 1):
            d = x[i : i + patch, j : j + patch] - xh[i : i + patch, j : j + patch]
            best = max(best, float(np.sqrt(np.mean(np.square(d)))))
    return best


def literal_ssim(x, y, window=7, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    t = np.arange(window) - (window - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    w2 = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - window + 1):
        for j in range(x.shape[1] - window + 1):
            a = x[i : i + window, j : j + window]
            b = y[i : i + window, j : j + window]
            ma, mb = (w2 * a).sum(), (w2 * b).sum()
            va = (w2 * (a - ma) ** 2).sum()
            vb = (w2 * (b - mb) ** 2).sum()
            cab = (w2 * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_rmse_examples():
    assert rmse(np.zeros(2), np.ones(2)) == 1.0
    assert rmse(np.zeros(4), np.array([1.0, 0, 0, 0])) == 0.5
    x = np.random.default_rng(0).random((5, 5))
    assert rmse(x, x) == 0.0
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))


def test_wcrmse_examples():
    x = np.zeros((100, 100))
    assert wcrmse(x, x) == 0.0
    xh = x.copy()
    xh[50, 60] = 3.0
    assert wcrmse(x, xh) == pytest.approx(3.0 / 25, rel=1e-15)
    with pytest.raises(ValueError):
        wcrmse(np.zeros((24, 30)), np.zeros((24, 30)))


def test_wcrmse_equals_rmse_when_image_is_one_patch():
    rng = np.random.default_rng(2)
    x, xh = rng.random((2, 25, 25))
    assert wcrmse(x, xh) == rmse(x, xh)


def test_wcrmse_matches_brute_force_exactly():
    rng = np.random.default_rng(10)
    for _ in range(10):
        x, xh = rng.random((2, 40, 40))
        assert wcrmse(x, xh, patch=9) == brute_wcrmse(x, xh, 9)


def test_wcrmse_location_points_at_the_worst_window():
    rng = np.random.default_rng(4)
    x = rng.random((48, 48)) * 0.01
    xh = x.copy()
    xh[30:35, 5:10] += 1.0
    v, (i, j) = wcrmse(x, xh, patch=5, return_location=True)
    assert (i, j) == (30, 5)
    assert v == pytest.approx(1.0)


def test_psnr_examples():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == math.inf
    assert psnr(np.zeros(4), np.full(4, 2.0), data_range=2.0) == 0.0
    xh = x + 0.01 * np.random.default_rng(1).standard_normal(x.shape)
    mse = np.mean((x - xh) ** 2)
    assert psnr(x, xh, data_range=1.0) == pytest.approx(10 * np.log10(1.0 / mse), abs=1e-9)


def test_ssim_examples():
    x = np.random.default_rng(0).random((20, 20))
    assert ssim(x, x, data_range=1.0) == pytest.approx(1.0, abs=1e-12)
    c = np.full((16, 16), 0.7)
    assert ssim(c, c) == 1.0
    assert ssim(c, c, data_range=1.0) == 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        ssim(x, x, window=4)


def test_ssim_matches_definition_oracle():
    rng = np.random.default_rng(5)
    for _ in range(3):
        x = rng.random((24, 24))
        y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
        assert ssim(x, y, data_range=1.0) == pytest.approx(literal_ssim(x, y), abs=1e-9)


def test_gaussian_window_is_normalised_and_symmetric():
    w = gaussian_window(7, 1.5)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(w, w[::-1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_symmetry_and_ranges(x, y):
    assert rmse(x, y) == rmse(y, x)
    assert wcrmse(x, y, patch=5) == wcrmse(y, x, patch=5)
    assert wcrmse(x, y, patch=5) >= 0
    s = ssim(x, y, data_range=1.0)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert s == pytest.approx(ssim(y, x, data_range=1.0), abs=1e-12)


def test_eval_report_files(tmp_path):
    rng = np.random.default_rng(0)
    items = [(f"{i:05d}", rng.random((30, 30)), rng.random((30, 30))) for i in range(3)]
    same = rng.random((30, 30))
    items.append(("same", same, same))
    rep = EvalReport.evaluate(items, patch=25)
    agg = rep.aggregate()
    assert agg["count"] == 4
    assert agg["worst_rmse_id"] == max(rep.rows, key=lambda r: r["rmse"])["id"]
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["id"] for r in rows] == [i[0] for i in items]
    assert float(rows[0]["rmse"]) == rep.rows[0]["rmse"]
    assert rows[-1]["psnr"] == "inf"
    rep.to_json(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["count"] == 4
    assert EvalReport().aggregate() == {"count": 0}
