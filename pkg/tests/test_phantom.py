import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_params
from fanbeam.geometry import all_ray_endpoints
from fanbeam.phantom import (
    ADIPOSE,
    BACKGROUND,
    FIBROGLANDULAR,
    SKIN,
    PhantomConfig,
    SimConfig,
    generate_phantom,
    measure,
    phantom_labels,
    siddon_project,
    simulate_dataset,
    split_assignment,
)
from fanbeam.projector import forward_project
from fanbeam.tensor_io import load_manifest, read_tensor


def test_phantom_is_deterministic():
    cfg = PhantomConfig(size=64, seed=3)
    a, b = generate_phantom(cfg, 7), generate_phantom(cfg, 7)
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, generate_phantom(cfg, 8))
    assert not np.array_equal(a, generate_phantom(PhantomConfig(size=64, seed=4), 7))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.floats(0, 3))
def test_range_and_support(seed, index, sigma):
    cfg = PhantomConfig(size=48, seed=seed, sigma=sigma)
    x = generate_phantom(cfg, index)
    labels = phantom_labels(cfg, index)
    assert x.min() >= 0 and x.max() <= 1
    assert not x[labels == BACKGROUND].any()
    assert not x[0].any() and not x[-1].any() and not x[:, 0].any() and not x[:, -1].any()


def test_label_map_has_several_tissues():
    cfg = PhantomConfig(size=128)
    for i in range(5):
        labels = phantom_labels(cfg, i)
        present = set(np.unique(labels))
        assert {BACKGROUND, ADIPOSE, SKIN, FIBROGLANDULAR} <= present
        x = generate_phantom(PhantomConfig(size=128, sigma=0.0), i)
        assert len(np.unique(x)) >= 3


def test_skin_ring_encloses_interior():
    labels = phantom_labels(PhantomConfig(size=128), 0)
    inside = labels != BACKGROUND
    # every tissue pixel touching the background is skin
    from scipy import ndimage

    border = inside & ndimage.binary_dilation(~inside)
    assert np.all(labels[border] == SKIN)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(size=16)
    with pytest.raises(ValueError):
        PhantomConfig(sigma=-1)
    with pytest.raises(ValueError):
        PhantomConfig(skin=1.5)
    with pytest.raises(ValueError):
        SimConfig(count=0)
    with pytest.raises(ValueError):
        SimConfig(splits=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        SimConfig(quadrature="simpson")


def test_siddon_of_ones_is_chord_length_in_the_square():
    p = small_params(n=32, n_det=64, n_angle=5, d_source=80.0)
    y = siddon_project(np.ones((32, 32)), p)
    src, det = all_ray_endpoints(p.geometry)
    # oracle: clip each segment against the square [-16, 16]^2 (Liang-Barsky)
    expect = np.zeros(p.sino_shape)
    for j in range(5):
        for i in range(64):
            s, d = src[j, i], det[j, i]
            e = d - s
            lo, hi = 0.0, 1.0
            for k in range(2):
                if e[k] == 0:
                    continue
                t1, t2 = sorted(((-16 - s[k]) / e[k], (16 - s[k]) / e[k]))
                lo, hi = max(lo, t1), min(hi, t2)
            expect[j, i] = max(hi - lo, 0.0) * np.linalg.norm(e)
    assert np.allclose(y, expect, rtol=0, atol=1e-9)


def test_quadratures_disagree_slightly():
    cfg = PhantomConfig(size=128)
    p = SimConfig(n_angle=16, n_detector=256).true_params(128)
    x = generate_phantom(cfg, 0).astype(np.float64)
    ref = measure(x, p, "matched")
    for q in ("exact_siddon", "fine_step"):
        rel = np.linalg.norm(measure(x, p, q) - ref) / np.linalg.norm(ref)
        assert 1e-4 < rel < 1e-1, (q, rel)
    with pytest.raises(ValueError):
        measure(x, p, "trapezoid")


def test_split_assignment_is_exhaustive_and_seeded():
    s = split_assignment(50, (0.8, 0.1, 0.1), 0)
    assert s.count("train") == 40 and s.count("val") == 5 and s.count("test") == 5
    assert s == split_assignment(50, (0.8, 0.1, 0.1), 0)
    assert s != split_assignment(50, (0.8, 0.1, 0.1), 1)


def test_simulate_dataset(tmp_path):
    pcfg = PhantomConfig(size=32)
    scfg = SimConfig(n_angle=8, n_detector=64, count=6, splits=(0.5, 0.25, 0.25), dtype="f64")
    m = simulate_dataset(pcfg, scfg, tmp_path)
    loaded = load_manifest(tmp_path / "manifest.json")
    ids = [r.id for r in loaded.records]
    assert ids == [f"{i:05d}" for i in range(6)]
    by_split = {s: {r.id for r in loaded.split(s)} for s in ("train", "val", "test")}
    assert set().union(*by_split.values()) == set(ids)
    assert sum(len(v) for v in by_split.values()) == 6
    p = scfg.true_params(32)
    for rec in loaded.records:
        x, y = loaded.load_pair(rec)
        assert x.shape == (32, 32) and y.shape == (8, 64)
        assert forward_project(x, p).tobytes() == y.tobytes()  # same code path, bitwise
        assert read_tensor(tmp_path / rec.fbp).shape == (32, 32)
    assert loaded.sim_geometry["quadrature"] == "matched"
    assert loaded.sim_geometry["d_source"] == p.d_source
    assert m.seed == loaded.seed


def test_simulate_dataset_noise_and_no_fbp(tmp_path):
    pcfg = PhantomConfig(size=32)
    base = dict(n_angle=8, n_detector=64, count=2, with_fbp=False)
    clean = simulate_dataset(pcfg, SimConfig(**base), tmp_path / "a")
    noisy = simulate_dataset(pcfg, SimConfig(**base, noise_std=0.01), tmp_path / "b")
    again = simulate_dataset(pcfg, SimConfig(**base, noise_std=0.01), tmp_path / "c")
    (xa, ya), (_, yb), (_, yc) = (m.load_pair(m.records[0]) for m in (clean, noisy, again))
    assert ya.dtype == np.float32
    assert 0.005 < np.std(yb - ya) < 0.02
    assert np.array_equal(yb, yc)
    assert not (tmp_path / "a" / "fbp").exists()
    assert clean.records[0].fbp is None
