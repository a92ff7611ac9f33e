import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fanbeam.tensor_io import (
    DatasetManifest,
    ManifestError,
    Record,
    TensorFormatError,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)

finite = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=finite))
def test_roundtrip_is_bitwise(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "a.ctt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_tensor(tmp_path / "a.ctt", a)
    raw = (tmp_path / "a.ctt").read_bytes()
    assert raw[:4] == b"CTT1"
    assert raw[4:6] == bytes([1, 2])
    assert struct.unpack("<2Q", raw[6:22]) == (2, 3)
    assert np.frombuffer(raw[22:], "<f8").tolist() == list(range(6))


def test_rejects_bad_magic(tmp_path):
    (tmp_path / "x.ctt").write_bytes(b"CTT2" + bytes(20))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(tmp_path / "x.ctt")


def test_rejects_truncated_payload(tmp_path):
    write_tensor(tmp_path / "a.ctt", np.ones((4, 4), np.float32))
    raw = (tmp_path / "a.ctt").read_bytes()
    (tmp_path / "a.ctt").write_bytes(raw[:-3])
    with pytest.raises(TensorFormatError, match="payload"):
        read_tensor(tmp_path / "a.ctt")


def test_rejects_unknown_dtype_code(tmp_path):
    (tmp_path / "a.ctt").write_bytes(b"CTT1" + bytes([7, 1]) + struct.pack("<Q", 1) + bytes(4))
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(tmp_path / "a.ctt")


@pytest.mark.parametrize("bad", [np.ones(3, np.int32), np.array([1.0, np.nan]), np.zeros((0, 2)), np.float64(1.0)])
def test_write_rejects_unsupported(tmp_path, bad):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "a.ctt", bad)


def _toy_manifest(root):
    recs = []
    for i, split in enumerate(["train", "train", "val", "test"]):
        write_tensor(root / f"p{i}.ctt", np.full((4, 4), i, np.float32))
        write_tensor(root / f"s{i}.ctt", np.full((3, 5), i, np.float32))
        recs.append(Record(f"r{i}", f"p{i}.ctt", f"s{i}.ctt", split=split))
    return DatasetManifest(recs, seed=3, sim_geometry={"d_source": 1.0})


def test_manifest_roundtrip(tmp_path):
    m = _toy_manifest(tmp_path)
    save_manifest(tmp_path / "manifest.json", m)
    back = load_manifest(tmp_path / "manifest.json")
    assert back.records == m.records and back.seed == 3 and back.sim_geometry == {"d_source": 1.0}
    x, y = back.load_pair(back.split("val")[0])
    assert x.shape == (4, 4) and y.shape == (3, 5) and x[0, 0] == 2
    assert "fbp" not in json.loads((tmp_path / "manifest.json").read_text())["records"][0]


def test_manifest_missing_file_and_version(tmp_path):
    m = _toy_manifest(tmp_path)
    save_manifest(tmp_path / "manifest.json", m)
    (tmp_path / "s3.ctt").unlink()
    with pytest.raises(ManifestError, match="missing"):
        load_manifest(tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="version"):
        load_manifest(tmp_path / "manifest.json")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.json")


def test_manifest_rejects_duplicates_and_bad_split():
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest([Record("a", "p", "s"), Record("a", "p", "s")])
    with pytest.raises(ManifestError, match="split"):
        DatasetManifest([Record("a", "p", "s", split="holdout")])
