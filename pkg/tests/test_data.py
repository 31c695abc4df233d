import struct

import numpy as np
import pytest

from cpseg.data import (
    DatasetManifest,
    Volume,
    load_manifest,
    new_image,
    new_labels,
    read_volume,
    volumes_equal,
    write_manifest,
    write_volume,
)
from cpseg.errors import (
    EmptyLabeledSet,
    InvalidVolume,
    MalformedHeader,
    MissingFile,
    TruncatedPayload,
)


def test_round_trip_image(tmp_path):
    v = new_image(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1.0, 1.0, 1.0))
    path = tmp_path / "a.mvol"
    write_volume(v, path)
    assert volumes_equal(read_volume(path), v)


def test_round_trip_labels(tmp_path):
    v = new_labels(np.array([[[0, 1], [2, 3]]], dtype=np.uint8), (0.5, 2.0, 1.5))
    path = tmp_path / "b.mvol"
    write_volume(v, path)
    back = read_volume(path)
    assert back.kind == "labels"
    assert volumes_equal(back, v)


def test_round_trip_random_volumes(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(20):
        dims = tuple(rng.integers(1, 9, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.2, 3.0, size=3))
        if i % 2 == 0:
            v = new_image(rng.normal(size=dims).astype(np.float32), spacing)
        else:
            v = new_labels(rng.integers(0, 256, size=dims).astype(np.uint8), spacing)
        path = tmp_path / f"r{i}.mvol"
        write_volume(v, path)
        assert volumes_equal(read_volume(path), v)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.mvol"
    path.write_bytes(b"XVOL" + b"\x00" * 100)
    with pytest.raises(MalformedHeader):
        read_volume(path)


def test_bad_version_and_dtype(tmp_path):
    good = tmp_path / "good.mvol"
    write_volume(new_image(np.zeros((1, 1, 1), np.float32), (1, 1, 1)), good)
    raw = bytearray(good.read_bytes())

    bad_version = tmp_path / "v.mvol"
    broken = raw.copy()
    broken[4:8] = struct.pack("<I", 9)
    bad_version.write_bytes(bytes(broken))
    with pytest.raises(MalformedHeader):
        read_volume(bad_version)

    bad_dtype = tmp_path / "d.mvol"
    broken = raw.copy()
    broken[8] = 7
    bad_dtype.write_bytes(bytes(broken))
    with pytest.raises(MalformedHeader):
        read_volume(bad_dtype)


def test_truncated_payload(tmp_path):
    # header declares 4x4x4 f32 (256 bytes) but only 32 bytes follow
    header = struct.pack("<4sIB3x3Q3d", b"MVOL", 1, 0, 4, 4, 4, 1.0, 1.0, 1.0)
    path = tmp_path / "t.mvol"
    path.write_bytes(header + b"\x00" * 32)
    with pytest.raises(TruncatedPayload):
        read_volume(path)


def test_trailing_bytes_ignored(tmp_path):
    # reader consumes exactly the header-declared payload
    v = new_image(np.ones((2, 2, 2), np.float32), (1, 1, 1))
    path = tmp_path / "extra.mvol"
    write_volume(v, path)
    with open(path, "ab") as f:
        f.write(b"garbage")
    assert volumes_equal(read_volume(path), v)


def test_zero_dims_rejected(tmp_path):
    v = Volume(np.zeros((0, 2, 2), dtype=np.float32), (1.0, 1.0, 1.0), "image")
    with pytest.raises(InvalidVolume):
        write_volume(v, tmp_path / "z.mvol")


def test_bad_spacing_rejected():
    with pytest.raises(InvalidVolume):
        new_image(np.zeros((2, 2, 2), np.float32), (1.0, 0.0, 1.0))
    with pytest.raises(InvalidVolume):
        new_image(np.zeros((2, 2, 2), np.float32), (1.0, float("nan"), 1.0))


def test_out_of_range_label_values_still_writable(tmp_path):
    # range-vs-num_classes validation is the caller's duty
    v = new_labels(np.full((1, 1, 1), 255, dtype=np.uint8), (1, 1, 1))
    path = tmp_path / "big.mvol"
    write_volume(v, path)
    assert read_volume(path).values[0, 0, 0] == 255


def test_header_is_little_endian(tmp_path):
    v = new_image(np.zeros((3, 2, 1), np.float32), (0.5, 1.5, 2.5))
    path = tmp_path / "le.mvol"
    write_volume(v, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MVOL"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    assert struct.unpack("<3Q", raw[12:36]) == (3, 2, 1)
    assert struct.unpack("<3d", raw[36:60]) == (0.5, 1.5, 2.5)


def _make_files(tmp_path, n_labeled, n_unlabeled):
    manifest = DatasetManifest(num_classes=3)
    for i in range(n_labeled):
        img, lbl = f"img_{i}.mvol", f"seg_{i}.mvol"
        write_volume(new_image(np.zeros((2, 2, 2), np.float32), (1, 1, 1)), tmp_path / img)
        write_volume(new_labels(np.zeros((2, 2, 2), np.uint8), (1, 1, 1)), tmp_path / lbl)
        manifest.labeled.append((img, lbl))
    for j in range(n_unlabeled):
        img = f"unl_{j}.mvol"
        write_volume(new_image(np.zeros((2, 2, 2), np.float32), (1, 1, 1)), tmp_path / img)
        manifest.unlabeled.append(img)
    path = tmp_path / "manifest.txt"
    write_manifest(manifest, path)
    return path


def test_manifest_counts(tmp_path):
    path = _make_files(tmp_path, 2, 3)
    m = load_manifest(path)
    assert m.num_labeled == 2
    assert m.num_unlabeled == 3
    assert m.num_classes == 3


def test_manifest_empty_labeled(tmp_path):
    path = _make_files(tmp_path, 0, 2)
    with pytest.raises(EmptyLabeledSet):
        load_manifest(path)
    # fingerprinting may legitimately run on unlabeled-only sets
    m = load_manifest(path, require_labeled=False)
    assert m.num_unlabeled == 2


def test_manifest_missing_file(tmp_path):
    path = tmp_path / "manifest.txt"
    path.write_text("classes=2\nnope.mvol,\n")
    with pytest.raises(MissingFile):
        load_manifest(path, require_labeled=False)


def test_manifest_relative_paths_resolve_against_manifest_dir(tmp_path):
    sub = tmp_path / "sub"
    sub.mkdir()
    path = _make_files(sub, 1, 0)
    m = load_manifest(path)
    assert m.labeled[0][0].startswith(str(sub))


def test_manifest_requires_classes_line(tmp_path):
    path = tmp_path / "manifest.txt"
    path.write_text("a.mvol,b.mvol\n")
    with pytest.raises(MalformedHeader):
        load_manifest(path)
