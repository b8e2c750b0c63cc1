import json
import struct

import numpy as np
import pytest

from mct.data import (DataError, GroundTruth, HsiCube, SplitSpec, convert_raw, extract_patch, extract_patches,
                      load_cube, load_gt, normalize_bands, pretrain_batches, pretrain_stream, save_cube, save_gt,
                      stratified_split, stream_positions)
from mct.datasets import SALINAS_CLASSES, YRE_CLASSES, reference_gt, synthetic_scene


def handmade_cube_file(path, values):
    header = {"magic": "HSIC", "version": 1, "height": 2, "width": 2, "bands": 3, "dtype": "f32", "name": "hand"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(struct.pack("<12f", *values))


def test_cube_row_major_from_hand_written_file(tmp_path):
    handmade_cube_file(tmp_path / "c.hsic", [float(i) for i in range(12)])
    cube = load_cube(tmp_path / "c.hsic")
    assert cube.values.shape == (2, 2, 3)
    # (row, col, band) order: pixel (0,1) holds values 3, 4, 5
    assert cube.values[0, 1].tolist() == [3.0, 4.0, 5.0]
    assert cube.values[1, 0, 2] == 8.0
    assert cube.name == "hand"


def test_cube_and_gt_round_trip_bit_identical(tmp_path, rng):
    cube = HsiCube(rng.normal(size=(4, 5, 6)).astype(np.float32), "x")
    save_cube(cube, tmp_path / "a.hsic")
    back = load_cube(tmp_path / "a.hsic")
    assert back.values.tobytes() == cube.values.tobytes()
    gt = GroundTruth(rng.integers(0, 4, size=(4, 5)).astype(np.uint16), ["a", "b", "c"])
    save_gt(gt, tmp_path / "a.hsig")
    g2 = load_gt(tmp_path / "a.hsig", cube)
    np.testing.assert_array_equal(g2.labels, gt.labels)
    assert g2.class_names == ["a", "b", "c"]


def test_load_errors(tmp_path):
    handmade_cube_file(tmp_path / "c.hsic", [0.0] * 12)
    raw = (tmp_path / "c.hsic").read_bytes()
    (tmp_path / "bad.hsic").write_bytes(raw.replace(b"HSIC", b"NOPE"))
    with pytest.raises(DataError, match="magic"):
        load_cube(tmp_path / "bad.hsic")
    (tmp_path / "short.hsic").write_bytes(raw[:-4])
    with pytest.raises(DataError, match="payload"):
        load_cube(tmp_path / "short.hsic")
    (tmp_path / "nan.hsic").write_bytes(raw[:-4] + struct.pack("<f", float("nan")))
    with pytest.raises(DataError, match="non-finite"):
        load_cube(tmp_path / "nan.hsic")


def test_gt_label_beyond_class_count_rejected(tmp_path):
    labels = np.zeros((2, 2), np.uint16)
    labels[0, 0] = 21
    with pytest.raises(DataError):
        GroundTruth(labels, [f"c{i}" for i in range(20)])
    header = {"magic": "HSIG", "version": 1, "height": 2, "width": 2, "dtype": "u16", "classes": 20,
              "class_names": [f"c{i}" for i in range(20)]}
    (tmp_path / "g.hsig").write_bytes(json.dumps(header).encode() + b"\n" + labels.astype("<u2").tobytes())
    with pytest.raises(DataError, match="exceeds"):
        load_gt(tmp_path / "g.hsig")


def test_gt_cube_shape_mismatch(tmp_path):
    save_gt(GroundTruth(np.ones((3, 3), np.uint16)), tmp_path / "g.hsig")
    with pytest.raises(DataError, match="does not match"):
        load_gt(tmp_path / "g.hsig", HsiCube(np.zeros((2, 3, 1), np.float32)))


@pytest.mark.parametrize("order", ["bip", "bil", "bsq"])
def test_convert_raw_interleaves(tmp_path, rng, order):
    cube = rng.normal(size=(3, 4, 5)).astype(np.float32)
    arr = {"bip": cube, "bil": cube.transpose(0, 2, 1), "bsq": cube.transpose(2, 0, 1)}[order]
    arr.astype(">f4").tofile(tmp_path / "r.bin")
    (tmp_path / "r.json").write_text(json.dumps({"kind": "cube", "height": 3, "width": 4, "bands": 5,
                                                 "dtype": ">f4", "interleave": order}))
    assert convert_raw(tmp_path / "r.bin", tmp_path / "r.json", tmp_path / "o.hsic") == "cube"
    np.testing.assert_array_equal(load_cube(tmp_path / "o.hsic").values, cube)


def test_normalize_examples(rng):
    v = np.zeros((2, 1, 2), np.float32)
    v[:, 0, 0] = 7.0
    v[:, 0, 1] = [0.0, 2.0]
    out = normalize_bands(HsiCube(v)).values
    assert (out[:, 0, 0] == 0).all()
    np.testing.assert_allclose(out[:, 0, 1], [-1.0, 1.0], atol=1e-7)

    cube = HsiCube((rng.normal(size=(10, 12, 4)) * [1, 10, 100, 0.01] + [5, -3, 0, 1e3]).astype(np.float32))
    once = normalize_bands(cube)
    assert np.abs(once.values.mean(axis=(0, 1))).max() < 1e-6
    assert np.abs(once.values.std(axis=(0, 1)) - 1).max() < 1e-4
    np.testing.assert_allclose(normalize_bands(once).values, once.values, atol=1e-6)


def mirror_oracle(cube, row, col, w):
    r = w // 2
    padded = np.pad(cube, ((r, r), (r, r), (0, 0)), mode="reflect")
    return padded[row:row + w, col:col + w]


def test_patch_interior_and_corner():
    cube = HsiCube(np.arange(4 * 4 * 2, dtype=np.float32).reshape(4, 4, 2))
    p = extract_patch(cube, 1, 2, 3)
    np.testing.assert_array_equal(p.values, cube.values[0:3, 1:4])
    corner = extract_patch(cube, 0, 0, 3).values
    np.testing.assert_array_equal(corner[0, 0], cube.values[1, 1])
    for r in range(4):
        for c in range(4):
            np.testing.assert_array_equal(extract_patch(cube, r, c, 3).values, mirror_oracle(cube.values, r, c, 3))


def test_patch_errors():
    cube = HsiCube(np.zeros((4, 4, 1), np.float32))
    with pytest.raises(DataError):
        extract_patch(cube, 0, 0, 2)
    with pytest.raises(DataError):
        extract_patch(cube, 0, 0, 5)


def test_patch_center_fidelity(rng):
    cube = HsiCube(rng.normal(size=(11, 13, 3)).astype(np.float32))
    pos = np.stack([rng.integers(0, 11, 100), rng.integers(0, 13, 100)], axis=1)
    batch = extract_patches(cube, pos, 9)
    for (r, c), patch in zip(pos, batch):
        assert (patch[4, 4] == cube.values[r, c]).all()
        np.testing.assert_array_equal(patch, extract_patch(cube, int(r), int(c), 9).values)
        np.testing.assert_array_equal(patch, mirror_oracle(cube.values, r, c, 9))


def test_split_counts_disjoint_deterministic():
    _, gt = synthetic_scene(20, 20, 4, n_classes=3, seed=2)
    a, b = stratified_split(gt, 5, 9), stratified_split(gt, 5, 9)
    assert a.train == b.train and a.test == b.test
    assert not set(a.train) & set(a.test)
    labels = [gt.labels[r, c] for r, c in a.train]
    assert np.bincount(labels, minlength=4)[1:].tolist() == [5, 5, 5]
    assert len(a.train) + len(a.test) == int((gt.labels > 0).sum())
    assert stratified_split(gt, 5, 10).train != a.train


def test_split_too_small_class():
    labels = np.array([[1, 1, 2]], np.uint16)
    with pytest.raises(DataError, match="class 2"):
        stratified_split(GroundTruth(labels), 2, 0)


def test_split_spec_round_trip(tmp_path):
    _, gt = synthetic_scene(10, 10, 2, seed=0)
    s = stratified_split(gt, 3, 1)
    s.save(tmp_path / "s.json")
    assert SplitSpec.load(tmp_path / "s.json") == s


def test_reference_split_per_class_counts():
    """Per-class rows of both label tables are reproduced exactly."""
    for name, rows, k in (("salinas", SALINAS_CLASSES, 5), ("yre", YRE_CLASSES, 10)):
        gt = reference_gt(name)
        split = stratified_split(gt, k, 0)
        test_counts = np.bincount([gt.labels[p] for p in split.test], minlength=len(rows) + 1)[1:]
        assert test_counts.tolist() == [r[2] for r in rows]
        assert len(split.train) == k * len(rows)


def test_pretrain_stream_properties():
    cube, _ = synthetic_scene(12, 10, 3, seed=0)
    a = list(pretrain_stream(cube, 5, 4, seed=3, n_batches=3))
    b = list(pretrain_stream(cube, 5, 4, seed=3, n_batches=3))
    assert [(p.center_row, p.center_col) for batch in a for p in batch] == \
           [(p.center_row, p.center_col) for batch in b for p in batch]
    assert all(p.label is None for batch in a for p in batch)
    arrays = list(pretrain_batches(cube, 5, 4, seed=3, n_batches=3))
    np.testing.assert_array_equal(arrays[1], np.stack([p.values for p in a[1]]))
    assert not np.array_equal(stream_positions(12, 10, 50, 3, 0), stream_positions(12, 10, 50, 3, 1))


def test_stream_selection_frequency_uniform():
    h, w, n = 10, 10, 10_000
    pos = stream_positions(h, w, n, seed=0)
    counts = np.bincount(pos[:, 0] * w + pos[:, 1], minlength=h * w)
    p = 1 / (h * w)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.abs(counts - n * p).max() <= 4 * sigma
