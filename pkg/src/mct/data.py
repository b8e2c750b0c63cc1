"""Hyperspectral cubes, ground truth, patches and limited-label splits.

Container files (``.hsic`` cube, ``.hsig`` ground truth) are a single JSON
header line followed by a raw little-endian row-major payload.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

CUBE_MAGIC = "HSIC"
GT_MAGIC = "HSIG"
VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class HsiCube:
    values: np.ndarray  # height x width x bands, float32
    name: str = ""

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DataError(f"cube must be height x width x bands, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class GroundTruth:
    labels: np.ndarray  # height x width, uint16, 0 = unlabeled
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DataError(f"ground truth must be 2-D, got shape {self.labels.shape}")
        if not self.class_names:
            top = int(self.labels.max(initial=0))
            self.class_names = [f"class_{i}" for i in range(1, top + 1)]
        top = int(self.labels.max(initial=0))
        if top > self.n_classes:
            raise DataError(f"label {top} exceeds the declared {self.n_classes} classes")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def counts(self) -> np.ndarray:
        """Labeled pixels per class, index 0 is class 1."""
        return np.bincount(self.labels.ravel(), minlength=self.n_classes + 1)[1:]


@dataclass
class Patch:
    values: np.ndarray  # w x w x bands
    center_row: int
    center_col: int
    label: int | None = None


@dataclass
class SplitSpec:
    per_class: int
    seed: int
    train: list[tuple[int, int]]
    test: list[tuple[int, int]]

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "seed": self.seed,
                "train": [list(p) for p in self.train], "test": [list(p) for p in self.test]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(d["per_class"], d["seed"], [tuple(p) for p in d["train"]], [tuple(p) for p in d["test"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- container IO

def _write_container(path, header: dict, payload: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload.tobytes())


def _read_container(path, magic: str) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: header is not JSON ({exc})") from None
    if header.get("magic") != magic:
        raise DataError(f"{path}: bad magic {header.get('magic')!r}, expected {magic!r}")
    if header.get("version") != VERSION:
        raise DataError(f"{path}: unsupported version {header.get('version')!r}")
    return header, raw[nl + 1:]


def save_cube(cube: HsiCube, path) -> None:
    h, w, b = cube.values.shape
    header = {"magic": CUBE_MAGIC, "version": VERSION, "height": h, "width": w, "bands": b,
              "dtype": "f32", "name": cube.name}
    _write_container(path, header, cube.values.astype("<f4"))


def load_cube(path) -> HsiCube:
    header, payload = _read_container(path, CUBE_MAGIC)
    if header.get("dtype") != "f32":
        raise DataError(f"{path}: cube dtype must be f32, got {header.get('dtype')!r}")
    shape = (int(header["height"]), int(header["width"]), int(header["bands"]))
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.isfinite(values).all():
        raise DataError(f"{path}: cube contains non-finite values")
    return HsiCube(values, header.get("name", ""))


def save_gt(gt: GroundTruth, path) -> None:
    h, w = gt.labels.shape
    header = {"magic": GT_MAGIC, "version": VERSION, "height": h, "width": w, "dtype": "u16",
              "classes": gt.n_classes, "class_names": list(gt.class_names)}
    _write_container(path, header, gt.labels.astype("<u2"))


def load_gt(path, cube: HsiCube | None = None) -> GroundTruth:
    header, payload = _read_container(path, GT_MAGIC)
    if header.get("dtype") != "u16":
        raise DataError(f"{path}: ground truth dtype must be u16, got {header.get('dtype')!r}")
    shape = (int(header["height"]), int(header["width"]))
    if len(payload) != shape[0] * shape[1] * 2:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {shape[0] * shape[1] * 2}")
    labels = np.frombuffer(payload, dtype="<u2").reshape(shape).astype(np.uint16)
    n = int(header["classes"])
    names = list(header.get("class_names") or [f"class_{i}" for i in range(1, n + 1)])
    if len(names) != n:
        raise DataError(f"{path}: {len(names)} class names for {n} classes")
    if int(labels.max(initial=0)) > n:
        raise DataError(f"{path}: label {int(labels.max())} exceeds {n} classes")
    if cube is not None and (cube.height, cube.width) != shape:
        raise DataError(f"{path}: ground truth {shape} does not match cube {(cube.height, cube.width)}")
    return GroundTruth(labels, names)


def convert_raw(raw_path, sidecar_path, out_path) -> str:
    """Convert a headerless binary plus sidecar JSON into a container file.

    Sidecar keys: ``kind`` ("cube" or "gt"), ``height``, ``width``, ``bands``
    (cube), ``dtype`` (numpy dtype string, e.g. "<f4", ">i2", "<u1"),
    ``interleave`` ("bip", "bil" or "bsq"; cube only), ``classes`` and
    ``class_names`` (gt), optional ``name``.
    """
    meta = json.loads(Path(sidecar_path).read_text())
    kind = meta.get("kind", "cube")
    dt = np.dtype(meta.get("dtype", "<f4"))
    raw = np.fromfile(raw_path, dtype=dt)
    h, w = int(meta["height"]), int(meta["width"])
    if kind == "cube":
        b = int(meta["bands"])
        if raw.size != h * w * b:
            raise DataError(f"{raw_path}: {raw.size} values, sidecar implies {h * w * b}")
        order = meta.get("interleave", "bip").lower()
        if order == "bip":
            arr = raw.reshape(h, w, b)
        elif order == "bil":
            arr = raw.reshape(h, b, w).transpose(0, 2, 1)
        elif order == "bsq":
            arr = raw.reshape(b, h, w).transpose(1, 2, 0)
        else:
            raise DataError(f"unknown interleave {order!r}")
        save_cube(HsiCube(np.ascontiguousarray(arr, dtype=np.float32), meta.get("name", "")), out_path)
    elif kind == "gt":
        if raw.size != h * w:
            raise DataError(f"{raw_path}: {raw.size} values, sidecar implies {h * w}")
        labels = raw.reshape(h, w)
        if labels.min() < 0:
            raise DataError("negative labels in ground truth")
        n = int(meta.get("classes", labels.max()))
        names = meta.get("class_names") or [f"class_{i}" for i in range(1, n + 1)]
        save_gt(GroundTruth(labels.astype(np.uint16), names), out_path)
    else:
        raise DataError(f"unknown kind {kind!r}")
    return kind


# ---------------------------------------------------------------- preprocessing

def normalize_bands(cube: HsiCube) -> HsiCube:
    """Per-band z-score over all pixels; constant bands become zeros."""
    v = cube.values.astype(np.float64)
    mean = v.mean(axis=(0, 1))
    std = v.std(axis=(0, 1))
    safe = np.where(std > 0, std, 1.0)
    out = (v - mean) / safe
    out[:, :, std == 0] = 0.0
    return HsiCube(out.astype(np.float32), cube.name)


def crop_bands(cube: HsiCube, bands: int) -> HsiCube:
    if bands == cube.bands:
        return cube
    log.warning("dropping %d trailing bands of %s", cube.bands - bands, cube.name or "cube")
    return HsiCube(np.ascontiguousarray(cube.values[:, :, :bands]), cube.name)


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    """Reflect indices about the border without repeating the edge (… 2 1 | 0 1 2 … n-1 | n-2 …)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def extract_patch(cube: HsiCube, row: int, col: int, w: int, label: int | None = None) -> Patch:
    """w x w x B window centred on (row, col); out-of-image neighbours are mirrored."""
    if w % 2 == 0:
        raise DataError(f"patch size must be odd, got {w}")
    if not 1 <= w <= min(cube.height, cube.width):
        raise DataError(f"patch size {w} outside [1, {min(cube.height, cube.width)}]")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise DataError(f"position ({row}, {col}) outside the cube")
    r = w // 2
    rows = _mirror(np.arange(row - r, row + r + 1), cube.height)
    cols = _mirror(np.arange(col - r, col + r + 1), cube.width)
    return Patch(cube.values[np.ix_(rows, cols)], row, col, label)


def extract_patches(cube: HsiCube, positions: Sequence[tuple[int, int]], w: int) -> np.ndarray:
    """Stack of patches, N x w x w x B."""
    if w % 2 == 0:
        raise DataError(f"patch size must be odd, got {w}")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    r = w // 2
    off = np.arange(-r, r + 1)
    rows = _mirror(pos[:, :1] + off, cube.height)
    cols = _mirror(pos[:, 1:] + off, cube.width)
    return cube.values[rows[:, :, None], cols[:, None, :]]


# ---------------------------------------------------------------- splits / sampling

def stratified_split(gt: GroundTruth, per_class: int, seed: int) -> SplitSpec:
    """``per_class`` random training pixels from every class present; the rest is test."""
    rng = np.random.default_rng(seed)
    flat = gt.labels.ravel()
    width = gt.labels.shape[1]
    train_idx, test_idx = [], []
    for c in range(1, gt.n_classes + 1):
        idx = np.flatnonzero(flat == c)
        if idx.size == 0:
            continue
        if idx.size < per_class:
            raise DataError(f"class {c} has {idx.size} labeled pixels, fewer than {per_class}")
        chosen = np.zeros(idx.size, dtype=bool)
        chosen[rng.choice(idx.size, per_class, replace=False)] = True
        train_idx.append(idx[chosen])
        test_idx.append(idx[~chosen])
    train = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, dtype=np.int64)
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.int64)
    as_pairs = lambda a: [(int(i // width), int(i % width)) for i in a]  # noqa: E731
    return SplitSpec(per_class, seed, as_pairs(train), as_pairs(test))


def labels_at(gt: GroundTruth, positions: Sequence[tuple[int, int]]) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    return gt.labels[pos[:, 0], pos[:, 1]].astype(np.int64)


def stream_positions(height: int, width: int, n: int, seed: int, epoch: int = 0) -> np.ndarray:
    """``n`` uniform (row, col) draws over the whole scene, keyed by (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    flat = rng.integers(0, height * width, size=n)
    return np.stack([flat // width, flat % width], axis=1)


def pretrain_stream(cube: HsiCube, w: int, batch: int, seed: int, epoch: int = 0,
                    n_batches: int | None = None) -> Iterator[list[Patch]]:
    """Unlabeled patch batches drawn uniformly from every pixel of the scene.

    One epoch is ``height * width / batch`` batches unless ``n_batches`` is given.
    """
    if n_batches is None:
        n_batches = max(1, (cube.height * cube.width) // batch)
    pos = stream_positions(cube.height, cube.width, n_batches * batch, seed, epoch)
    for i in range(n_batches):
        chunk = pos[i * batch:(i + 1) * batch]
        yield [extract_patch(cube, int(r), int(c), w) for r, c in chunk]


def pretrain_batches(cube: HsiCube, w: int, batch: int, seed: int, epoch: int = 0,
                     n_batches: int | None = None) -> Iterator[np.ndarray]:
    """Array form of :func:`pretrain_stream`: N x w x w x B per batch."""
    if n_batches is None:
        n_batches = max(1, (cube.height * cube.width) // batch)
    pos = stream_positions(cube.height, cube.width, n_batches * batch, seed, epoch)
    for i in range(n_batches):
        yield extract_patches(cube, pos[i * batch:(i + 1) * batch], w)
