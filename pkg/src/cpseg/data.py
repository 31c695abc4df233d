"""Volume container, MVOL file format, and dataset manifests.

A Volume is a 3D scalar grid with per-axis physical spacing in mm, stored
z-major (slice-contiguous). Images are float32, label maps uint8. Files use
the little-endian MVOL container:

    magic "MVOL" | version u32=1 | dtype u8 (0=f32 image, 1=u8 labels)
    | reserved u8[3]=0 | dims u64*3 (z,y,x) | spacing f64*3 mm (z,y,x)
    | raw payload, z-major

Manifests are UTF-8 text: first line ``classes=<N>``, then one case per
line as ``image_path,label_path`` where an empty label path marks an
unlabeled case. Relative paths are resolved against the manifest's
directory.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyLabeledSet,
    InvalidVolume,
    IoFailure,
    MalformedHeader,
    MissingFile,
    TruncatedPayload,
)

MAGIC = b"MVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIB3x3Q3d")

KIND_IMAGE = "image"
KIND_LABELS = "labels"
_DTYPE_CODE = {KIND_IMAGE: 0, KIND_LABELS: 1}
_CODE_KIND = {0: KIND_IMAGE, 1: KIND_LABELS}
_NUMPY_DTYPE = {KIND_IMAGE: np.dtype("<f4"), KIND_LABELS: np.dtype("<u1")}


@dataclass
class Volume:
    """3D scalar grid. ``values`` has shape (z, y, x); spacing is mm/voxel.

    Treat instances as immutable values after construction; they may be
    shared freely across threads.
    """

    values: np.ndarray
    spacing: tuple[float, float, float]
    kind: str = KIND_IMAGE

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def num_slices(self) -> int:
        return int(self.values.shape[0])


def new_image(values, spacing) -> Volume:
    v = Volume(np.ascontiguousarray(values, dtype=np.float32), _spacing3(spacing), KIND_IMAGE)
    validate_volume(v)
    return v


def new_labels(values, spacing) -> Volume:
    v = Volume(np.ascontiguousarray(values, dtype=np.uint8), _spacing3(spacing), KIND_LABELS)
    validate_volume(v)
    return v


def _spacing3(spacing) -> tuple[float, float, float]:
    s = tuple(float(x) for x in spacing)
    if len(s) != 3:
        raise InvalidVolume(f"spacing must have 3 components, got {len(s)}")
    return s


def validate_volume(v: Volume) -> None:
    if v.values.ndim != 3:
        raise InvalidVolume(f"expected 3D values, got ndim={v.values.ndim}")
    if any(d <= 0 for d in v.values.shape):
        raise InvalidVolume(f"zero-sized dims {v.values.shape}")
    if not all(np.isfinite(s) and s > 0 for s in v.spacing):
        raise InvalidVolume(f"spacing must be positive and finite, got {v.spacing}")
    if v.kind not in _DTYPE_CODE:
        raise InvalidVolume(f"unknown kind {v.kind!r}")
    if v.kind == KIND_LABELS and v.values.dtype != np.uint8:
        raise InvalidVolume("label volumes must be uint8")
    if v.kind == KIND_IMAGE and v.values.dtype != np.float32:
        raise InvalidVolume("image volumes must be float32")


def volumes_equal(a: Volume, b: Volume) -> bool:
    return (
        a.kind == b.kind
        and a.dims == b.dims
        and a.spacing == b.spacing
        and np.array_equal(a.values.view(np.uint8), b.values.view(np.uint8))
    )


def write_volume(volume: Volume, path) -> None:
    """Serialize to MVOL. The payload round-trips bit-exactly."""
    validate_volume(volume)
    dtype = _NUMPY_DTYPE[volume.kind]
    payload = np.ascontiguousarray(volume.values, dtype=dtype)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        _DTYPE_CODE[volume.kind],
        *volume.dims,
        *volume.spacing,
    )
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_volume(path) -> Volume:
    """Read an MVOL file; never allocates more than the header-declared payload."""
    try:
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise MalformedHeader(f"{path}: header truncated at {len(head)} bytes")
            magic, version, code, dz, dy, dx, sz, sy, sx = _HEADER.unpack(head)
            if magic != MAGIC:
                raise MalformedHeader(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise MalformedHeader(f"{path}: unsupported version {version}")
            if code not in _CODE_KIND:
                raise MalformedHeader(f"{path}: unknown dtype code {code}")
            kind = _CODE_KIND[code]
            dims = (dz, dy, dx)
            if any(d == 0 for d in dims):
                raise MalformedHeader(f"{path}: zero-sized dims {dims}")
            dtype = _NUMPY_DTYPE[kind]
            count = dz * dy * dx
            raw = f.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise TruncatedPayload(
                    f"{path}: payload has {len(raw)} bytes, header implies {count * dtype.itemsize}"
                )
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    values = np.frombuffer(raw, dtype=dtype).reshape(dims)
    v = Volume(values.copy(), (sz, sy, sx), kind)
    validate_volume(v)
    return v


@dataclass
class DatasetManifest:
    """Labeled (image, label) path pairs and unlabeled image paths."""

    labeled: list[tuple[str, str]] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)
    num_classes: int = 2

    @property
    def num_labeled(self) -> int:
        return len(self.labeled)

    @property
    def num_unlabeled(self) -> int:
        return len(self.unlabeled)


def write_manifest(manifest: DatasetManifest, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"classes={manifest.num_classes}\n")
            for img, lbl in manifest.labeled:
                f.write(f"{img},{lbl}\n")
            for img in manifest.unlabeled:
                f.write(f"{img},\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_manifest(path, require_labeled: bool = True) -> DatasetManifest:
    """Parse a manifest and verify every referenced file exists."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f]
    except OSError as e:
        raise IoFailure(f"cannot read manifest {path}: {e}") from e

    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("classes="):
        raise MalformedHeader(f"{path}: first manifest line must be 'classes=<N>'")
    try:
        num_classes = int(lines[0].split("=", 1)[1])
    except ValueError as e:
        raise MalformedHeader(f"{path}: bad classes line {lines[0]!r}") from e
    if num_classes < 2:
        raise MalformedHeader(f"{path}: num_classes must be >= 2, got {num_classes}")

    manifest = DatasetManifest(num_classes=num_classes)
    for ln in lines[1:]:
        img, _, lbl = ln.partition(",")
        img = resolve(img.strip())
        lbl = lbl.strip()
        if not os.path.isfile(img):
            raise MissingFile(f"{path}: missing image {img}")
        if lbl:
            lbl = resolve(lbl)
            if not os.path.isfile(lbl):
                raise MissingFile(f"{path}: missing labels {lbl}")
            manifest.labeled.append((img, lbl))
        else:
            manifest.unlabeled.append(img)

    if require_labeled and not manifest.labeled:
        raise EmptyLabeledSet(f"{path}: no labeled cases; supervised loss is impossible")
    return manifest
