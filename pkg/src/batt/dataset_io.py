"""Dataset container, standard-format loaders and the BATTDS binary format.

BATTDS layout (little-endian)::

    b"BATT" | u32 version=1 | u32 N | u32 C | u32 H | u32 W | u32 K | u8 split
    N x [u16 label | u8 poisoned | C*H*W f32 intensities]
    u64 FNV-1a of every preceding byte
"""

from __future__ import annotations

import csv
import enum
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checksum import Fnv1a64
from .transforms import resize

BATTDS_MAGIC = b"BATT"
BATTDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIB")

CIFAR_RECORD = 3073
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetValidationError(ValueError):
    pass


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class CorruptRecordError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ManifestError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class Split(enum.IntEnum):
    TRAIN = 0
    TEST = 1

    @classmethod
    def parse(cls, value) -> "Split":
        if isinstance(value, Split):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


class LabeledSample(NamedTuple):
    image: np.ndarray
    label: int
    poisoned: bool


@dataclass
class Dataset:
    """Struct-of-arrays sample store: ``images[i]``, ``labels[i]``, ``poisoned[i]``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Split = Split.TRAIN
    source: str = ""
    poisoned: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.split = Split.parse(self.split)
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poisoned is None:
            self.poisoned = np.zeros(len(self.labels), dtype=bool)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        self.validate()

    def validate(self) -> None:
        n = len(self.labels)
        if n == 0:
            raise DatasetValidationError("dataset is empty")
        if self.images.ndim != 4 or self.images.shape[0] != n:
            raise DatasetValidationError(
                f"images must be (N, C, H, W) with N={n}, got {self.images.shape}"
            )
        if self.poisoned.shape != (n,):
            raise DatasetValidationError("poison flags must have one entry per sample")
        if self.num_classes < 1:
            raise DatasetValidationError(f"num_classes must be positive, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetValidationError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]), bool(self.poisoned[i]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, source: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[idx].copy(),
            self.labels[idx].copy(),
            self.num_classes,
            self.split,
            source if source is not None else f"{self.source}[subset n={len(idx)}]",
            self.poisoned[idx].copy(),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<IIB", len(self), self.num_classes, int(self.split)))
        h.update(np.asarray(self.images.shape, dtype="<u4").tobytes())
        h.update(self.images.astype("<f4", copy=False).tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        h.update(self.poisoned.astype(np.uint8).tobytes())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and self.images.shape == other.images.shape
            and np.array_equal(self.images.view(np.uint32), other.images.view(np.uint32))
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.poisoned, other.poisoned)
        )


# --------------------------------------------------------------------------- CIFAR-10


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    expected = CIFAR_RECORD * CIFAR_PER_FILE
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    size = path.stat().st_size
    if size != expected:
        raise FormatError(f"{path}: size {size} bytes, expected {expected} ({CIFAR_PER_FILE} records of {CIFAR_RECORD})")
    raw = np.fromfile(path, dtype=np.uint8).reshape(CIFAR_PER_FILE, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptRecordError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    images = raw[:, 1:].reshape(CIFAR_PER_FILE, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10_binary(directory) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch of the binary CIFAR-10 release."""
    directory = Path(directory)
    parts = [_read_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        10,
        Split.TRAIN,
        f"cifar10-binary:{directory}",
    )
    test_images, test_labels = _read_cifar_file(directory / CIFAR_TEST_FILE)
    test = Dataset(test_images, test_labels, 10, Split.TEST, f"cifar10-binary:{directory}")
    return train, test


# --------------------------------------------------------------------------- IDX


def _read_bytes(path: Path) -> bytes:
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing IDX file: {path}")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, num_classes: int | None = None, split=Split.TRAIN) -> Dataset:
    img_raw = _read_bytes(Path(images_path))
    lbl_raw = _read_bytes(Path(labels_path))
    if len(img_raw) < 16:
        raise TruncatedFileError(f"{images_path}: shorter than the 16-byte IDX image header")
    if len(lbl_raw) < 8:
        raise TruncatedFileError(f"{labels_path}: shorter than the 8-byte IDX label header")
    magic, n, h, w = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, ln = struct.unpack(">II", lbl_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if n != ln:
        raise CountMismatchError(f"{images_path} holds {n} images but {labels_path} holds {ln} labels")
    if len(img_raw) != 16 + n * h * w:
        raise TruncatedFileError(f"{images_path}: {len(img_raw)} bytes, expected {16 + n * h * w}")
    if len(lbl_raw) != 8 + n:
        raise TruncatedFileError(f"{labels_path}: {len(lbl_raw)} bytes, expected {8 + n}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    return Dataset(pixels.astype(np.float32) / np.float32(255.0), labels, k, split, f"idx:{images_path}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 ``(N, H, W)`` images and labels as an uncompressed IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


# --------------------------------------------------------------------------- image folders


def load_image_dir(path, manifest_csv, num_classes: int | None = None, size=(32, 32), split=Split.TRAIN) -> Dataset:
    """Decode images listed in a ``path,label`` CSV, as RGB, resized to ``size``."""
    from PIL import Image as PILImage, UnidentifiedImageError

    root = Path(path)
    rows: list[tuple[int, str, str]] = []
    with open(manifest_csv, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not row[-1].strip().lstrip("-").isdigit():
                continue  # header
            rows.append((lineno, row[0].strip(), row[1].strip() if len(row) > 1 else ""))

    errors: list[str] = []
    images, labels = [], []
    for lineno, rel, label_text in rows:
        try:
            label = int(label_text)
        except ValueError:
            errors.append(f"row {lineno}: label {label_text!r} is not an integer")
            continue
        if label < 0 or (num_classes is not None and label >= num_classes):
            errors.append(f"row {lineno}: label {label} outside [0, {num_classes})")
            continue
        file = root / rel
        if not file.is_file():
            errors.append(f"row {lineno}: missing file {file}")
            continue
        try:
            with PILImage.open(file) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            errors.append(f"row {lineno}: cannot decode {file}: {exc}")
            continue
        chw = np.ascontiguousarray(rgb.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)
        images.append(resize(chw, *size))
        labels.append(label)
    if errors:
        raise ManifestError(errors)
    if not images:
        raise ManifestError([f"{manifest_csv}: no rows"])
    k = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(np.stack(images), np.asarray(labels), k, split, f"image-dir:{root}")


# --------------------------------------------------------------------------- BATTDS


def _record_dtype(chw: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("flag", "u1"), ("pixels", "<f4", (chw,))])


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def write_battds(dataset: Dataset, path, manifest: dict | None = None) -> int:
    """Persist ``dataset``; returns the trailing checksum. ``manifest`` goes to the JSON sidecar."""
    if len(dataset) == 0:
        raise DatasetValidationError("refusing to write an empty dataset")
    dataset.validate()
    if dataset.num_classes > 0xFFFF:
        raise DatasetValidationError("label does not fit in u16")
    n = len(dataset)
    c, h, w = dataset.shape
    header = _HEADER.pack(BATTDS_MAGIC, BATTDS_VERSION, n, c, h, w, dataset.num_classes, int(dataset.split))
    records = np.empty(n, dtype=_record_dtype(c * h * w))
    records["label"] = dataset.labels
    records["flag"] = dataset.poisoned
    records["pixels"] = dataset.images.reshape(n, -1)
    payload = records.tobytes()
    checksum = Fnv1a64().update(header).update(payload).value
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    if manifest is not None:
        with open(manifest_path(path), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return checksum


def read_battds(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != BATTDS_MAGIC:
        raise BadMagicError(f"{path}: not a BATTDS file (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size + 8:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the header")
    _, version, n, c, h, w, k, split = _HEADER.unpack_from(raw)
    if version != BATTDS_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, this reader supports {BATTDS_VERSION}")
    rec = _record_dtype(c * h * w)
    expected = _HEADER.size + n * rec.itemsize + 8
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected {expected}")
    body = memoryview(raw)[: expected - 8]
    (stored,) = struct.unpack_from("<Q", raw, expected - 8)
    actual = Fnv1a64().update(body).value
    if stored != actual:
        raise ChecksumError(f"{path}: checksum {actual:016x} does not match stored {stored:016x}")
    records = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    flags = records["flag"]
    if flags.max(initial=0) > 1:
        bad = int(np.flatnonzero(flags > 1)[0])
        raise CorruptRecordError(f"{path}: record {bad} has poison flag {int(flags[bad])}")
    return Dataset(
        records["pixels"].reshape(n, c, h, w).copy(),
        records["label"].astype(np.int64),
        k,
        Split(split),
        f"battds:{path}",
        flags.astype(bool),
    )


def verify_battds(path) -> int:
    """Checksum-only validation; returns the sample count."""
    return len(read_battds(path))
