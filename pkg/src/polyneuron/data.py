"""MNIST (IDX) and CIFAR-10 (binary) loading, augmentation and batching."""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import shutil
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from polyneuron.exceptions import (
    ChecksumError,
    CountMismatchError,
    DataError,
    FileSizeError,
    MagicNumberError,
    TruncatedFileError,
)

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000
CIFAR_BATCH_BYTES = CIFAR_RECORD * CIFAR_BATCH_RECORDS

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_COUNTS = {"train": 60000, "test": 10000}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

# md5 digests as published alongside the official archives
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)
MNIST_CHECKSUMS = {
    "train-images-idx3-ubyte.gz": ("md5", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train-labels-idx1-ubyte.gz": ("md5", "d53e105ee54ea40749a09fcbcd1e9432"),
    "t10k-images-idx3-ubyte.gz": ("md5", "9fb629c4189551a2d022fa330f9573f3"),
    "t10k-labels-idx1-ubyte.gz": ("md5", "ec29112dd5afa0611ce80d1b7f02629c"),
}
CIFAR_MIRRORS = ("https://www.cs.toronto.edu/~kriz/",)
CIFAR_ARCHIVE = "cifar-10-binary.tar.gz"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images as ``(N, H, W, C)`` uint8 with integer labels in ``[0, 10)``."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{self.name or 'dataset'} {self.split}: {len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise DataError(f"{self.name} {self.split}: labels outside [0, 10)")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.name)


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzip-compressed)."""
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: expected at least 4 header bytes, got {len(buf)}")
    (magic,) = struct.unpack(">I", buf[:4])
    if expected_magic is not None and magic != expected_magic:
        raise MagicNumberError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise MagicNumberError(f"{path}: magic 0x{magic:08x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: expected {header} header bytes, got {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        kind = TruncatedFileError if len(buf) < expected else DataError
        raise kind(f"{path}: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def idx_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array, compress=False) -> None:
    data = idx_bytes(array)
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(data)


def _find(directory, stem):
    for candidate in (stem, stem + ".gz"):
        p = Path(directory) / candidate
        if p.exists():
            return p
    raise DataError(f"{directory}: missing {stem}[.gz]")


def load_mnist(directory, strict=True):
    """Return ``(train, test)`` Datasets from the four IDX files in ``directory``.

    ``strict`` additionally requires the official 60000/10000 record counts.
    """
    out = []
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        images = read_idx(_find(directory, img_name), IDX_IMAGES_MAGIC)
        labels = read_idx(_find(directory, lbl_name), IDX_LABELS_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise CountMismatchError(
                f"MNIST {split}: {images.shape[0]} images but {labels.shape[0]} labels"
            )
        if strict and images.shape[0] != MNIST_COUNTS[split]:
            raise CountMismatchError(
                f"MNIST {split}: {images.shape[0]} records, expected {MNIST_COUNTS[split]}"
            )
        out.append(Dataset(images[..., None], labels.astype(np.int64), split, "mnist"))
    return tuple(out)


def read_cifar_batch(path, strict=True):
    buf = _read_bytes(path)
    if len(buf) % CIFAR_RECORD:
        raise FileSizeError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    if strict and len(buf) != CIFAR_BATCH_BYTES:
        raise FileSizeError(f"{path}: size {len(buf)}, expected {CIFAR_BATCH_BYTES}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataError(f"{path}: label {labels.max()} outside [0, 10)")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def _cifar_dir(directory):
    d = Path(directory)
    nested = d / "cifar-10-batches-bin"
    return nested if nested.is_dir() else d


def load_cifar10(directory, strict=True):
    d = _cifar_dir(directory)
    parts = [read_cifar_batch(_find(d, name), strict) for name in CIFAR_TRAIN_FILES]
    train = Dataset(
        np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), "train", "cifar10"
    )
    test = Dataset(*read_cifar_batch(_find(d, CIFAR_TEST_FILE), strict), "test", "cifar10")
    return train, test


def write_cifar_batch(path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


@dataclass(frozen=True)
class AugmentConfig:
    """Pad, random crop, random flip, normalise.

    ``flip_axis="vertical"`` mirrors about the vertical axis (left-right);
    ``"horizontal"`` mirrors about the horizontal axis (up-down).
    """

    pad: int = 4
    flip: bool = True
    flip_axis: str = "vertical"
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)
    crop: tuple[int, int] | None = None

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if self.flip_axis not in ("vertical", "horizontal"):
            raise ValueError(f"flip_axis must be 'vertical' or 'horizontal', got {self.flip_axis!r}")
        if len(self.mean) != len(self.std) or min(self.std) <= 0:
            raise ValueError("mean/std must have equal length and positive std")


def normalize(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """uint8 ``(B, H, W, C)`` to float32 ``(B, C, H, W)`` with per-channel scaling."""
    x = images.astype(np.float32) / 255.0
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    b, h, w, _ = images.shape
    ch, cw = cfg.crop or (h, w)
    p = cfg.pad
    if ch > h + 2 * p or cw > w + 2 * p:
        raise ValueError(f"crop {(ch, cw)} larger than padded size {(h + 2 * p, w + 2 * p)}")
    padded = np.pad(images, ((0, 0), (p, p), (p, p), (0, 0))) if p else images
    oy = rng.integers(0, h + 2 * p - ch + 1, size=b)
    ox = rng.integers(0, w + 2 * p - cw + 1, size=b)
    rows = oy[:, None] + np.arange(ch)
    cols = ox[:, None] + np.arange(cw)
    out = padded[np.arange(b)[:, None, None], rows[:, :, None], cols[:, None, :]]
    if cfg.flip:
        flip = rng.random(b) < 0.5
        axis = 2 if cfg.flip_axis == "vertical" else 1
        out[flip] = np.flip(out[flip], axis=axis)
    return normalize(out, cfg)


def augment(image: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Augment one ``(H, W, C)`` image; returns ``(C, H, W)`` float32."""
    return augment_batch(np.asarray(image)[None], cfg, rng)[0]


def channel_stats(dataset: Dataset):
    x = dataset.images.astype(np.float64) / 255.0
    axes = (0, 1, 2)
    std = [s if s > 0 else 1.0 for s in x.std(axis=axes).tolist()]
    return tuple(x.mean(axis=axes).tolist()), tuple(std)


def normalization_for(dataset: Dataset, cache_dir=None):
    """Per-channel mean/std of ``dataset``, cached as ``normalization.json``."""
    key = f"{dataset.name}:{dataset.split}:{len(dataset)}"
    sidecar = Path(cache_dir) / "normalization.json" if cache_dir else None
    if sidecar and sidecar.exists():
        try:
            cached = json.loads(sidecar.read_text())
            if key in cached:
                return tuple(cached[key]["mean"]), tuple(cached[key]["std"])
        except (OSError, ValueError):
            pass
    mean, std = channel_stats(dataset)
    if sidecar:
        try:
            cached = json.loads(sidecar.read_text()) if sidecar.exists() else {}
            cached[key] = {"mean": mean, "std": std}
            sidecar.write_text(json.dumps(cached, indent=1))
        except (OSError, ValueError):
            log.debug("could not write %s", sidecar)
    return mean, std


def num_batches(n, batch_size):
    return -(-n // batch_size)


def batches(dataset: Dataset, batch_size=128, rng=None, cfg: AugmentConfig | None = None, train=True):
    """Yield ``(images, labels)`` with images float32 ``(B, C, H, W)``.

    Training streams reshuffle on every call and augment; evaluation streams
    keep file order and only normalise.  The last partial batch is kept.
    """
    cfg = cfg or AugmentConfig(pad=0, flip=False)
    n = len(dataset)
    if train:
        if rng is None:
            raise ValueError("training batches need an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        imgs = dataset.images[idx]
        x = augment_batch(imgs, cfg, rng) if train else normalize(imgs, cfg)
        yield x, dataset.labels[idx]


def class_balanced_subset(dataset: Dataset, n, rng) -> Dataset:
    """``n`` samples with (as near as possible) equal counts per class."""
    classes = np.unique(dataset.labels)
    per = n // len(classes)
    extra = n - per * len(classes)
    picks = []
    for i, c in enumerate(classes):
        idx = np.flatnonzero(dataset.labels == c)
        take = min(len(idx), per + (1 if i < extra else 0))
        picks.append(rng.choice(idx, size=take, replace=False))
    return dataset.subset(np.sort(np.concatenate(picks)))


def file_digest(path, algorithm):
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify(path, checksum):
    if checksum is None:
        return
    algorithm, expected = checksum
    actual = file_digest(path, algorithm)
    if actual != expected:
        raise ChecksumError(f"{path}: {algorithm} {actual} != expected {expected}")


def _download(name, dest: Path, mirrors, checksum, timeout):
    target = dest / name
    if target.exists():
        try:
            verify(target, checksum)
            return target
        except ChecksumError:
            target.unlink()
    errors = []
    for mirror in mirrors:
        url = mirror.rstrip("/") + "/" + name
        tmp = target.with_suffix(target.suffix + ".part")
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
                shutil.copyfileobj(resp, fh)
            verify(tmp, checksum)
            os.replace(tmp, target)
            return target
        except (OSError, ChecksumError) as exc:
            errors.append(f"{url}: {exc}")
            tmp.unlink(missing_ok=True)
    raise DataError(f"could not fetch {name}:\n  " + "\n  ".join(errors))


def fetch(dataset, dest, mirrors=None, checksums=None, timeout=60):
    """Download ``mnist`` or ``cifar10`` into ``dest``; returns the data directory.

    ``checksums`` maps file name to ``(algorithm, hexdigest)`` and overrides
    the built-in table (which has no entry for the CIFAR-10 binary archive).
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    table = {**MNIST_CHECKSUMS, **(checksums or {})}
    if dataset == "mnist":
        for name in MNIST_CHECKSUMS:
            _download(name, dest, mirrors or MNIST_MIRRORS, table.get(name), timeout)
        return dest
    if dataset == "cifar10":
        archive = _download(CIFAR_ARCHIVE, dest, mirrors or CIFAR_MIRRORS, table.get(CIFAR_ARCHIVE), timeout)
        with tarfile.open(archive) as tar:
            tar.extractall(dest, filter="data")
        return _cifar_dir(dest)
    raise DataError(f"unknown dataset {dataset!r}; expected mnist or cifar10")
