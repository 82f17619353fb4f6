"""Datasets: synthetic Gaussian blobs, IDX (MNIST-style) and CIFAR-10 binary files."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .rng import substream

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_VECTORS_MAGIC = 0x00000802
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class MagicNumberError(DataFormatError):
    def __init__(self, path, expected: int, found: int):
        super().__init__(f"{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")
        self.expected = expected
        self.found = found


class TruncatedFileError(DataFormatError):
    def __init__(self, path, expected: int, actual: int, what: str = "bytes"):
        super().__init__(f"{path}: truncated file, expected {expected} {what}, found {actual}")
        self.expected = expected
        self.actual = actual


class CountMismatchError(DataFormatError):
    def __init__(self, images: int, labels: int):
        super().__init__(f"image count {images} does not match label count {labels}")
        self.images = images
        self.labels = labels


class LabelRangeError(DataFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Immutable inputs scaled to [0, 1] with integer labels below ``num_classes``."""

    x: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, order="C")
        labels = np.array(self.labels, dtype=np.int64)
        if x.shape[0] != labels.shape[0]:
            raise CountMismatchError(x.shape[0], labels.shape[0])
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("dataset inputs must be normalized to [0, 1]")
        x.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def take(self, index) -> "Dataset":
        return Dataset(self.x[index], self.labels[index], self.num_classes, self.split, dict(self.provenance))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.x.shape).encode())
        h.update(self.x.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


class BatchIterator:
    """Shuffled mini-batches; the order of epoch ``e`` depends only on (seed, key, e).

    A trailing batch smaller than ``min_batch`` is merged into the previous one
    so batch-statistic losses never see fewer than ``min_batch`` samples.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, key: Sequence[int] = (), min_batch: int = 1):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.key = tuple(key)
        self.min_batch = min_batch
        self.epoch = 0

    def order(self, epoch: int) -> np.ndarray:
        return substream(self.seed, "shuffle", *self.key, epoch).permutation(len(self.dataset))

    def batch_indices(self, epoch: int):
        order = self.order(epoch)
        bounds = list(range(0, len(order), self.batch_size)) + [len(order)]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] < self.min_batch:
            del bounds[-2]
        return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def batches(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for idx in self.batch_indices(epoch):
            yield self.dataset.x[idx], self.dataset.labels[idx]

    def __iter__(self):
        epoch = self.epoch
        self.epoch += 1
        return self.batches(epoch)


# -- synthetic data -------------------------------------------------------

BLOB_MEAN_SCALE = 2.0


def gen_gaussian_blobs(
    num_classes: int = 3,
    n_per_class: int = 200,
    dim: Optional[int] = None,
    spread: float = 0.5,
    label_noise_frac: float = 0.0,
    seed: int = 0,
    n_test_per_class: Optional[int] = None,
) -> Tuple[Dataset, Dataset]:
    """Isotropic Gaussian classes centred on a scaled simplex.

    Class c has mean ``BLOB_MEAN_SCALE * e_c`` in R^dim, so every pair of means
    is 2*sqrt(2) apart. With ``spread`` (the per-axis standard deviation) at or
    below 0.5 the pairwise Bayes error is below Phi(-2.83) ~ 0.23%. Train and
    test are drawn together and jointly min-max scaled to [0, 1], an affine map
    that preserves separability. ``label_noise_frac`` of the train labels are
    moved to a different class chosen uniformly; test labels stay clean.
    """
    dim = num_classes if dim is None else dim
    if spread <= 0:
        raise ValueError("spread must be positive")
    if not 0.0 <= label_noise_frac < 0.5:
        raise ValueError("label_noise_frac must lie in [0, 0.5)")
    if dim < num_classes:
        raise ValueError(f"dim ({dim}) must be at least num_classes ({num_classes})")
    n_test_per_class = n_per_class if n_test_per_class is None else n_test_per_class
    rng = substream(seed, "data")
    means = np.zeros((num_classes, dim))
    means[np.arange(num_classes), np.arange(num_classes)] = BLOB_MEAN_SCALE

    def draw(n):
        labels = np.repeat(np.arange(num_classes), n)
        x = means[labels] + spread * rng.standard_normal((len(labels), dim))
        return x, labels

    x_tr, y_tr = draw(n_per_class)
    x_te, y_te = draw(n_test_per_class)
    both = np.concatenate([x_tr, x_te])
    lo, hi = both.min(axis=0), both.max(axis=0)
    scale = np.where(hi > lo, hi - lo, 1.0)
    x_tr = np.clip((x_tr - lo) / scale, 0.0, 1.0)
    x_te = np.clip((x_te - lo) / scale, 0.0, 1.0)

    noise_rng = substream(seed, "noise")
    y_noisy = y_tr.copy()
    n_flip = int(round(label_noise_frac * len(y_tr)))
    if n_flip:
        flip = noise_rng.choice(len(y_tr), size=n_flip, replace=False)
        shift = noise_rng.integers(1, num_classes, size=n_flip)
        y_noisy[flip] = (y_tr[flip] + shift) % num_classes

    prov = {
        "kind": "blobs", "num_classes": num_classes, "n_per_class": n_per_class, "dim": dim,
        "spread": spread, "label_noise_frac": label_noise_frac, "seed": seed,
        "n_test_per_class": n_test_per_class,
    }
    return (
        Dataset(x_tr, y_noisy, num_classes, "train", prov),
        Dataset(x_te, y_te, num_classes, "test", prov),
    )


# -- IDX ------------------------------------------------------------------

def _file_digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _read_idx(path: PathLike, expected_magics: Sequence[int]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(path, 4, len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in expected_magics:
        raise MagicNumberError(path, expected_magics[0], magic)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(path, header, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        if len(raw) < expected:
            raise TruncatedFileError(path, expected, len(raw))
        raise DataFormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10, split: str = "train") -> Dataset:
    """Parse an IDX image/label pair into a Dataset.

    3-D image files (N, rows, cols) load as (N, 1, rows, cols); 2-D files
    (N, features) load as flat vectors. Pixels are scaled by 1/255.
    """
    images = _read_idx(images_path, (IDX_IMAGES_MAGIC, IDX_VECTORS_MAGIC))
    labels = _read_idx(labels_path, (IDX_LABELS_MAGIC,))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(images.shape[0], labels.shape[0])
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"{labels_path}: label {labels.max()} >= num_classes {num_classes}")
    x = images.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = x[:, None, :, :]
    prov = {
        "kind": "idx",
        "images_sha256": _file_digest(Path(images_path).read_bytes()),
        "labels_sha256": _file_digest(Path(labels_path).read_bytes()),
    }
    return Dataset(x, labels, num_classes, split, prov)


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(x, dtype=np.float64) * 255.0).clip(0, 255).astype(np.uint8)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write a Dataset as an IDX pair. Values are quantized to k/255."""
    x = dataset.x
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ValueError("IDX images must be single-channel")
        x = x[:, 0]
    if x.ndim not in (2, 3):
        raise ValueError(f"cannot store inputs of shape {dataset.x.shape} as IDX")
    if len(dataset) and dataset.labels.max() > 255:
        raise ValueError("IDX labels must fit in one byte")
    magic = IDX_IMAGES_MAGIC if x.ndim == 3 else IDX_VECTORS_MAGIC
    Path(images_path).write_bytes(
        struct.pack(">I", magic) + struct.pack(f">{x.ndim}I", *x.shape) + _to_bytes(x).tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)) + dataset.labels.astype(np.uint8).tobytes()
    )


# -- CIFAR-10 binary ------------------------------------------------------

def load_cifar10_binary(paths: Union[PathLike, Sequence[PathLike]], split: str = "train") -> Dataset:
    """Records of 1 label byte + 3072 channel-planar pixel bytes (R, G, B planes of 32x32)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys, digests = [], [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            full = (len(raw) // CIFAR_RECORD + 1) * CIFAR_RECORD
            raise TruncatedFileError(path, full, len(raw), what=f"bytes (a multiple of {CIFAR_RECORD})")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() >= 10:
            raise LabelRangeError(f"{path}: label {rec[:, 0].max()} >= 10")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
        digests.append(_file_digest(raw))
    x = np.concatenate(xs) if xs else np.zeros((0, 3, 32, 32))
    y = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    return Dataset(x, y, 10, split, {"kind": "cifar10", "sha256": digests})


def write_cifar10_binary(dataset: Dataset, path: PathLike) -> None:
    if dataset.feature_shape != (3, 32, 32):
        raise ValueError(f"CIFAR-10 records need (3, 32, 32) inputs, got {dataset.feature_shape}")
    rec = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = _to_bytes(dataset.x).reshape(len(dataset), -1)
    Path(path).write_bytes(rec.tobytes())


# -- reduction ------------------------------------------------------------

def subsample(dataset: Dataset, n: int, stratified: bool = True, seed: int = 0) -> Dataset:
    """Pick ``n`` samples; stratified picks keep each class within one sample of its share."""
    total = len(dataset)
    if n > total or n < 0:
        raise ValueError(f"cannot take {n} samples from a dataset of {total}")
    if n == total:
        return dataset
    rng = substream(seed, "subsample")
    if not stratified:
        idx = np.sort(rng.choice(total, size=n, replace=False))
        return dataset.take(idx)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    quota = counts * n / total
    take = np.floor(quota).astype(int)
    # largest remainders get the leftover slots; ties go to the lower class id
    leftover = n - take.sum()
    order = np.lexsort((classes, -(quota - take)))
    take[order[:leftover]] += 1
    picked = []
    for cls, k in zip(classes, take):
        members = np.flatnonzero(dataset.labels == cls)
        picked.append(rng.choice(members, size=k, replace=False))
    return dataset.take(np.sort(np.concatenate(picked)))
