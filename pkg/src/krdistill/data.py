"""Dataset readers (MNIST IDX, CIFAR-10 binary), synthetic blobs and distortion.

Images come out as float64 arrays of shape N×C×H×W in [0, 1]; labels as
int64 arrays.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = "test_batch.bin"


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    test: Split
    class_count: int

    @property
    def input_shape(self):
        return tuple(self.train.x.shape[1:])


@dataclass
class DatasetSource:
    kind: str = "mnist"
    root: str = "data/mnist"
    subset: int | None = None
    test_subset: int | None = None
    seed: int = 0


@dataclass
class DistortionSpec:
    sigma: float = 1.0
    seed: int = 0
    clip: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")


# ---------------------------------------------------------------- IDX


def _open_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def parse_idx(raw, expected_magic, source="<bytes>"):
    if len(raw) < 8:
        raise FormatError(f"{source}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{source}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{source}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{source}: expected {count} data bytes for shape {dims}, "
                          f"found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(path, expected_magic):
    return parse_idx(_open_bytes(path), expected_magic, str(path))


def _find(root, stem):
    for name in (stem, stem + ".gz"):
        p = Path(root) / name
        if p.exists():
            return p
    raise FormatError(f"{root}: neither {stem} nor {stem}.gz found")


def load_mnist_split(root, split):
    img_stem, lbl_stem = MNIST_FILES[split]
    images = read_idx(_find(root, img_stem), IDX_IMAGES_MAGIC)
    labels = read_idx(_find(root, lbl_stem), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{root}/{split}: {len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Split(x, labels.astype(np.int64))


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.tobytes())


# ---------------------------------------------------------------- CIFAR-10


def parse_cifar_batch(raw, source="<bytes>"):
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{source}: label {labels.max()} out of range for CIFAR-10")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Split(x, labels)


def read_cifar_batch(path):
    return parse_cifar_batch(Path(path).read_bytes(), str(path))


def _concat(splits):
    return Split(np.concatenate([s.x for s in splits]), np.concatenate([s.y for s in splits]))


def load_cifar10(root):
    root = Path(root)
    train = [root / f for f in CIFAR_TRAIN if (root / f).exists()]
    if not train:
        raise FormatError(f"{root}: no CIFAR-10 data_batch_*.bin files")
    return _concat([read_cifar_batch(p) for p in train]), read_cifar_batch(root / CIFAR_TEST)


def write_cifar_batch(path, split):
    pixels = np.rint(np.clip(split.x, 0, 1) * 255).astype(np.uint8).reshape(len(split), -1)
    rec = np.concatenate([split.y.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------- synthetic


def synthetic_blobs(class_count=10, n_train=1000, n_test=500, shape=(1, 8, 8), seed=0,
                    noise=0.15):
    """Gaussian blobs around per-class random prototype images, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    protos = rng.random((class_count,) + tuple(shape))

    def draw(n):
        y = rng.integers(0, class_count, size=n)
        x = np.clip(protos[y] + noise * rng.standard_normal((n,) + tuple(shape)), 0.0, 1.0)
        return Split(x, y.astype(np.int64))

    return Dataset(draw(n_train), draw(n_test), class_count)


# ---------------------------------------------------------------- entry points


def subsample(split, size, seed):
    """Deterministic subset of ``size`` items, kept in original order."""
    if size is None or size >= len(split):
        return split
    idx = np.sort(np.random.default_rng(seed).choice(len(split), size=size, replace=False))
    return Split(split.x[idx], split.y[idx])


def load_dataset(source):
    if source.kind == "mnist":
        train, test = load_mnist_split(source.root, "train"), load_mnist_split(source.root, "test")
        classes = 10
    elif source.kind == "cifar10":
        train, test = load_cifar10(source.root)
        classes = 10
    elif source.kind == "synthetic":
        ds = synthetic_blobs(seed=source.seed, n_train=source.subset or 1000,
                             n_test=source.test_subset or 500)
        return ds
    else:
        raise ConfigError(f"unknown dataset kind {source.kind!r}")
    return Dataset(subsample(train, source.subset, source.seed),
                   subsample(test, source.test_subset, source.seed + 1), classes)


def distort(x, sigma, rng, clip=(0.0, 1.0)):
    """Additive per-pixel Gaussian noise, optionally clipped."""
    if sigma == 0:
        return x.copy()
    out = x + sigma * rng.standard_normal(x.shape)
    return np.clip(out, *clip) if clip is not None else out


def distort_dataset(data, spec):
    """Distort every train and test image, using independent seeded streams."""
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train = Split(distort(data.train.x, spec.sigma, np.random.default_rng(train_seq), spec.clip),
                  data.train.y.copy())
    test = Split(distort(data.test.x, spec.sigma, np.random.default_rng(test_seq), spec.clip),
                 data.test.y.copy())
    return replace(data, train=train, test=test)


def save_dataset(data, out_dir, kind):
    """Write ``data`` in the on-disk format of ``kind`` (pixels quantised to bytes)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "mnist":
        for split_name, split in (("train", data.train), ("test", data.test)):
            img, lbl = MNIST_FILES[split_name]
            pixels = np.rint(np.clip(split.x[:, 0], 0, 1) * 255)
            write_idx(out / (img + ".gz"), pixels, IDX_IMAGES_MAGIC)
            write_idx(out / (lbl + ".gz"), split.y, IDX_LABELS_MAGIC)
    elif kind == "cifar10":
        write_cifar_batch(out / CIFAR_TRAIN[0], data.train)
        write_cifar_batch(out / CIFAR_TEST, data.test)
    else:
        np.savez(out / "dataset.npz", train_x=data.train.x, train_y=data.train.y,
                 test_x=data.test.x, test_y=data.test.y)
    return out
