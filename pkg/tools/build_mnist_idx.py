"""Convert the digit JSON shipped in the npm ``mnist`` package into IDX files.

The npm package (MIT, https://github.com/cazala/mnist) carries 10,000 real
MNIST digits as per-class JSON arrays of 784 floats in [0, 1]. This script
writes them back out as gzipped IDX files laid out like the original
distribution, split into train/test with a fixed seed.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python tools/build_mnist_idx.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header)
        fh.write(array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        raw = raw.reshape(-1, 28, 28)
        images.append(np.rint(raw * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(raw), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    test_idx, train_idx = order[: args.test_count], order[args.test_count:]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images[train_idx], 0x00000803)
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels[train_idx], 0x00000801)
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", images[test_idx], 0x00000803)
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", labels[test_idx], 0x00000801)
    print(f"train={len(train_idx)} test={len(test_idx)} -> {args.out_dir}")


if __name__ == "__main__":
    main()
