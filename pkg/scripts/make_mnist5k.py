"""Write the 5,000-image MNIST sample bundled with mlxtend as IDX files.

The sample holds 500 images per digit.  The first 400 of each digit become
the training set (4,000 images) and the remaining 100 the test set (1,000).

    pip install mlxtend
    python scripts/make_mnist5k.py data/mnist5k
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from fedes.data import write_idx

TRAIN_PER_CLASS = 400

FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


def build(out_dir) -> dict:
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[:TRAIN_PER_CLASS])
        test_idx.append(idx[TRAIN_PER_CLASS:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)

    out = Path(out_dir)
    paths = {k: out / v for k, v in FILES.items()}
    write_idx(paths["train_images"], X[train_idx])
    write_idx(paths["train_labels"], y[train_idx])
    write_idx(paths["test_images"], X[test_idx])
    write_idx(paths["test_labels"], y[test_idx])
    return {k: str(p) for k, p in paths.items()}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", nargs="?", default="data/mnist5k")
    args = parser.parse_args(argv)
    for name, path in build(args.out_dir).items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
