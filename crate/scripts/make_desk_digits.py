"""Build the desk digit IDX files from the 5k MNIST sample bundled with mlxtend.

Usage: python3 scripts/make_desk_digits.py [path/to/mlxtend-*.whl] [out_dir]

Each digit class contributes its first 400 rows to the training split and the
remaining 100 to the test split (4000 / 1000 images, class-balanced).
Files are written gzip-compressed in standard IDX layout.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def load_rows(wheel):
    member = "mlxtend/data/data/mnist_5k.csv.gz"
    if wheel is None:
        import mlxtend.data as d  # type: ignore

        raw = (Path(d.__file__).parent / "data" / "mnist_5k.csv.gz").read_bytes()
    else:
        raw = zipfile.ZipFile(wheel).read(member)
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",").astype(np.uint8)


def write_idx(path, images, labels):
    n = images.shape[0]
    with gzip.GzipFile(path + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(path + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


def main():
    wheel = sys.argv[1] if len(sys.argv) > 1 else None
    out = Path(sys.argv[2] if len(sys.argv) > 2 else "data/desk-digits")
    out.mkdir(parents=True, exist_ok=True)
    rows = load_rows(wheel)
    images, labels = rows[:, :-1], rows[:, -1]
    train, test = [], []
    for k in range(10):
        idx = np.flatnonzero(labels == k)
        train.extend(idx[:400])
        test.extend(idx[400:])
    train, test = np.array(train), np.array(test)
    write_idx(str(out / "train"), images[train], labels[train])
    write_idx(str(out / "t10k"), images[test], labels[test])
    print("train counts", np.bincount(labels[train], minlength=10))
    print("test counts", np.bincount(labels[test], minlength=10))


if __name__ == "__main__":
    main()
