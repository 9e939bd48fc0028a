"""Convert a pixel CSV (784 pixel columns + trailing label) into gzipped IDX files.

Usage: python scripts/csv_to_idx.py mnist_5k.csv.gz data/ mnist5k

The 5k MNIST subset distributed inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz) has exactly this layout.
"""
import gzip
import io
import struct
import sys
from pathlib import Path

import numpy as np


def main(src, outdir, prefix):
    raw = Path(src).read_bytes()
    if src.endswith(".gz"):
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = len(labels)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(pixels.tobytes())
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:4])
