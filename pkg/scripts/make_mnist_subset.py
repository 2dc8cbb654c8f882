"""Convert the 5000-sample MNIST CSV shipped inside the mlxtend wheel to IDX files.

Usage:
    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist5k

Rows are ``784 pixel bytes, label``. Output files are gzip-compressed IDX
(``images-idx3-ubyte.gz`` / ``labels-idx1-ubyte.gz``) in the layout of the
original MNIST distribution.
"""

import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel: str, out_dir: str) -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = len(labels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">IIII", 0x00000803, n, 28, 28)
    # mtime=0 keeps the archive bytes reproducible
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(header + pixels.tobytes())
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n) + labels.tobytes())
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
