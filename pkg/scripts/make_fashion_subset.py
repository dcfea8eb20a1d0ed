"""Build the desk-scale Fashion-MNIST subset as gzipped IDX files.

Source: the npm package ``fashion-mnist`` (1.1.0), which ships every image of
the dataset as raw 0-255 pixel lists grouped by class, 7000 per class.
Within a class the 1000 test images come first, then the 6000 training
images (class 0 marks both block ends with an empty entry, which is dropped).

    npm pack fashion-mnist && tar xzf fashion-mnist-1.1.0.tgz
    python scripts/make_fashion_subset.py package/src/clothes data/fashion-mnist

Writes 600 train and 100 test images per class, interleaved by class so that
any prefix of the files stays roughly balanced.
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path: Path, magic: int, array: np.ndarray) -> None:
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(gzip.compress(header + array.astype(np.uint8).tobytes(), 9, mtime=0))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("clothes_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-per-class", type=int, default=600)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    per_class = []
    for k in range(10):
        rows = json.loads((Path(args.clothes_dir) / f"{k}.json").read_text())["data"]
        raw = np.asarray([r for r in rows if r], dtype=np.uint8)
        assert raw.shape == (7000, 784), raw.shape
        per_class.append((raw[1000:], raw[:1000]))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, pick, n, stem in (("train", 0, args.train_per_class, "train"),
                                 ("test", 1, args.test_per_class, "t10k")):
        images = np.stack([per_class[k][pick][r] for r in range(n) for k in range(10)])
        labels = np.array([k for _ in range(n) for k in range(10)], dtype=np.uint8)
        write_idx(out / f"{stem}-images-idx3-ubyte.gz", 0x803, images.reshape(-1, 28, 28))
        write_idx(out / f"{stem}-labels-idx1-ubyte.gz", 0x801, labels)
        print(split, images.shape[0])


if __name__ == "__main__":
    main()
