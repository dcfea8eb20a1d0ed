"""Datasets: IDX and CIFAR binary parsers, synthetic clusters, CSV exports."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE

METRICS_FIELDS = ["epoch", "stage", "split", "loss", "accuracy", "wall_ms"]


@dataclass
class Dataset:
    images: np.ndarray  # [count, H, W, C], values in [0, 1]
    labels: np.ndarray  # [count] int64
    split: str
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [count, H, W, C], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(
                f"labels outside [0, {self.n_classes}): min {self.labels.min()}, "
                f"max {self.labels.max()}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.split, self.n_classes)

    def head(self, n: int | None) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(slice(0, n))


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataFormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _idx_payload(raw: bytes, path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    if len(body) != int(np.prod(dims)):
        raise DataFormatError(
            f"{path}: header promises {int(np.prod(dims))} bytes of data, file has {len(body)}")
    return dims, body


def load_idx(images_path, labels_path, split: str = "train", n_classes: int = 10,
             limit: int | None = None) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped) into a dataset.

    Pixels are scaled by 1/255; a trailing channel axis of 1 is added.
    """
    (n_img, rows, cols), pix = _idx_payload(_read_bytes(images_path), images_path,
                                            IDX_IMAGES_MAGIC, 3)
    (n_lab,), lab = _idx_payload(_read_bytes(labels_path), labels_path,
                                 IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise DataError(f"{images_path} has {n_img} images but {labels_path} has {n_lab} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n_img, rows, cols, 1)
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images.astype(np.float32) / 255.0, labels, split, n_classes)


def load_cifar_binary(directory, split: str = "train", n_classes: int = 10,
                      files: Sequence[str] | None = None, limit: int | None = None) -> Dataset:
    """Parse CIFAR-10 binary batches (label byte + 3072 channel-planar pixels)."""
    directory = Path(directory)
    if files is None:
        files = ([f"data_batch_{k}.bin" for k in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
    chunks = []
    for name in files:
        path = directory / name
        raw = _read_bytes(path)
        if not raw or len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= n_classes:
        raise DataError(f"label {labels.max()} out of range for {n_classes} classes")
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return Dataset(planes.astype(np.float32) / 255.0, labels, split, n_classes)


def synth_clusters(seed: int, n_classes: int, samples: int,
                   image_shape: tuple[int, int, int] = (8, 8, 1), noise: float = 0.25,
                   split: str = "train") -> Dataset:
    """Class-conditional Gaussian clusters rendered as images.

    Each class owns a prototype image built from three Gaussian bumps at
    seeded positions; samples are the prototype plus isotropic pixel noise,
    clipped to [0, 1]. Prototypes depend only on ``seed``, so train and test
    splits drawn with the same seed share classes; the noise stream also
    depends on ``split``.
    """
    h, w, c = image_shape
    proto_rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((n_classes, h, w, c))
    for k in range(n_classes):
        for _ in range(3):
            cy, cx = proto_rng.uniform(0, h), proto_rng.uniform(0, w)
            sigma = proto_rng.uniform(0.8, 2.0) * max(h, w) / 8
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            protos[k] += bump[..., None] * proto_rng.uniform(0.3, 1.0, size=c)
    protos = np.clip(protos, 0.0, 1.0)

    split_code = sum(split.encode())
    rng = np.random.default_rng([seed, split_code])
    labels = rng.permutation(np.arange(samples) % n_classes).astype(np.int64)
    images = protos[labels] + noise * rng.standard_normal((samples, h, w, c))
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, split, n_classes)


def standardize(reference: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-channel standardisation with statistics from ``reference``."""
    mean = reference.images.mean(axis=(0, 1, 2))
    std = reference.images.std(axis=(0, 1, 2)) + 1e-6
    return [Dataset(((d.images - mean) / std).astype(np.float32), d.labels, d.split,
                    d.n_classes) for d in (reference, *others)]


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def export_metrics_csv(stream: Iterable, path) -> int:
    """Write ``epoch,stage,split,loss,accuracy,wall_ms`` rows; returns the row count."""
    path = Path(path)
    count = 0
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_FIELDS)
            for m in stream:
                writer.writerow([m.epoch, m.stage, m.split, repr(float(m.loss)),
                                 repr(float(m.accuracy)), repr(float(m.wall_ms))])
                count += 1
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return count


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"], r["stage"] = int(r["epoch"]), int(r["stage"])
        for key in ("loss", "accuracy", "wall_ms"):
            r[key] = float(r[key])
    return rows


def export_features_csv(model, data: Dataset, path, batch_size: int = 256) -> int:
    """Write pooled per-branch features ``sample_id,branch,dim_0..dim_{D-1},label``."""
    from .model import branch_features, embed
    from .tensor import mean_rows

    width = model.config.width
    path = Path(path)
    rows = 0
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "branch", *[f"dim_{k}" for k in range(width)], "label"])
            for start in range(0, len(data), batch_size):
                x0 = embed(data.images[start:start + batch_size], model.embed, model.config)
                pooled = [mean_rows(branch_features(x0, model, j))
                          for j in range(1, model.n_branches + 1)]
                for r in range(len(x0)):
                    sid = start + r
                    for j, feats in enumerate(pooled, start=1):
                        writer.writerow([sid, j, *map(repr, feats[r].tolist()),
                                         int(data.labels[sid])])
                        rows += 1
    except OSError as exc:
        raise OSError(f"cannot write features to {path}: {exc}") from exc
    return rows
