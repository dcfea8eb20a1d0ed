import gzip
import struct

import numpy as np
import pytest

from conftest import tiny_config
from paraformer.data import (Dataset, export_features_csv, export_metrics_csv, load_cifar_binary,
                             load_idx, read_metrics_csv, standardize, synth_clusters)
from paraformer.errors import DataError, DataFormatError
from paraformer.model import init_model
from paraformer.trainer import StageMetrics


def write_idx(tmp_path, pixels, labels, gz=False, magic=0x803):
    n, r, c = pixels.shape
    img = struct.pack(">IIII", magic, n, r, c) + pixels.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, len(labels)) + bytes(labels)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(gzip.compress(img) if gz else img)
    lp.write_bytes(gzip.compress(lab) if gz else lab)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_hand_fixture(tmp_path, gz):
    pixels = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 0]]])
    ds = load_idx(*write_idx(tmp_path, pixels, [3, 7], gz), "test")
    assert ds.images.shape == (2, 2, 2, 1) and ds.split == "test"
    np.testing.assert_allclose(ds.images[0, :, :, 0], [[0, 1], [0.2, 0.4]], rtol=1e-6)
    assert ds.labels.tolist() == [3, 7]


def test_idx_limit(tmp_path):
    ds = load_idx(*write_idx(tmp_path, np.zeros((5, 2, 2)), [0, 1, 2, 3, 4]), limit=3)
    assert len(ds) == 3


def test_idx_empty(tmp_path):
    assert len(load_idx(*write_idx(tmp_path, np.zeros((0, 2, 2)), []))) == 0


def test_idx_bad_magic(tmp_path):
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(*write_idx(tmp_path, np.zeros((1, 2, 2)), [0], magic=0x802))


def test_idx_truncated_payload(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((2, 2, 2)), [0, 1])
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = write_idx(tmp_path, np.zeros((2, 2, 2)), [0, 1])
    lp = tmp_path / "lab3"
    lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 2]))
    with pytest.raises(DataError):
        load_idx(ip, lp)


def cifar_record(label, seed):
    rng = np.random.default_rng(seed)
    return bytes([label]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()


def test_cifar_hand_fixture(tmp_path):
    recs = [cifar_record(4, 0), cifar_record(9, 1)]
    (tmp_path / "test_batch.bin").write_bytes(b"".join(recs))
    ds = load_cifar_binary(tmp_path, "test")
    assert ds.images.shape == (2, 32, 32, 3) and ds.labels.tolist() == [4, 9]
    raw = np.frombuffer(recs[1][1:], dtype=np.uint8)
    # channel-planar: red plane first, then green, then blue
    assert ds.images[1, 0, 0, 0] == pytest.approx(raw[0] / 255)
    assert ds.images[1, 0, 1, 1] == pytest.approx(raw[1024 + 1] / 255)
    assert ds.images[1, 1, 0, 2] == pytest.approx(raw[2048 + 32] / 255)


def test_cifar_truncated(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(cifar_record(1, 0)[:-5])
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path, "test")


def test_cifar_label_out_of_range(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(cifar_record(10, 0))
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path, "test")


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 1)), np.array([0, 5]), "train", 3)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 1)), np.array([0]), "train", 3)


def test_synth_deterministic_and_split_dependent():
    a, b = synth_clusters(3, 4, 40), synth_clusters(3, 4, 40)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tolist() == b.labels.tolist()
    c = synth_clusters(3, 4, 40, split="test")
    assert a.images.tobytes() != c.images.tobytes()
    assert np.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synth_linearly_separable_without_noise():
    ds = synth_clusters(0, 4, 80, noise=0.0)
    x = np.hstack([ds.images.reshape(80, -1), np.ones((80, 1))])
    targets = np.eye(4)[ds.labels]
    w, *_ = np.linalg.lstsq(x, targets, rcond=None)
    assert np.mean(np.argmax(x @ w, axis=1) == ds.labels) == 1.0


def test_standardize_uses_reference_stats():
    tr, te = synth_clusters(0, 2, 30), synth_clusters(0, 2, 10, split="test")
    s_tr, s_te = standardize(tr, te)
    assert abs(float(s_tr.images.mean())) < 1e-5
    mean, std = tr.images.mean(), tr.images.std() + 1e-6
    np.testing.assert_allclose(s_te.images, (te.images - mean) / std, atol=1e-5)


def test_metrics_csv_round_trip(tmp_path):
    rows = [StageMetrics(1, s, "train", 0.1 * s + 1e-17, 0.5, 3.25) for s in (1, 2)]
    assert export_metrics_csv(rows, tmp_path / "m.csv") == 2
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [(r["stage"], r["loss"]) for r in back] == [(1, rows[0].loss), (2, rows[1].loss)]


def test_metrics_csv_empty(tmp_path):
    assert export_metrics_csv([], tmp_path / "e.csv") == 0
    assert (tmp_path / "e.csv").read_text().strip() == "epoch,stage,split,loss,accuracy,wall_ms"


def test_metrics_csv_unwritable(tmp_path):
    with pytest.raises(OSError):
        export_metrics_csv([], tmp_path / "missing" / "m.csv")


def test_features_csv(tmp_path):
    model = init_model(tiny_config())
    ds = synth_clusters(0, 3, 5, (4, 4, 1))
    n = export_features_csv(model, ds, tmp_path / "f.csv", batch_size=2)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert n == 15 == len(lines) - 1
    assert lines[0].split(",")[:2] == ["sample_id", "branch"] and lines[0].endswith("label")
    assert len(lines[1].split(",")) == 2 + 8 + 1


def test_fashion_subset_linear_probe():
    from pathlib import Path
    d = Path(__file__).resolve().parents[1] / "data" / "fashion-mnist"
    tr = load_idx(d / "train-images-idx3-ubyte.gz", d / "train-labels-idx1-ubyte.gz")
    te = load_idx(d / "t10k-images-idx3-ubyte.gz", d / "t10k-labels-idx1-ubyte.gz", "test")
    assert (len(tr), len(te)) == (6000, 1000)
    assert np.bincount(tr.labels).tolist() == [600] * 10

    def feats(ds):
        return np.hstack([ds.images.reshape(len(ds), -1), np.ones((len(ds), 1))])

    x = feats(tr)
    # ridge-regularised least squares onto one-hot targets
    w = np.linalg.solve(x.T @ x + 1.0 * np.eye(x.shape[1]), x.T @ np.eye(10)[tr.labels])
    acc = np.mean(np.argmax(feats(te) @ w, axis=1) == te.labels)
    assert acc > 0.75
