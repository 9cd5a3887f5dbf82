"""IDX parsing, splits, and the synthetic generator."""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from bmrs.data import (
    Dataset,
    IdxParseError,
    dataset_to_u8,
    load_idx,
    load_mnist_dataset,
    save_idx,
    split,
    synth_blobs,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
MNIST_DIR = DATA_DIR / "mnist"

needs_mnist = pytest.mark.skipif(
    not MNIST_DIR.exists(), reason="MNIST IDX files not present under data/mnist"
)


def write_tiny_idx(tmp_path, images, labels):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    save_idx(images, labels, ip, lp)
    return ip, lp


class TestIdxFormat:
    def test_single_pixel_scaling(self, tmp_path):
        img = np.zeros((1, 4, 4), dtype=np.uint8)
        img[0, 0, 0] = 255
        img[0, 1, 2] = 51
        ip, lp = write_tiny_idx(tmp_path, img, np.array([7], dtype=np.uint8))
        ds = load_idx(ip, lp)
        assert ds.images.shape == (1, 1, 4, 4)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 0, 1, 2] == pytest.approx(51 / 255)
        assert ds.labels[0] == 7

    def test_corrupted_image_magic_names_offset_zero(self, tmp_path):
        ip, lp = write_tiny_idx(tmp_path, np.zeros((1, 2, 2), np.uint8),
                                np.zeros(1, np.uint8))
        raw = bytearray(ip.read_bytes())
        raw[0:4] = struct.pack(">i", 0x12345678)
        ip.write_bytes(bytes(raw))
        with pytest.raises(IdxParseError, match="byte 0"):
            load_idx(ip, lp)

    def test_corrupted_label_magic_rejected(self, tmp_path):
        ip, lp = write_tiny_idx(tmp_path, np.zeros((1, 2, 2), np.uint8),
                                np.zeros(1, np.uint8))
        raw = bytearray(lp.read_bytes())
        raw[3] = 0x99
        lp.write_bytes(bytes(raw))
        with pytest.raises(IdxParseError, match="label magic"):
            load_idx(ip, lp)

    def test_truncated_payload_names_offset(self, tmp_path):
        ip, lp = write_tiny_idx(tmp_path, np.zeros((3, 2, 2), np.uint8),
                                np.zeros(3, np.uint8))
        data = ip.read_bytes()
        ip.write_bytes(data[:-5])
        with pytest.raises(IdxParseError, match="truncated at byte"):
            load_idx(ip, lp)

    def test_count_mismatch_rejected(self, tmp_path):
        ip = tmp_path / "img2"
        lp = tmp_path / "lab3"
        save_idx(np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8),
                 ip, tmp_path / "lab2")
        save_idx(np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8),
                 tmp_path / "img3", lp)
        with pytest.raises(IdxParseError, match="count"):
            load_idx(ip, lp)

    def test_gzip_transparent(self, tmp_path):
        img = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
        ip, lp = write_tiny_idx(tmp_path, img, np.array([3], np.uint8))
        for p in (ip, lp):
            gz = p.with_suffix(".gz")
            gz.write_bytes(gzip.compress(p.read_bytes()))
        a = load_idx(ip, lp)
        b = load_idx(str(ip) + ".gz", str(lp) + ".gz")
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_roundtrip_bytes_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(20, 5, 7), dtype=np.uint8)
        lab = rng.integers(0, 10, size=20).astype(np.uint8)
        ip, lp = write_tiny_idx(tmp_path, img, lab)
        ds = load_idx(ip, lp)
        ip2, lp2 = tmp_path / "img2", tmp_path / "lab2"
        save_idx(dataset_to_u8(ds), ds.labels, ip2, lp2)
        assert ip.read_bytes() == ip2.read_bytes()
        assert lp.read_bytes() == lp2.read_bytes()


@needs_mnist
class TestRealMnist:
    def test_counts_and_label_histogram(self):
        train, val, test = load_mnist_dataset("mnist", data_dir=DATA_DIR, seed=0)
        assert train.n + val.n == 60_000
        assert train.n == 48_000 and val.n == 12_000
        assert test.n == 10_000
        hist = np.bincount(np.concatenate([train.labels, val.labels]), minlength=10)
        assert hist.min() >= 5_400 and hist.max() <= 7_000

    def test_no_nan_after_normalization(self):
        train, _, test = load_mnist_dataset("mnist", data_dir=DATA_DIR, seed=0)
        assert np.isfinite(train.images).all() and np.isfinite(test.images).all()
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0

    def test_roundtrip_real_file_bytes_identical(self, tmp_path):
        img_gz = MNIST_DIR / "t10k-images-idx3-ubyte.gz"
        lab_gz = MNIST_DIR / "t10k-labels-idx1-ubyte.gz"
        ds = load_idx(img_gz, lab_gz)
        ip, lp = tmp_path / "img", tmp_path / "lab"
        save_idx(dataset_to_u8(ds), ds.labels, ip, lp)
        assert ip.read_bytes() == gzip.decompress(img_gz.read_bytes())
        assert lp.read_bytes() == gzip.decompress(lab_gz.read_bytes())


class TestSplit:
    def test_partition_exhaustive_and_disjoint(self):
        ds = synth_blobs(503, 3, 4, 2.0, seed=0)
        train, val = split(ds, 0.8, seed=1)
        assert train.n + val.n == ds.n
        key = ds.images[:, 0, 0, 0]
        merged = np.sort(np.concatenate([train.images[:, 0, 0, 0], val.images[:, 0, 0, 0]]))
        np.testing.assert_array_equal(merged, np.sort(key))

    def test_seed_reproducibility(self):
        ds = synth_blobs(200, 2, 4, 2.0, seed=0)
        a1, b1 = split(ds, 0.8, seed=9)
        a2, b2 = split(ds, 0.8, seed=9)
        np.testing.assert_array_equal(a1.images, a2.images)
        np.testing.assert_array_equal(b1.labels, b2.labels)
        a3, _ = split(ds, 0.8, seed=10)
        assert not np.array_equal(a1.images, a3.images)

    def test_80_20_sizes(self):
        ds = Dataset(np.zeros((60_000, 1, 1, 1)), np.zeros(60_000, dtype=np.int64))
        train, val = split(ds, 0.8, seed=0)
        assert train.n == 48_000 and val.n == 12_000


class TestSynthBlobs:
    def test_deterministic(self):
        a = synth_blobs(100, 3, 5, 4.0, seed=7)
        b = synth_blobs(100, 3, 5, 4.0, seed=7)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_zero_separation_is_chance_level(self):
        from bmrs.network import accuracy, build_mlp
        from bmrs.optim import Adam
        from bmrs.runner import _rng_streams, train_epoch

        full = synth_blobs(1200, 4, 6, separation=0.0, seed=1)
        tr, te = split(full, 0.8, seed=2)
        net = build_mlp(np.random.Generator(np.random.Philox(3)), in_shape=(1, 1, 6),
                        n_hidden_layers=1, hidden_dim=8, n_classes=4, with_gates=False)
        adam = Adam(lr=3e-3)
        order_rng, noise_rng = _rng_streams(4)
        for _ in range(3):
            train_epoch(net, tr, adam, order_rng, noise_rng, 32, 1.0)
        assert accuracy(net, te.images, te.labels) < 0.45  # ~1/4 plus noise

    def test_large_separation_linearly_separable(self):
        from bmrs.network import accuracy, build_mlp
        from bmrs.optim import Adam
        from bmrs.runner import _rng_streams, train_epoch

        full = synth_blobs(1500, 3, 8, separation=10.0, seed=5)
        tr, te = split(full, 0.8, seed=6)
        # single linear layer: no hidden nonlinearity needed when separable
        net = build_mlp(np.random.Generator(np.random.Philox(7)), in_shape=(1, 1, 8),
                        n_hidden_layers=0, hidden_dim=1, n_classes=3, with_gates=False)
        adam = Adam(lr=5e-3)
        order_rng, noise_rng = _rng_streams(8)
        for _ in range(5):
            train_epoch(net, tr, adam, order_rng, noise_rng, 32, 1.0)
        assert accuracy(net, te.images, te.labels) > 0.99

    def test_validation(self):
        with pytest.raises(ValueError):
            synth_blobs(10, 1, 4, 1.0, seed=0)
        with pytest.raises(ValueError):
            synth_blobs(1, 2, 4, 1.0, seed=0)
