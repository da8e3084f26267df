import struct

import numpy as np
import pytest

from wcmi.data import (
    DataFormatError,
    DatasetSpec,
    load_dataset,
    mean_pool,
    read_csv,
    read_idx_images,
    read_idx_labels,
    write_idx_images,
    write_idx_labels,
)
from wcmi.numerics import seeded_rng


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 6, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12)
    write_idx_images(tmp_path / "img", images)
    write_idx_labels(tmp_path / "lab", labels)
    return tmp_path, images, labels


class TestIdx:
    def test_round_trip(self, idx_pair):
        path, images, labels = idx_pair
        assert np.array_equal(read_idx_images(path / "img"), images)
        assert np.array_equal(read_idx_labels(path / "lab"), labels)

    def test_header_layout(self, idx_pair):
        path, images, _ = idx_pair
        raw = (path / "img").read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x803, 12, 6, 4)
        assert len(raw) == 16 + images.size

    def test_bad_magic(self, idx_pair):
        path, _, _ = idx_pair
        with pytest.raises(DataFormatError) as err:
            read_idx_labels(path / "img")
        assert err.value.offset == 0 and "magic" in str(err.value)

    def test_truncated(self, idx_pair):
        path, _, _ = idx_pair
        raw = (path / "img").read_bytes()
        (path / "short").write_bytes(raw[:-5])
        with pytest.raises(DataFormatError) as err:
            read_idx_images(path / "short")
        assert err.value.offset == len(raw) - 5
        (path / "tiny").write_bytes(raw[:6])
        with pytest.raises(DataFormatError):
            read_idx_images(path / "tiny")

    def test_count_mismatch(self, idx_pair):
        path, _, labels = idx_pair
        write_idx_labels(path / "lab", labels[:-1])
        with pytest.raises(DataFormatError):
            load_dataset(DatasetSpec(source="idx_files", images=str(path / "img"), labels=str(path / "lab")), seeded_rng(0))


class TestLoading:
    def test_scaled_to_unit_box(self, idx_pair):
        path, images, labels = idx_pair
        b = load_dataset(DatasetSpec(source="idx_files", images=str(path / "img"), labels=str(path / "lab")), seeded_rng(0))
        assert b.rows.shape == (12, 24) and b.rows.min() >= 0 and b.rows.max() <= 1
        assert np.array_equal(b.rows, images.reshape(12, -1) / 255.0)
        assert np.array_equal(b.labels, labels)

    def test_downsample(self, idx_pair):
        path, images, _ = idx_pair
        b = load_dataset(DatasetSpec(source="idx_files", images=str(path / "img"), downsample=2), seeded_rng(0))
        assert b.rows.shape == (12, 6) and b.labels is None
        assert b.rows[0, 0] == pytest.approx(images[0, :2, :2].mean() / 255.0)

    def test_mean_pool_constant_image(self):
        img = np.full((1, 28, 28), 7, dtype=np.uint8)
        out = mean_pool(img, 2)
        assert out.shape == (1, 14, 14) and np.all(out == 7.0)
        assert mean_pool(np.ones((1, 5, 5)), 2).shape == (1, 2, 2)
        with pytest.raises(ValueError):
            mean_pool(img, 30)

    def test_take_is_seeded_subset(self, idx_pair):
        path, images, _ = idx_pair
        spec = DatasetSpec(source="idx_files", images=str(path / "img"), take=5)
        a, b = load_dataset(spec, seeded_rng(3)), load_dataset(spec, seeded_rng(3))
        assert len(a) == 5 and np.array_equal(a.rows, b.rows)
        full = images.reshape(12, -1) / 255.0
        assert all(any(np.array_equal(r, f) for f in full) for r in a.rows)

    def test_synthetic_deterministic(self):
        spec = DatasetSpec(theta_star=[1.0, 0.0], n=50)
        a, b = load_dataset(spec, seeded_rng(1)), load_dataset(spec, seeded_rng(1))
        assert np.array_equal(a.rows, b.rows) and set(np.unique(a.labels)) <= {-1, 1}

    def test_csv(self, tmp_path):
        (tmp_path / "d.csv").write_text("0.5,1.0,1\n0.25,-2.0,0\n")
        b = read_csv(tmp_path / "d.csv", label_column=2)
        assert np.array_equal(b.rows, [[0.5, 1.0], [0.25, -2.0]]) and list(b.labels) == [1, 0]
        (tmp_path / "bad.csv").write_text("0.5,abc\n")
        with pytest.raises(DataFormatError):
            read_csv(tmp_path / "bad.csv")

    def test_unit_box_normalization(self, tmp_path):
        (tmp_path / "d.csv").write_text("2,4\n6,8\n")
        b = load_dataset(DatasetSpec(source="csv", path=str(tmp_path / "d.csv"), normalization="to_unit_box"), seeded_rng(0))
        assert b.rows.min() == 0.0 and b.rows.max() == 1.0

    @pytest.mark.parametrize(
        "kw", [dict(source="ftp"), dict(source="idx_files"), dict(downsample=0), dict(take=0), dict(normalization="z")]
    )
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            DatasetSpec(**kw)
