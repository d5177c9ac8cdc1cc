import struct

import numpy as np
import pytest

from butdlearn.data import (
    DataError,
    MnistSet,
    batches,
    load_idx,
    load_idx_images,
    load_mm36,
    make_multi_mnist,
    save_idx_images,
    save_idx_labels,
    save_mm36,
)


def synthetic_sources(n, h=8, w=8, seed=0):
    """Digit-free stand-in sources: random pixels, uniformly cycled labels."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, h, w)).astype(np.uint8)
    return MnistSet(images=pixels.astype(np.float64) / 255.0,
                    labels=np.arange(n, dtype=np.int64) % 10)


def write_fixture_pair(tmp_path, images_u8, labels):
    img_p, lab_p = tmp_path / "imgs.idx", tmp_path / "labs.idx"
    save_idx_images(img_p, images_u8)
    save_idx_labels(lab_p, labels)
    return img_p, lab_p


class TestIdxParsing:
    def test_handcrafted_two_image_fixture(self, tmp_path):
        # build the bytes by hand, independent of the writer
        pixels = np.array([[[0, 128], [255, 7]], [[1, 2], [3, 4]]], dtype=np.uint8)
        raw = struct.pack(">IIII", 0x00000803, 2, 2, 2) + pixels.tobytes()
        p = tmp_path / "hand.idx"
        p.write_bytes(raw)
        np.testing.assert_array_equal(load_idx_images(p), pixels)

    def test_labels_magic_on_image_loader_rejected(self, tmp_path):
        p = tmp_path / "labs.idx"
        save_idx_labels(p, np.array([1, 2, 3]))
        with pytest.raises(DataError, match="magic"):
            load_idx_images(p)

    def test_truncated_payload_reports_offset(self, tmp_path):
        img_p, _ = write_fixture_pair(tmp_path, np.zeros((2, 3, 3), np.uint8), [0, 1])
        img_p.write_bytes(img_p.read_bytes()[:-5])
        with pytest.raises(DataError, match="byte"):
            load_idx_images(img_p)

    def test_count_mismatch_between_pair(self, tmp_path):
        img_p, lab_p = write_fixture_pair(tmp_path, np.zeros((2, 3, 3), np.uint8),
                                          [0, 1, 2])
        with pytest.raises(DataError, match="mismatch"):
            load_idx(img_p, lab_p)

    def test_roundtrip_byte_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, size=(5, 4, 6)).astype(np.uint8)
        labels = rng.integers(0, 10, size=5)
        img_p, lab_p = write_fixture_pair(tmp_path, pixels, labels)
        original_img, original_lab = img_p.read_bytes(), lab_p.read_bytes()
        ds = load_idx(img_p, lab_p)
        # write back from the float images: bytes must be identical
        save_idx_images(tmp_path / "again.idx", ds.images)
        save_idx_labels(tmp_path / "lagain.idx", ds.labels)
        assert (tmp_path / "again.idx").read_bytes() == original_img
        assert (tmp_path / "lagain.idx").read_bytes() == original_lab

    def test_pixels_scaled_to_unit_interval(self, tmp_path):
        img_p, lab_p = write_fixture_pair(
            tmp_path, np.full((1, 2, 2), 255, np.uint8), [3])
        ds = load_idx(img_p, lab_p)
        assert ds.images.max() == 1.0 and ds.images.min() == 1.0


class TestMakeMultiMnist:
    def test_seed_determinism(self):
        src = synthetic_sources(40)
        a_tr, a_te = make_multi_mnist(src, src, seed=5, n_train=30, n_test=10)
        b_tr, b_te = make_multi_mnist(src, src, seed=5, n_train=30, n_test=10)
        np.testing.assert_array_equal(a_tr.images, b_tr.images)
        np.testing.assert_array_equal(a_te.images, b_te.images)
        np.testing.assert_array_equal(a_tr.left_labels, b_tr.left_labels)

    def test_blank_sources_zero_canvas(self):
        src = MnistSet(images=np.zeros((4, 28, 28)), labels=np.arange(4) % 10)
        tr, _ = make_multi_mnist(src, src, seed=0, n_train=6, n_test=2)
        assert tr.images.shape == (6, 1, 36, 36)
        assert not tr.images.any()

    def test_corner_pixel_offset_arithmetic(self):
        # a lone white pixel at (27, 27) of the right digit lands at (35, 35)
        images = np.zeros((2, 28, 28))
        images[1, 27, 27] = 1.0
        src = MnistSet(images=images, labels=np.array([0, 1]))
        tr, _ = make_multi_mnist(src, src, seed=1, n_train=8, n_test=2)
        right_is_one = tr.right_labels == 1
        assert right_is_one.any()
        np.testing.assert_array_equal(tr.images[right_is_one, 0, 35, 35], 1.0)
        assert not tr.images[~right_is_one, 0, 35, 35].any()

    def test_pixel_range_and_untouched_region(self):
        src = synthetic_sources(100, h=28, w=28, seed=2)
        tr, te = make_multi_mnist(src, src, seed=3, n_train=200, n_test=50)
        for ds in (tr, te):
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
            # rows 0:8 x cols 28:36 lie outside both paste windows
            assert not ds.images[:, :, 0:8, 28:36].any()
            assert not ds.images[:, :, 28:36, 0:8].any()

    def test_same_index_pairs_excluded(self):
        # with only two distinct sources every pair must mix them
        src = MnistSet(images=np.zeros((2, 8, 8)), labels=np.array([0, 1]))
        tr, _ = make_multi_mnist(src, src, seed=4, n_train=64, n_test=8)
        assert np.all(tr.left_labels != tr.right_labels)

    def test_label_marginals_uniform_chi2(self):
        src = synthetic_sources(5000, h=8, w=8, seed=5)
        tr, _ = make_multi_mnist(src, src, seed=6, n_train=50_000, n_test=2)
        for labels in (tr.left_labels, tr.right_labels):
            counts = np.bincount(labels, minlength=10)
            expected = len(labels) / 10.0
            chi2 = float(((counts - expected) ** 2 / expected).sum())
            # chi-square with 9 dof: 35 is far beyond the 99.99% quantile
            assert chi2 < 35.0, counts

    def test_insufficient_sources_rejected(self):
        src = MnistSet(images=np.zeros((1, 8, 8)), labels=np.array([0]))
        with pytest.raises(DataError):
            make_multi_mnist(src, src, seed=0, n_train=4, n_test=2)


class TestBatches:
    def make_set(self, n):
        src = synthetic_sources(max(n, 20), h=8, w=8, seed=7)
        tr, _ = make_multi_mnist(src, src, seed=8, n_train=n, n_test=2)
        return tr

    def test_final_partial_batch_included(self):
        ds = self.make_set(100)
        sizes = [len(b[1]) for b in batches(ds, 64, seed=0, epoch=0)]
        assert sizes == [64, 36]

    def test_same_seed_epoch_identical_order(self):
        ds = self.make_set(50)
        a = [b[1] for b in batches(ds, 16, seed=3, epoch=2)]
        b = [b[1] for b in batches(ds, 16, seed=3, epoch=2)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_epoch_changes_order(self):
        ds = self.make_set(64)
        a = np.concatenate([b[1] for b in batches(ds, 64, seed=3, epoch=0)])
        b = np.concatenate([b[1] for b in batches(ds, 64, seed=3, epoch=1)])
        assert not np.array_equal(a, b)

    def test_union_is_full_set_without_duplicates(self):
        ds = self.make_set(45)
        seen = []
        for imgs, left, right in batches(ds, 8, seed=9, epoch=4):
            seen.append(imgs[:, 0, 0, :].sum(axis=1) + 1000 * left + right)
        stacked = np.concatenate(seen)
        assert stacked.shape[0] == 45
        full = ds.images[:, 0, 0, :].sum(axis=1) + 1000 * ds.left_labels + ds.right_labels
        np.testing.assert_array_equal(np.sort(stacked), np.sort(full))

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batches(self.make_set(4), 0, seed=0, epoch=0))


class TestRealMnist:
    def test_train_file_holds_sixty_thousand(self, mnist_dir):
        from butdlearn.data import load_mnist_dir
        ds = load_mnist_dir(mnist_dir, "train")
        assert len(ds) == 60_000
        assert ds.images.shape[1:] == (28, 28)


class TestMm36Cache:
    def test_roundtrip_bit_exact(self, tmp_path):
        src = synthetic_sources(30, h=28, w=28, seed=10)
        tr, _ = make_multi_mnist(src, src, seed=11, n_train=12, n_test=2)
        p = tmp_path / "train.mm36"
        save_mm36(p, tr)
        loaded = load_mm36(p)
        np.testing.assert_array_equal(loaded.images, tr.images)
        np.testing.assert_array_equal(loaded.left_labels, tr.left_labels)
        np.testing.assert_array_equal(loaded.right_labels, tr.right_labels)
        save_mm36(tmp_path / "again.mm36", loaded)
        assert (tmp_path / "again.mm36").read_bytes() == p.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.mm36"
        p.write_bytes(b"JUNKxxxxyyyyzzzzwwww")
        with pytest.raises(DataError, match="magic"):
            load_mm36(p)

    def test_truncation_detected(self, tmp_path):
        src = synthetic_sources(10, h=8, w=8, seed=12)
        tr, _ = make_multi_mnist(src, src, seed=13, n_train=4, n_test=2)
        p = tmp_path / "t.mm36"
        save_mm36(p, tr)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(DataError, match="byte"):
            load_mm36(p)
