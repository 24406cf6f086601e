"""Dataset synthesis: IDX ingestion, boundary/style transforms, splits."""

import struct

import numpy as np
import pytest
from scipy import stats

from refvae import data as D


def make_idx_bytes(dims, dtype_code=0x08, payload=None):
    header = struct.pack(">BBBB", 0, 0, dtype_code, len(dims))
    header += struct.pack(f">{len(dims)}I", *dims)
    if payload is None:
        payload = bytes(int(np.prod(dims)))
    return header + payload


class TestIdxLoading:
    def test_two_images_from_format_arithmetic(self, tmp_path):
        """Magic 2051, dims (2,28,28), 1568 payload bytes -> 2 images."""
        payload = bytes(range(256)) * 6 + bytes(32)
        path = tmp_path / "imgs"
        path.write_bytes(make_idx_bytes((2, 28, 28), payload=payload))
        raw = D.load_idx(path)
        assert raw.images.shape == (2, 28, 28)
        assert raw.images.min() >= 0 and raw.images.max() <= 1
        np.testing.assert_allclose(raw.images[0, 0, 5], 5 / 255.0, rtol=1e-6)

    def test_label_magic_rejected_by_image_loader(self, tmp_path):
        """A rank-1 label file (magic 2049) is not an image file."""
        path = tmp_path / "labels"
        path.write_bytes(make_idx_bytes((4,), payload=bytes(4)))
        with pytest.raises(D.IdxFormatError):
            D.load_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc"
        path.write_bytes(make_idx_bytes((2, 28, 28), payload=bytes(100)))
        with pytest.raises(D.IdxFormatError, match="truncated"):
            D.load_idx(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"\x12\x34\x56\x78" + bytes(100))
        with pytest.raises(D.IdxFormatError):
            D.read_idx(path)

    def test_labels_roundtrip(self, tmp_path):
        imgs = tmp_path / "i"
        labs = tmp_path / "l"
        imgs.write_bytes(make_idx_bytes((3, 4, 4)))
        labs.write_bytes(make_idx_bytes((3,), payload=bytes([7, 1, 9])))
        raw = D.load_idx(imgs, labs)
        assert list(raw.labels) == [7, 1, 9]

    def test_gzip_transparent(self, tmp_path):
        import gzip

        path = tmp_path / "imgs.gz"
        path.write_bytes(gzip.compress(make_idx_bytes((2, 3, 3))))
        assert D.load_idx(path).images.shape == (2, 3, 3)


def naive_bilinear(img, out_h, out_w):
    """Per-pixel reference bilinear resize (half-pixel centers)."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * in_h / out_h - 0.5, 0), in_h - 1)
            sx = min(max((j + 0.5) * in_w / out_w - 0.5, 0), in_w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def naive_erode3(binary):
    """Brute-force 3x3 erosion with zero border."""
    h, w = binary.shape
    out = np.zeros_like(binary)
    for i in range(h):
        for j in range(w):
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    y, x = i + di, j + dj
                    if y < 0 or y >= h or x < 0 or x >= w or not binary[y, x]:
                        ok = False
            out[i, j] = ok
    return out


class TestBoundaryPreprocess:
    def test_all_zero_stays_zero(self):
        out = D.boundary_preprocess(np.zeros((28, 28)), 64)
        assert out.shape == (64, 64)
        assert not out.any()

    def test_output_is_64x64_binary(self):
        rng = np.random.default_rng(0)
        out = D.boundary_preprocess(rng.uniform(size=(28, 28)), 64)
        assert out.shape == (64, 64)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_filled_square_becomes_outline(self):
        """Brute-force oracle: binarized upscale minus its 3x3 erosion."""
        img = np.zeros((28, 28))
        img[6:22, 6:22] = 1.0
        out = D.boundary_preprocess(img, 64)

        up = naive_bilinear(img, 64, 64)
        binary = up >= 0.5
        expected = binary & ~naive_erode3(binary)
        np.testing.assert_array_equal(out.astype(bool), expected)
        # a filled block yields a closed 1-pixel-thick ring: interior empty
        ys, xs = np.where(out)
        assert out[ys.min() + 2 : ys.max() - 1, xs.min() + 2 : xs.max() - 1].sum() == 0

    def test_matches_naive_bilinear(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(9, 7)).astype(np.float32)
        got = D.bilinear_resize(img, 20, 15)
        np.testing.assert_allclose(got, naive_bilinear(img, 20, 15), atol=1e-5)


class TestApplyStyle:
    def test_identity_factors(self):
        """width 1 and scale 1 leave geometry unchanged; equal thirds color
        makes all channels img/3."""
        rng = np.random.default_rng(1)
        img = (rng.uniform(size=(16, 16)) > 0.8).astype(np.float32)
        f = D.StyleFactors(1, 1.0, np.full(3, 1 / 3))
        out = D.apply_style(img, f)
        for c in range(3):
            np.testing.assert_allclose(out[:, :, c], img / 3, atol=1e-7)

    def test_half_scale_pads_to_center(self):
        img = np.ones((16, 16), dtype=np.float32)
        f = D.StyleFactors(1, 0.5, np.array([0.5, 0.25, 0.25]))
        out = D.apply_style(img, f)
        assert out.shape == (16, 16, 3)
        # active content confined to the central 8x8 region
        assert out[4:12, 4:12].sum() > 0
        mask = np.zeros((16, 16), bool)
        mask[4:12, 4:12] = True
        assert out[~mask].sum() == 0

    def test_dilation_grows_stroke(self):
        """Dilation by k matches brute-force max-filter over a kxk window."""
        rng = np.random.default_rng(2)
        img = np.zeros((16, 16), dtype=np.float32)
        img[8, 3:13] = 1.0
        k = 4
        out = D.apply_style(img, D.StyleFactors(k, 1.0, np.full(3, 1 / 3)))
        got = (out[:, :, 0] > 0).astype(int)

        expected = np.zeros_like(got)
        # even kernels lean forward: pixel i sees [i-(k-1)//2, i+k//2]
        lo, hi = -((k - 1) // 2), k // 2
        for i in range(16):
            for j in range(16):
                window = img[
                    max(0, i + lo) : min(16, i + hi + 1),
                    max(0, j + lo) : min(16, j + hi + 1),
                ]
                expected[i, j] = int(window.max() > 0.5)
        np.testing.assert_array_equal(got, expected)

    def test_colorize_scales_each_channel(self):
        img = (np.arange(64).reshape(8, 8) % 5 == 0).astype(np.float32)
        c = np.array([0.5, 0.3, 0.2])
        out = D.apply_style(img, D.StyleFactors(1, 1.0, c))
        gray = D.transformed_gray(img, D.StyleFactors(1, 1.0, c))
        for i in range(3):
            np.testing.assert_allclose(out[:, :, i], gray * c[i], atol=1e-6)

    def test_out_of_range_factors_rejected(self):
        img = np.zeros((8, 8), dtype=np.float32)
        with pytest.raises(ValueError):
            D.apply_style(img, D.StyleFactors(0, 1.0, np.full(3, 1 / 3)))
        with pytest.raises(ValueError):
            D.apply_style(img, D.StyleFactors(1, 0.4, np.full(3, 1 / 3)))
        with pytest.raises(ValueError):
            D.apply_style(img, D.StyleFactors(1, 1.0, np.array([0.9, 0.3, 0.2])))

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        img = (rng.uniform(size=(12, 12)) > 0.7).astype(np.float32)
        f = D.sample_style_factors(rng)
        np.testing.assert_array_equal(D.apply_style(img, f), D.apply_style(img, f))


class TestSampleStyleFactors:
    def test_width_uniform_chi_square(self):
        """10k draws: width histogram passes a chi-square uniformity test."""
        rng = np.random.default_rng(123)
        widths = [D.sample_style_factors(rng).width_k for _ in range(10_000)]
        counts = np.bincount(widths, minlength=11)[1:]
        assert counts.sum() == 10_000
        p = stats.chisquare(counts).pvalue
        assert p > 0.01

    def test_scale_bounds_and_simplex(self):
        rng = np.random.default_rng(7)
        for _ in range(2000):
            f = D.sample_style_factors(rng)
            assert 0.5 <= f.scale_s <= 1.0
            assert (f.color_c >= 0).all()
            assert abs(f.color_c.sum() - 1.0) <= 1e-6

    def test_l1_normalization_rule(self):
        """A raw draw (2,1,1) normalizes to (0.5, 0.25, 0.25)."""
        raw = np.array([2.0, 1.0, 1.0])
        np.testing.assert_allclose(raw / raw.sum(), [0.5, 0.25, 0.25])


class TestBuildSplits:
    def test_two_raw_images(self):
        raw = D.RawImageSet(np.zeros((2, 28, 28)), np.array([3, 5]))
        ds = D.build_splits(raw, np.random.default_rng(0), image_size=32)
        assert len(ds.reference) == 1
        assert len(ds.unlabelled) == 2
        assert len(ds.templates) == 1

    def test_same_seed_bit_identical(self):
        raw = D.synthetic_digits(10, np.random.default_rng(5))
        a = D.build_splits(raw, np.random.default_rng(9), image_size=32)
        b = D.build_splits(raw, np.random.default_rng(9), image_size=32)
        np.testing.assert_array_equal(a.reference, b.reference)
        np.testing.assert_array_equal(a.unlabelled, b.unlabelled)
        np.testing.assert_array_equal(a.u_color, b.u_color)

    def test_unlabelled_consistent_with_stored_factors(self):
        """Label consistency: every unlabelled image re-renders bit-exactly
        from its template and stored factors."""
        raw = D.synthetic_digits(8, np.random.default_rng(6))
        ds = D.build_splits(raw, np.random.default_rng(2), image_size=32)
        for i in range(len(ds.unlabelled)):
            re_rendered = D.apply_style(
                ds.templates[ds.u_source[i]], ds.style_factors(i)
            )
            np.testing.assert_array_equal(ds.unlabelled[i], re_rendered)

    def test_reference_channels_identical_and_untransformed(self):
        raw = D.synthetic_digits(8, np.random.default_rng(8))
        ds = D.build_splits(raw, np.random.default_rng(3), image_size=32)
        np.testing.assert_array_equal(ds.reference[..., 0], ds.reference[..., 1])
        np.testing.assert_array_equal(ds.reference[..., 0], ds.reference[..., 2])
        assert set(np.unique(ds.reference)) <= {0.0, 1.0}


class TestToyDataset:
    def test_counts_and_shapes(self):
        ds = D.make_toy_dataset(100, 32, np.random.default_rng(0))
        assert ds.reference.shape == (100, 32, 32, 3)
        assert ds.unlabelled.shape == (200, 32, 32, 3)

    def test_color_ratio_against_gray_template(self, toy16):
        """Each channel equals color_c[i] times the dilated/scaled gray."""
        for i in (0, 7, 33):
            gray = D.transformed_gray(
                toy16.templates[toy16.u_source[i]], toy16.style_factors(i)
            )
            for c in range(3):
                np.testing.assert_allclose(
                    toy16.unlabelled[i, :, :, c],
                    gray * toy16.u_color[i, c],
                    atol=1e-6,
                )

    def test_fixed_seed_reproducible_hash(self):
        import hashlib

        def corpus_hash(ds):
            h = hashlib.sha256()
            h.update(ds.reference.tobytes())
            h.update(ds.unlabelled.tobytes())
            return h.hexdigest()

        a = D.make_toy_dataset(20, 16, np.random.default_rng(77))
        b = D.make_toy_dataset(20, 16, np.random.default_rng(77))
        assert corpus_hash(a) == corpus_hash(b)

    def test_minimum_size_enforced(self):
        with pytest.raises(ValueError):
            D.make_toy_dataset(4, 7, np.random.default_rng(0))


class TestSyntheticDigits:
    def test_shapes_and_range(self):
        raw = D.synthetic_digits(25, np.random.default_rng(0))
        assert raw.images.shape == (25, 28, 28)
        assert raw.images.min() >= 0 and raw.images.max() <= 1
        assert ((0 <= raw.labels) & (raw.labels <= 9)).all()


class TestPersistence:
    def test_roundtrip(self, toy16, tmp_path):
        D.save_dataset(toy16, tmp_path / "ds", seed=11)
        loaded = D.load_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(loaded.reference, toy16.reference)
        np.testing.assert_array_equal(loaded.unlabelled, toy16.unlabelled)
        np.testing.assert_array_equal(loaded.u_source, toy16.u_source)
        np.testing.assert_array_equal(loaded.u_class, toy16.u_class)
        assert loaded.image_size == toy16.image_size

    def test_manifest_hash_deterministic(self, tmp_path):
        a = D.make_toy_dataset(12, 16, np.random.default_rng(3))
        b = D.make_toy_dataset(12, 16, np.random.default_rng(3))
        ma = D.save_dataset(a, tmp_path / "a", seed=3)
        mb = D.save_dataset(b, tmp_path / "b", seed=3)
        assert D.manifest_hash(ma) == D.manifest_hash(mb)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(D.DatasetError):
            D.load_dataset(tmp_path)


class TestModelRange:
    def test_round_trip(self):
        x = np.random.default_rng(0).uniform(size=(4, 4, 3)).astype(np.float32)
        np.testing.assert_allclose(
            D.from_model_range(D.to_model_range(x)), x, atol=1e-6
        )
