import numpy as np
import pytest

from amff.encoder import (
    FeatureMap,
    Image,
    adaptive_max_pool,
    bilinear_upsample,
    grid_cell_stats,
    make_multiscale,
    read_image,
    rescale_bilinear,
    toy_encode,
    toy_encode_text,
    write_image,
)
from amff.errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from amff.tensor import make_rng


def _image(rng, h=32, w=32, c=1):
    return Image(rng.uniform(0, 1, size=(h, w, c)))


class TestRescaleBilinear:
    def test_factor_one_is_bit_exact_identity(self):
        img = _image(make_rng(0), 17, 23, 3)
        out = rescale_bilinear(img, 1.0)
        assert np.array_equal(out.pixels, img.pixels)

    def test_constant_image_stays_constant(self):
        img = Image(np.full((10, 14, 1), 0.7))
        for factor in (0.5, 1.3, 2.0):
            out = rescale_bilinear(img, factor)
            assert np.all(out.pixels == 0.7)

    def test_224_scale_dims(self):
        img = Image(np.zeros((224, 224, 1)))
        assert rescale_bilinear(img, 1.5).pixels.shape[:2] == (336, 336)
        assert rescale_bilinear(img, 0.5).pixels.shape[:2] == (112, 112)

    def test_2x2_upscale_hand_values(self):
        img = Image(np.array([[0.0, 0.1], [0.2, 0.3]]).reshape(2, 2, 1))
        out = rescale_bilinear(img, 2.0).pixels[:, :, 0]
        # half-pixel centers: source positions are clamp(dst/2 - 0.25, 0, 1),
        # i.e. (0, 0.25, 0.75, 1); the image is linear so out = 0.2 y + 0.1 x
        pos = np.array([0.0, 0.25, 0.75, 1.0])
        expected = 0.2 * pos[:, None] + 0.1 * pos[None, :]
        assert np.allclose(out, expected, atol=1e-12)

    def test_rounding_half_up(self):
        img = Image(np.zeros((5, 5, 1)))
        assert rescale_bilinear(img, 0.5).pixels.shape[:2] == (3, 3)  # 2.5 -> 3

    def test_degenerate_output_errors(self):
        img = Image(np.zeros((3, 3, 1)))
        with pytest.raises(ShapeError):
            rescale_bilinear(img, 0.1)
        with pytest.raises(ConfigError):
            rescale_bilinear(img, -1.0)

    def test_multiscale_dims(self):
        img = _image(make_rng(1), 20, 30)
        msi = make_multiscale(img)
        assert msi.i_15.pixels.shape[:2] == (30, 45)
        assert msi.i_10.pixels.shape[:2] == (20, 30)
        assert msi.i_05.pixels.shape[:2] == (10, 15)


class TestAdaptiveMaxPool:
    def test_constant_map(self):
        fm = FeatureMap(np.full((2, 14, 14), 0.4))
        out = adaptive_max_pool(fm, 7, 7)
        assert out.data.shape == (2, 7, 7)
        assert np.all(out.data == 0.4)

    def test_global_max_preserved(self):
        rng = make_rng(2)
        fm = FeatureMap(rng.standard_normal((3, 11, 9)))
        out = adaptive_max_pool(fm, 4, 3)
        assert out.data.max() == fm.data.max()

    def test_4x4_to_2x2_brute_force(self):
        data = np.arange(16, dtype=float).reshape(1, 4, 4)
        out = adaptive_max_pool(FeatureMap(data), 2, 2)
        expected = np.array([[[5.0, 7.0], [13.0, 15.0]]])
        assert np.array_equal(out.data, expected)

    def test_identity_when_same_dims(self):
        rng = make_rng(3)
        fm = FeatureMap(rng.standard_normal((2, 5, 6)))
        out = adaptive_max_pool(fm, 5, 6)
        assert np.array_equal(out.data, fm.data)

    def test_output_within_input_range(self):
        rng = make_rng(4)
        fm = FeatureMap(rng.standard_normal((1, 10, 10)))
        out = adaptive_max_pool(fm, 3, 7)
        assert out.data.min() >= fm.data.min()
        assert out.data.max() <= fm.data.max()

    def test_windows_tile_input(self):
        h, w, oh, ow = 10, 13, 4, 5
        covered = np.zeros((h, w), dtype=bool)
        for i in range(oh):
            r0, r1 = (i * h) // oh, -((-(i + 1) * h) // oh)
            for j in range(ow):
                c0, c1 = (j * w) // ow, -((-(j + 1) * w) // ow)
                assert r1 > r0 and c1 > c0
                covered[r0:r1, c0:c1] = True
        assert covered.all()

    def test_invalid_target(self):
        fm = FeatureMap(np.zeros((1, 4, 4)))
        with pytest.raises(ShapeError):
            adaptive_max_pool(fm, 5, 4)
        with pytest.raises(ShapeError):
            adaptive_max_pool(fm, 0, 2)


class TestBilinearUpsample:
    def test_4x4_to_7x7_shape(self):
        fm = FeatureMap(np.zeros((2048 // 256, 4, 4)))  # shrunk channel count
        out = bilinear_upsample(fm, 7, 7)
        assert out.data.shape == (8, 7, 7)

    def test_constant_map(self):
        fm = FeatureMap(np.full((3, 3, 3), 1.25))
        out = bilinear_upsample(fm, 6, 5)
        assert np.all(out.data == 1.25)

    def test_2x2_to_3x3_hand_values(self):
        fm = FeatureMap(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 2, 2))
        out = bilinear_upsample(fm, 3, 3).data[0]
        # source positions clamp((i+0.5)*2/3 - 0.5, 0, 1) = (0, 0.5, 1)
        pos = np.array([0.0, 0.5, 1.0])
        expected = 2.0 * pos[:, None] + pos[None, :]
        assert np.allclose(out, expected, atol=1e-12)

    def test_smaller_target_errors(self):
        fm = FeatureMap(np.zeros((1, 4, 4)))
        with pytest.raises(ShapeError):
            bilinear_upsample(fm, 3, 4)


class TestToyEncode:
    def test_deterministic(self):
        img = _image(make_rng(5), 32, 32, 3)
        msi = make_multiscale(img)
        a = toy_encode(msi, 16)
        b = toy_encode(msi, 16)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_unit_norm(self):
        msi = make_multiscale(_image(make_rng(6), 40, 40))
        for vec in toy_encode(msi, 32):
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-12)

    def test_brightness_shift_changes_means_not_stds(self):
        rng = make_rng(7)
        base = rng.uniform(0.2, 0.6, size=(32, 32, 1))
        img_a = Image(base)
        img_b = Image(base + 0.3)
        means_a, stds_a = grid_cell_stats(img_a)
        means_b, stds_b = grid_cell_stats(img_b)
        assert np.all(np.abs((means_b - means_a) - 0.3) < 1e-12)
        assert np.allclose(stds_a, stds_b, atol=1e-12)

    def test_recompute_cell_stats_directly(self):
        rng = make_rng(8)
        img = _image(rng, 33, 47, 3)  # non-divisible dims
        means, stds = grid_cell_stats(img)
        h, w = 33, 47
        for idx in (0, 77, 255):
            i, j = divmod(idx, 16)
            cell = img.pixels[(i * h) // 16 : ((i + 1) * h) // 16, (j * w) // 16 : ((j + 1) * w) // 16]
            assert means[idx] == pytest.approx(cell.mean(), abs=1e-12)
            assert stds[idx] == pytest.approx(cell.std(), abs=1e-12)

    def test_small_image_errors(self):
        msi = make_multiscale(_image(make_rng(9), 20, 20))
        with pytest.raises(DataError):  # the 0.5x scale is 10 px < grid
            toy_encode(msi, 16)

    def test_dim_divisibility(self):
        msi = make_multiscale(_image(make_rng(10), 32, 32))
        with pytest.raises(ConfigError):
            toy_encode(msi, 15)


class TestToyEncodeText:
    def test_deterministic(self):
        assert np.array_equal(toy_encode_text("a cat on a mat", 32), toy_encode_text("a cat on a mat", 32))

    def test_unit_norm(self):
        assert np.linalg.norm(toy_encode_text("prompt", 64)) == pytest.approx(1.0, abs=1e-12)

    def test_different_prompts_differ(self):
        a = toy_encode_text("cat", 64)
        b = toy_encode_text("dog", 64)
        assert float(a @ b) < 1.0 - 1e-6

    def test_short_prompt_ok(self):
        v = toy_encode_text("ab", 16)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)

    def test_empty_prompt_errors(self):
        with pytest.raises(DataError):
            toy_encode_text("", 16)


class TestImageIO:
    def test_binary_round_trip(self, tmp_path):
        rng = make_rng(11)
        img = Image(np.round(rng.uniform(0, 1, size=(9, 7, 3)) * 255) / 255)
        path = tmp_path / "img.ppm"
        write_image(path, img)
        back = read_image(path)
        assert back.channels == 3
        assert np.allclose(back.pixels, img.pixels, atol=1e-12)

    def test_gray_round_trip_16bit(self, tmp_path):
        rng = make_rng(12)
        img = Image(np.round(rng.uniform(0, 1, size=(5, 4, 1)) * 65535) / 65535)
        path = tmp_path / "img.pgm"
        write_image(path, img, maxval=65535)
        back = read_image(path)
        assert np.allclose(back.pixels, img.pixels, atol=1e-12)

    def test_ascii_pgm_with_comments(self, tmp_path):
        path = tmp_path / "plain.pgm"
        path.write_text("P2\n# a comment\n3 2\n# another\n10\n0 5 10\n10 5 0\n")
        img = read_image(path)
        assert img.pixels.shape == (2, 3, 1)
        assert img.pixels[0, 1, 0] == pytest.approx(0.5)

    def test_ascii_ppm(self, tmp_path):
        path = tmp_path / "plain.ppm"
        path.write_text("P3\n1 1\n255\n255 0 128\n")
        img = read_image(path)
        assert img.pixels[0, 0, 0] == 1.0
        assert img.pixels[0, 0, 2] == pytest.approx(128 / 255)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.img"
        path.write_bytes(b"JUNKDATA")
        with pytest.raises(FormatError, match="magic"):
            read_image(path)

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "trunc.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(FormatError, match="truncated"):
            read_image(path)

    def test_maxval_bounds(self, tmp_path):
        path = tmp_path / "big.pgm"
        path.write_text("P2\n1 1\n70000\n0\n")
        with pytest.raises(FormatError, match="maxval"):
            read_image(path)

    def test_non_integer_ascii_sample(self, tmp_path):
        path = tmp_path / "junk.pgm"
        path.write_text("P2\n2 1\n255\n12 oops\n")
        with pytest.raises(FormatError, match="non-integer"):
            read_image(path)


def test_image_validation():
    with pytest.raises(NumericError):
        Image(np.full((4, 4, 1), 1.5))
    with pytest.raises(ShapeError):
        Image(np.zeros((4, 4, 2)))
