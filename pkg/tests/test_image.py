import math

import numpy as np
import pytest

from contrareg.geometry import RigidTransform2D
from contrareg.image import Image, as_image, central_crop, load_image, rotate_c4, save_image, warp


def ramp_image(h=12, w=16):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
    return as_image((xs + 2 * ys)[None] / (w + 2 * h))


class TestImageType:
    def test_2d_promoted_to_single_channel(self):
        img = Image(np.zeros((4, 5)))
        assert img.pixels.shape == (1, 4, 5)
        assert img.channels == 1 and img.height == 4 and img.width == 5

    def test_rejects_non_finite(self):
        bad = np.zeros((1, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Image(bad)

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            Image(np.zeros((1, 2, 2)), value_range=(1.0, 0.0))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            Image(np.zeros((2, 2, 2, 2)))


class TestRotateC4:
    def test_k0_is_bit_exact_copy(self):
        img = ramp_image()
        out = rotate_c4(img, 0)
        assert np.array_equal(out.pixels, img.pixels)
        assert out.pixels is not img.pixels

    def test_four_quarter_turns_are_identity(self):
        img = ramp_image(h=10, w=10)
        out = img
        for _ in range(4):
            out = rotate_c4(out, 1)
        assert np.array_equal(out.pixels, img.pixels)

    def test_half_turn_permutation_oracle(self):
        img = as_image(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = rotate_c4(img, 2)
        np.testing.assert_array_equal(out.pixels[0], [[4.0, 3.0], [2.0, 1.0]])

    def test_rect_odd_k_swaps_dims(self):
        img = ramp_image(h=4, w=6)
        out = rotate_c4(img, 1)
        assert (out.height, out.width) == (6, 4)

    def test_composition_matches_group_law(self):
        img = ramp_image(h=8, w=8)
        a = rotate_c4(rotate_c4(img, 1), 2)
        b = rotate_c4(img, 3)
        assert np.array_equal(a.pixels, b.pixels)


class TestWarp:
    def test_identity_nearest_bit_exact(self):
        img = ramp_image()
        res = warp(img, RigidTransform2D.identity(), interpolation="nearest")
        assert np.array_equal(res.image.pixels, img.pixels)
        assert res.oob_fraction == 0.0

    def test_integer_translation_is_index_shift(self):
        img = ramp_image()
        res = warp(img, RigidTransform2D(translation=(1.0, 0.0)), interpolation="nearest")
        # output pixel (x, y) samples source (x+1, y)
        np.testing.assert_array_equal(res.image.pixels[:, :, :-1], img.pixels[:, :, 1:])
        assert res.support[:, -1].sum() == 0

    def test_quarter_turn_matches_exact_permutation(self):
        rng = np.random.default_rng(0)
        img = as_image(rng.random((2, 9, 9), dtype=np.float64))
        t = RigidTransform2D(angle=math.pi / 2, center=img.spatial_center)
        res = warp(img, t, interpolation="linear")
        exact = rotate_c4(img, 1)
        interior = res.support
        np.testing.assert_allclose(
            res.image.pixels[:, interior], exact.pixels[:, interior], atol=1e-6
        )

    def test_round_trip_interior_within_two_quantization_steps(self):
        # band-limited pattern: double linear interpolation stays within
        # two 8-bit quantization steps
        ys, xs = np.meshgrid(np.arange(64.0), np.arange(64.0), indexing="ij")
        img = as_image((0.5 + 0.4 * np.sin(2 * np.pi * xs / 48) * np.cos(2 * np.pi * ys / 40))[None])
        t = RigidTransform2D(angle=0.3, translation=(2.5, -1.25), center=img.spatial_center)
        fwd = warp(img, t, interpolation="linear")
        back = warp(fwd.image, t.inverse(), interpolation="linear")
        # margin large enough that both samplings stay in support
        sel = np.zeros((64, 64), dtype=bool)
        sel[16:-16, 16:-16] = True
        assert back.support[sel].all()
        tol = 2.0 / 255.0
        assert np.abs(back.image.pixels[0][sel] - img.pixels[0][sel]).max() <= tol

    def test_out_size_and_support_fraction(self):
        img = ramp_image(h=8, w=8)
        res = warp(img, RigidTransform2D(translation=(6.0, 0.0)), out_size=(8, 8))
        assert res.image.pixels.shape == (1, 8, 8)
        assert 0.0 < res.oob_fraction < 1.0

    def test_unknown_interpolation_rejected(self):
        with pytest.raises(ValueError):
            warp(ramp_image(), RigidTransform2D.identity(), interpolation="sinc")


class TestCrop:
    def test_central_crop_shape_and_content(self):
        img = ramp_image(h=10, w=10)
        out = central_crop(img, (4, 4))
        np.testing.assert_array_equal(out.pixels, img.pixels[:, 3:7, 3:7])

    def test_crop_too_large_rejected(self):
        with pytest.raises(ValueError):
            central_crop(ramp_image(h=4, w=4), (6, 6))


class TestIO:
    @pytest.mark.parametrize("suffix", [".png", ".tif"])
    def test_uint8_round_trip(self, tmp_path, suffix):
        rng = np.random.default_rng(2)
        data = rng.integers(0, 256, size=(6, 7), dtype=np.uint8)
        path = tmp_path / f"img{suffix}"
        if suffix == ".png":
            from PIL import Image as PILImage

            PILImage.fromarray(data).save(path)
        else:
            import tifffile

            tifffile.imwrite(path, data)
        img = load_image(path, modality="x")
        assert img.pixels.shape == (1, 6, 7)
        np.testing.assert_allclose(img.pixels[0], data / 255.0, atol=1e-7)
        assert img.modality == "x"

    def test_16bit_png_normalization(self, tmp_path):
        from PIL import Image as PILImage

        data = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
        path = tmp_path / "img16.png"
        PILImage.fromarray(data).save(path)
        img = load_image(path)
        np.testing.assert_allclose(img.pixels[0], data / 65535.0, atol=1e-7)

    def test_float_tiff_multichannel_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        img = as_image(rng.random((3, 5, 4), dtype=np.float64).astype(np.float32))
        path = tmp_path / "multi.tif"
        save_image(img, path)
        loaded = load_image(path)
        assert loaded.pixels.shape == (3, 5, 4)
        np.testing.assert_allclose(loaded.pixels, img.pixels, atol=1e-7)

    def test_unsupported_format_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            load_image(tmp_path / "img.bmp")
