import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from skimage.metrics import structural_similarity

from esrt import data as D
from esrt.errors import ArgError, DataError, ShapeError


def write_png(path, img):
    Image.fromarray(D.to_uint8(img)).save(path)


class TestBicubic:
    def test_constant_and_identity(self, rng):
        np.testing.assert_allclose(D.bicubic_resize(np.full((9, 7, 3), 0.4), 20, 3), 0.4, atol=1e-12)
        x = rng.uniform(0, 1, (9, 7, 3))
        np.testing.assert_allclose(D.bicubic_resize(x, 9, 7), x, atol=1e-6)

    def test_zero_size(self):
        with pytest.raises(ArgError):
            D.bicubic_resize(np.ones((4, 4)), 0, 2)

    @pytest.mark.parametrize("oh,ow", [(20, 26), (80, 104), (13, 17)])
    def test_interior_matches_pil(self, rng, oh, ow):
        x = rng.uniform(0, 1, (40, 52))
        pil = np.asarray(Image.fromarray(x.astype(np.float32), mode="F").resize((ow, oh), Image.BICUBIC))
        ours = D.bicubic_resize(x, oh, ow)
        np.testing.assert_allclose(ours[6:-6, 6:-6], pil[6:-6, 6:-6], atol=1e-6)

    def test_weights_rows_sum_to_one(self):
        for n_in, n_out in [(10, 5), (7, 21), (9, 4)]:
            np.testing.assert_allclose(D.resize_weights(n_in, n_out).sum(axis=1), 1.0)

    def test_upscale_interpolates_samples_at_integer_ratio(self, rng):
        # the a=-0.5 kernel is interpolating: odd-ratio centres reproduce inputs
        x = rng.uniform(0, 1, (6, 6))
        up = D.bicubic_resize(x, 18, 18)
        np.testing.assert_allclose(up[1::3, 1::3], x, atol=1e-12)


class TestLuma:
    def test_examples(self):
        assert D.rgb_to_y(np.zeros((1, 1, 3)))[0, 0] == pytest.approx(16 / 255)
        assert D.rgb_to_y(np.ones((1, 1, 3)))[0, 0] == pytest.approx(235 / 255)
        v = 0.37
        assert D.rgb_to_y(np.full((1, 1, 3), v))[0, 0] == pytest.approx(16 / 255 + 219 * v / 255)


class TestPSNR:
    def test_identical_is_inf(self, rng):
        a = rng.uniform(0, 1, (8, 8, 3))
        assert D.psnr_y(a, a, 2) == math.inf

    def test_uniform_error(self):
        a = np.full((6, 6), 0.5)
        assert D.psnr_y(a, a + 1 / 255) == pytest.approx(20 * math.log10(255))

    def test_symmetric_and_monotone(self, rng):
        a = rng.uniform(0, 1, (16, 16, 3))
        noise = rng.standard_normal(a.shape)
        assert D.psnr_y(a, a + 0.01 * noise) == D.psnr_y(a + 0.01 * noise, a)
        vals = [D.psnr_y(a, a + amp * noise, 1) for amp in (0.001, 0.01, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            D.psnr_y(np.ones((8, 8)), np.ones((8, 9)), 1)
        with pytest.raises(ArgError):
            D.psnr_y(np.ones((4, 4)), np.ones((4, 4)), 2)


class TestSSIM:
    def test_identical(self, rng):
        a = rng.uniform(0, 1, (20, 24, 3))
        assert D.ssim_y(a, a) == pytest.approx(1.0)

    def test_constant_patches(self):
        c1 = 0.01 ** 2
        assert D.ssim_y(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(c1 / (1 + c1))

    def test_too_small(self):
        with pytest.raises(ArgError):
            D.ssim_y(np.ones((14, 14)), np.ones((14, 14)), shave=2)

    def test_matches_skimage(self, rng):
        a = rng.uniform(0, 1, (40, 33))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert D.ssim_y(a, b) == pytest.approx(ref, abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_bounded(self, seed, amp):
        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (16, 16))
        b = np.clip(a + amp * r.standard_normal(a.shape), 0, 1)
        assert -1 <= D.ssim_y(a, b) <= 1 + 1e-12


class TestPairs:
    def test_mod_crop_alignment(self, rng):
        hr = rng.uniform(0, 1, (27, 34, 3))
        for r in (2, 3, 4):
            pair = D.make_pair(hr, r)
            assert pair.hr.shape[0] == pair.lr.shape[0] * r
            assert pair.hr.shape[1] == pair.lr.shape[1] * r
            assert pair.lr.shape[:2] == (27 // r, 34 // r)

    def test_crop_alignment(self, rng):
        pair = D.make_pair(rng.uniform(0, 1, (40, 40, 3)), 2)
        lr, hr = D.crop_pair(pair, 0, 0, 8)
        np.testing.assert_array_equal(hr, pair.hr[:16, :16])
        lr, hr = D.crop_pair(pair, 3, 5, 8)
        np.testing.assert_array_equal(hr[0, 0], pair.hr[6, 10])

    def test_flip_involution(self, rng):
        x = rng.uniform(0, 1, (5, 7, 3))
        np.testing.assert_array_equal(D.augment(D.augment(x, True, 0), True, 0), x)
        np.testing.assert_array_equal(D.augment(x, False, 4), x)

    def test_sample_determinism_and_alignment(self, rng):
        pair = D.make_pair(rng.uniform(0, 1, (48, 40, 3)), 2)
        a = D.sample_patches(pair, 8, 6, np.random.default_rng(3))
        b = D.sample_patches(pair, 8, 6, np.random.default_rng(3))
        assert a[0].shape == (6, 3, 8, 8) and a[1].shape == (6, 3, 16, 16)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))
        # each sample is one aligned crop under one shared flip/rotation
        lr, hr = D.sample_patches(pair, 8, 6, np.random.default_rng(4))
        candidates = [(D.augment(a, f, k).transpose(2, 0, 1), D.augment(b, f, k).transpose(2, 0, 1))
                      for y in range(17) for x in range(13) for a, b in [D.crop_pair(pair, y, x, 8)]
                      for f in (False, True) for k in range(4)]
        for i in range(6):
            assert any(np.array_equal(lr[i], a) and np.array_equal(hr[i], b) for a, b in candidates)

    def test_patch_too_large(self, rng):
        pair = D.make_pair(rng.uniform(0, 1, (16, 16, 3)), 2)
        with pytest.raises(ArgError):
            D.sample_patches(pair, 9, 1, rng)


class TestDataset:
    def test_hr_only(self, tmp_path, rng):
        (tmp_path / "HR").mkdir()
        for name in ("b", "a"):
            write_png(tmp_path / "HR" / f"{name}.png", rng.uniform(0, 1, (13, 10, 3)))
        pairs = D.load_dataset(tmp_path, 2)
        assert [p.name for p in pairs] == ["a", "b"]
        assert pairs[0].hr.shape == (12, 10, 3) and pairs[0].lr.shape == (6, 5, 3)

    def test_paired_lr_and_ppm(self, tmp_path, rng):
        (tmp_path / "HR").mkdir()
        (tmp_path / "LR_x2").mkdir()
        hr = rng.uniform(0, 1, (8, 8, 3))
        Image.fromarray(D.to_uint8(hr)).save(tmp_path / "HR" / "img.ppm")
        lr = rng.uniform(0, 1, (4, 4, 3))
        write_png(tmp_path / "LR_x2" / "imgx2.png", lr)
        (pair,) = D.load_dataset(tmp_path, 2)
        np.testing.assert_array_equal(pair.lr, D.quantize(lr))
        np.testing.assert_array_equal(pair.hr, D.quantize(hr))

    def test_flat_folder_and_errors(self, tmp_path, rng):
        with pytest.raises(DataError):
            D.load_dataset(tmp_path / "missing", 2)
        with pytest.raises(DataError):
            D.load_dataset(tmp_path, 2)
        write_png(tmp_path / "x.png", rng.uniform(0, 1, (8, 8, 3)))
        assert len(D.load_dataset(tmp_path, 4)) == 1
        (tmp_path / "bad.png").write_text("not an image")
        with pytest.raises(DataError):
            D.load_dataset(tmp_path, 2)

    def test_png_roundtrip(self, tmp_path, rng):
        img = D.quantize(rng.uniform(0, 1, (5, 6, 3)))
        D.save_image(img, tmp_path / "o.png")
        np.testing.assert_array_equal(D.load_image(tmp_path / "o.png"), img)


def test_evaluate_identity_and_threads(rng, monkeypatch):
    pairs = [D.make_pair(D.quantize(rng.uniform(0, 1, (32, 32, 3))), 2, name=str(i)) for i in range(3)]
    monkeypatch.setenv("ESRT_THREADS", "2")
    scores = D.evaluate(pairs, D.identity_predict, 2)
    assert [s.name for s in scores] == ["0", "1", "2"]
    assert all(s.psnr == math.inf and s.ssim == pytest.approx(1.0) for s in scores)
    serial = D.evaluate(pairs, D.bicubic_predict, 2, workers=1)
    threaded = D.evaluate(pairs, D.bicubic_predict, 2, workers=3)
    assert serial == threaded
    with pytest.raises(DataError):
        D.evaluate([], D.identity_predict, 2)
