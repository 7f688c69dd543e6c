import tempfile
import unittest
from fractions import Fraction
from pathlib import Path

import numpy as np

from .mock_resources import *

import voxjepa as vj
from voxjepa.preprocess import (
    WindowSpec,
    clip_percentile,
    compute_window_means,
    ct_window_spec,
    dequantize,
    foreground_mask,
    histogram_bins,
    load_preproc,
    normalize,
    otsu_threshold,
    quantize,
    resample,
    save_preproc,
    window_quantize,
)


def brute_force_otsu(values, n_bins=256):
    """Exhaustive search of the class-weight/class-mean form of the between-class variance."""
    bins = histogram_bins(values, n_bins).ravel()
    counts = np.bincount(bins, minlength=n_bins)
    n = int(counts.sum())
    best_t, best = None, Fraction(0)
    for t in range(1, n_bins):
        n0 = int(counts[:t].sum())
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(int((np.arange(t) * counts[:t]).sum()), n0)
        mu1 = Fraction(int((np.arange(t, n_bins) * counts[t:]).sum()), n1)
        score = Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2
        if score > best:
            best_t, best = t, score
    return best_t


class TestResample(unittest.TestCase):
    def test_identity_at_target_spacing(self):
        vol = vj.RawVolume(mock_ramp_volume(), SMALL_SPACING, vj.Modality.SYNTH_CT)
        out = resample(vol)
        self.assertTrue(np.array_equal(out.voxels, vol.voxels))
        self.assertIsNot(out.voxels, vol.voxels)

    def test_constant_stays_constant(self):
        vol = vj.RawVolume(np.full((5, 6, 7), 3.25), (2.0, 0.7, 1.3), vj.Modality.SYNTH_MR)
        out = resample(vol)
        self.assertEqual(out.spacing_mm, (4.0, 1.0, 1.0))
        self.assertEqual(out.shape, (3, 4, 9))
        self.assertTrue(np.allclose(out.voxels, 3.25))

    def test_linear_ramp_halved_spacing(self):
        n = 11
        ramp = np.broadcast_to(np.arange(n) / (n - 1), (2, 3, n))
        vol = vj.RawVolume(ramp, (1.0, 1.0, 1.0), vj.Modality.SYNTH_MR)
        out = resample(vol, (1.0, 1.0, 0.5))
        self.assertEqual(out.shape, (2, 3, 2 * n))
        o = np.arange(2 * (n - 1) + 1)
        expected = o * 0.5 / (n - 1)
        self.assertTrue(np.allclose(out.voxels[:, :, : len(o)], expected, atol=1e-6, rtol=0.0))
        # past the last input voxel, samples clamp to the edge
        self.assertAlmostEqual(float(out.voxels[0, 0, -1]), 1.0, places=6)


class TestClipAndQuantize(unittest.TestCase):
    def test_clip_order_statistics(self):
        values = np.arange(1000, dtype=np.float64).reshape(10, 10, 10)
        vol = vj.RawVolume(values, (1.0, 1.0, 1.0), vj.Modality.SYNTH_MR)
        out = clip_percentile(vol, 0.5, 99.5)
        self.assertAlmostEqual(float(out.voxels.min()), 4.995, places=3)
        self.assertAlmostEqual(float(out.voxels.max()), float(np.percentile(values, 99.5)), places=3)
        const = vj.RawVolume(np.full((2, 2, 2), 7.0), (1.0, 1.0, 1.0), vj.Modality.SYNTH_MR)
        self.assertTrue(np.array_equal(clip_percentile(const).voxels, const.voxels))

    def test_window_examples(self):
        brain = ct_window_spec(vj.Window.CT_BRAIN)
        self.assertEqual(int(quantize([0.0], brain)[0]), 0)
        self.assertEqual(int(quantize([80.0], brain)[0]), 255)
        self.assertEqual(int(quantize([40.0], brain)[0]), 128)
        blood = ct_window_spec(vj.Window.CT_BLOOD)
        self.assertEqual(blood.bit_width, 4)
        self.assertEqual(int(quantize([180.0], blood)[0]), 15)
        self.assertEqual(int(quantize([-2000.0, 5000.0], blood).tolist()[1]), 15)

    def test_round_trip_error_within_half_step(self):
        rng = np.random.default_rng(0)
        for bits in (4, 8):
            w = WindowSpec(width=2.0, level=0.0, bit_width=bits)
            values = rng.uniform(-1.0, 1.0, size=1_000_000)
            codes = quantize(values, w)
            self.assertLess(int(codes.max()), 2**bits)
            back = codes.astype(np.float64) / w.max_code
            t = (values + 1.0) / 2.0
            self.assertLessEqual(float(np.abs(back - t).max()), 0.5 / w.max_code + 1e-12)

    def test_window_quantize_infers_tag(self):
        ct = vj.RawVolume(np.full((2, 2, 2), 40.0), (1.0, 1.0, 1.0), vj.Modality.SYNTH_CT)
        pv = window_quantize(ct, ct_window_spec(vj.Window.CT_BONE))
        self.assertEqual(pv.window, vj.Window.CT_BONE)
        with self.assertRaises(ValueError):
            window_quantize(ct, WindowSpec(width=10.0, level=0.0))

    def test_invalid_window(self):
        with self.assertRaises(ValueError):
            WindowSpec(width=0.0, level=0.0)
        with self.assertRaises(ValueError):
            WindowSpec(width=1.0, level=0.0, bit_width=6)


class TestForeground(unittest.TestCase):
    def test_otsu_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            k = rng.integers(1, 4)
            values = np.concatenate(
                [rng.normal(rng.uniform(0, 100), rng.uniform(1, 10), size=200) for _ in range(k)]
            )
            self.assertEqual(otsu_threshold(values), brute_force_otsu(values))

    def test_otsu_constant_is_none(self):
        self.assertIsNone(otsu_threshold(np.full(10, 3.0)))

    def test_bimodal_mr(self):
        values = np.zeros((4, 4, 4))
        values[2:] = 200.0
        vol = vj.RawVolume(values, (1.0, 1.0, 1.0), vj.Modality.SYNTH_MR)
        t = otsu_threshold(values)
        self.assertTrue(0 < t <= 255)
        self.assertTrue(np.array_equal(foreground_mask(vol), values == 200.0))

    def test_ct_air_threshold(self):
        values = np.full((4, 4, 4), -1000.0)
        values[1:3, 1:3, 1:3] = 40.0
        vol = vj.RawVolume(values, (1.0, 1.0, 1.0), vj.Modality.SYNTH_CT)
        self.assertTrue(np.array_equal(foreground_mask(vol), values == 40.0))

    def test_unrendered_rejected(self):
        vol = vj.RawVolume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0))
        with self.assertRaises(ValueError):
            foreground_mask(vol)
        with self.assertRaises(vj.DataError):
            vj.preprocess_volume(vol)


class TestNormalize(unittest.TestCase):
    def test_examples(self):
        codes = np.array([0, 7, 15], dtype=np.uint8).reshape(1, 1, 3)
        fg = np.array([True, True, True]).reshape(1, 1, 3)
        pv = vj.PreprocVolume(codes, vj.Window.CT_BLOOD, 4, fg, vj.Modality.SYNTH_CT)
        self.assertTrue(np.allclose(normalize(pv, 0.0), dequantize(pv)))
        self.assertAlmostEqual(float(normalize(pv, 0.5)[0, 0, 2]), 0.5, places=6)
        pv.foreground[0, 0, 1] = False
        self.assertAlmostEqual(float(normalize(pv, 0.25)[0, 0, 1]), -0.25, places=6)

    def test_window_means_two_pass(self):
        rng = np.random.default_rng(2)
        vols = []
        for _ in range(3):
            codes = rng.integers(0, 256, size=(2, 3, 4)).astype(np.uint8)
            fg = rng.random((2, 3, 4)) < 0.5
            fg[0, 0, 0] = True
            vols.append(vj.PreprocVolume(codes, vj.Window.MR, 8, fg, vj.Modality.SYNTH_MR))
        means = compute_window_means(vols)
        all_fg = np.concatenate([v.codes[v.foreground] / 255.0 for v in vols])
        self.assertAlmostEqual(means["MR"], float(all_fg.mean()), delta=1e-9)


class TestPreprocessVolume(unittest.TestCase):
    def test_ct_emits_every_window(self):
        study = vj.synthesize_study(mock_phantom_spec(seed=1))
        out = vj.preprocess_volume(study.volumes[0])
        self.assertEqual([pv.window for pv in out], [vj.Window.CT_BRAIN, vj.Window.CT_BLOOD, vj.Window.CT_BONE])
        self.assertEqual([pv.bit_width for pv in out], [8, 4, 4])
        for pv in out[1:]:
            self.assertTrue(np.array_equal(pv.foreground, out[0].foreground))

    def test_mr_emits_one_window(self):
        study = vj.synthesize_study(mock_phantom_spec(seed=1, modality=vj.Modality.SYNTH_MR))
        out = vj.preprocess_volume(study.volumes[0])
        self.assertEqual(len(out), 1)
        self.assertEqual(out[0].window, vj.Window.MR)
        self.assertEqual(out[0].bit_width, 8)

    def test_configured_windows(self):
        study = vj.synthesize_study(mock_phantom_spec(seed=1))
        config = vj.PreprocessConfig(ct_windows=["CT_BONE"])
        out = vj.preprocess_volume(study.volumes[0], config)
        self.assertEqual([pv.window for pv in out], [vj.Window.CT_BONE])
        with self.assertRaises(vj.ConfigError):
            vj.PreprocessConfig(ct_windows=["CT_LUNG"])
        with self.assertRaises(vj.ConfigError):
            vj.PreprocessConfig(clip_percentiles=(50.0, 10.0))

    def test_save_load(self):
        study = vj.synthesize_study(mock_phantom_spec(seed=1))
        pv = vj.preprocess_volume(study.volumes[0])[1]
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "v.npz"
            save_preproc(path, pv)
            back = load_preproc(path)
        self.assertTrue(np.array_equal(back.codes, pv.codes))
        self.assertTrue(np.array_equal(back.foreground, pv.foreground))
        self.assertEqual((back.window, back.bit_width, back.modality), (pv.window, pv.bit_width, pv.modality))
        self.assertEqual(back.dequant_scale, pv.dequant_scale)


if __name__ == "__main__":
    unittest.main()
