import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import polars as pl

from .mock_resources import *

import voxjepa as vj
from voxjepa import defaults
from voxjepa.phantom import (
    LesionKind,
    Side,
    Tissue,
    assign_splits,
    inject_lesions,
    lesion_contrast,
    load_masks,
    render_modality,
    sample_study_specs,
    split_counts,
    tissue_geometry,
)
from voxjepa.preprocess import foreground_mask, preprocess_volume


class TestGenerateHead(unittest.TestCase):
    def test_deterministic_by_seed(self):
        spec = mock_phantom_spec(seed=11)
        v1, t1 = vj.generate_head(spec)
        v2, t2 = vj.generate_head(spec)
        self.assertTrue(np.array_equal(v1.voxels, v2.voxels))
        self.assertTrue(np.array_equal(t1, t2))
        v3, _ = vj.generate_head(mock_phantom_spec(seed=12))
        self.assertFalse(np.array_equal(v1.voxels, v3.voxels))

    def test_zero_noise_is_piecewise_constant(self):
        vol, tissue = vj.generate_head(mock_phantom_spec(noise_std=0.0))
        for t in Tissue:
            values = np.unique(vol.voxels[tissue == t])
            self.assertEqual(len(values), 1)
            self.assertAlmostEqual(float(values[0]), defaults.TISSUE_INTENSITY[t.name], places=6)

    def test_background_fraction_matches_ellipsoid_volume(self):
        spec = vj.PhantomSpec(seed=0, grid_shape=(64, 64, 64), spacing_mm=(1.0, 1.0, 1.0))
        tissue = tissue_geometry(spec)
        semi = defaults.HEAD_SEMI_AXIS_FRAC * 32.0
        expected = 1.0 - (4.0 / 3.0) * np.pi * semi**3 / 64**3
        observed = float((tissue == Tissue.BG).mean())
        self.assertLess(abs(observed - expected) / expected, 0.02)

    def test_shells_are_nested(self):
        tissue = tissue_geometry(mock_phantom_spec())
        for t in Tissue:
            self.assertTrue((tissue == t).any())
        # the outermost voxels of the grid are air
        self.assertTrue((tissue[0] == Tissue.BG).all())
        self.assertTrue((tissue[:, :, 0] == Tissue.BG).all())

    def test_grid_too_small(self):
        with self.assertRaises(ValueError):
            vj.generate_head(vj.PhantomSpec(seed=0, grid_shape=(8, 32, 32)))

    def test_variants(self):
        base = tissue_geometry(mock_phantom_spec())
        big = tissue_geometry(mock_phantom_spec(ventriculomegaly=True))
        self.assertGreater((big == Tissue.VENTRICLE).sum(), (base == Tissue.VENTRICLE).sum())
        defect = tissue_geometry(mock_phantom_spec(skull_defect=True))
        self.assertLess((defect == Tissue.SKULL).sum(), (base == Tissue.SKULL).sum())


class TestInjectLesions(unittest.TestCase):
    def test_empty_lesion_list(self):
        spec = mock_phantom_spec()
        vol, tissue = vj.generate_head(spec)
        out = inject_lesions(vol, tissue, [], seed=0, spec=spec)
        self.assertIsInstance(out, vj.SyntheticStudy)
        self.assertTrue(np.array_equal(out.generic.voxels, vol.voxels))
        self.assertEqual(out.lesion_masks, {})
        self.assertIsNone(out.laterality)
        self.assertEqual(int(out.labels.sum()), 0)
        study = vj.synthesize_study(spec)
        self.assertEqual(int(study.labels.sum()), 0)

    def test_returns_unrendered_study(self):
        spec = mock_phantom_spec(seed=2, lesions=[mock_lesion(Side.RIGHT)])
        vol, tissue = vj.generate_head(spec)
        out = inject_lesions(vol, tissue, spec.lesion_config, seed=9)
        self.assertEqual(len(out.volumes), 1)
        self.assertIsNone(out.volumes[0].modality)
        self.assertEqual(out.spec.grid_shape, vol.shape)
        self.assertEqual(out.laterality, Side.RIGHT)
        labels = out.label_dict()
        self.assertEqual(labels["hyper_right"], 1)
        self.assertEqual(labels["any_lesion"], 1)
        self.assertTrue(np.array_equal(out.tissue_mask, tissue))

    def test_contrast_scales_with_noise(self):
        self.assertAlmostEqual(lesion_contrast(0.0), defaults.LESION_CONTRAST)
        self.assertAlmostEqual(lesion_contrast(defaults.NOISE_STD), defaults.LESION_CONTRAST)
        self.assertAlmostEqual(lesion_contrast(0.1), defaults.LESION_CONTRAST_SNR * 0.1)
        lesions = [mock_lesion(Side.LEFT)]
        loud = mock_phantom_spec(seed=6, lesions=lesions, noise_std=0.1)
        study = vj.synthesize_study(loud)
        mask = study.lesion_masks["hyper_left"]
        diff = study.generic.voxels - vj.generate_head(loud)[0].voxels
        self.assertTrue(np.allclose(diff[mask], defaults.LESION_CONTRAST_SNR * 0.1, atol=1e-5))

    def test_left_lesion_stays_left(self):
        spec = vj.PhantomSpec(
            seed=3,
            grid_shape=(32, 64, 64),
            spacing_mm=(1.0, 1.0, 1.0),
            lesion_config=[mock_lesion(Side.LEFT, radius_vox=4.0)],
        )
        study = vj.synthesize_study(spec)
        mask = study.lesion_masks["hyper_left"]
        self.assertTrue(mask.any())
        xs = np.nonzero(mask)[2]
        self.assertTrue((xs < (64 - 1) / 2.0).all())
        self.assertEqual(study.laterality, Side.LEFT)
        labels = study.label_dict()
        self.assertEqual(labels["hyper_left"], 1)
        self.assertEqual(labels["any_lesion"], 1)
        self.assertEqual(labels["hyper_right"], 0)
        # lesions never leave the parenchyma
        self.assertTrue((study.tissue_mask[mask] == Tissue.BRAIN).all())

    def test_two_disjoint_lesions_match_sphere_volume(self):
        spec = vj.PhantomSpec(
            seed=5,
            grid_shape=(32, 64, 64),
            spacing_mm=(1.0, 1.0, 1.0),
            lesion_config=[
                mock_lesion(Side.LEFT, LesionKind.HYPER, 4.0, label_id=0),
                mock_lesion(Side.RIGHT, LesionKind.HYPO, 4.0, label_id=1),
            ],
        )
        study = vj.synthesize_study(spec)
        left = study.lesion_masks["hyper_left"]
        right = study.lesion_masks["hypo_right"]
        self.assertFalse((left & right).any())
        sphere = 4.0 / 3.0 * np.pi * 4.0**3
        for mask in (left, right):
            self.assertLess(abs(mask.sum() - sphere) / sphere, 0.10)
        self.assertIsNone(study.laterality)
        diff = study.generic.voxels - vj.generate_head(spec)[0].voxels
        self.assertTrue(np.allclose(diff[left], defaults.LESION_CONTRAST, atol=1e-5))
        self.assertTrue(np.allclose(diff[right], -defaults.LESION_CONTRAST, atol=1e-5))

    def test_unplaceable_lesion(self):
        spec = mock_phantom_spec(lesions=[mock_lesion(radius_vox=20.0)])
        with self.assertRaises(vj.PlacementError):
            vj.synthesize_study(spec)

    def test_midline_lesion(self):
        spec = mock_phantom_spec(lesions=[mock_lesion(Side.MIDLINE)])
        study = vj.synthesize_study(spec)
        self.assertEqual(study.label_dict()["midline_lesion"], 1)
        self.assertIsNone(study.laterality)


class TestRenderModality(unittest.TestCase):
    def test_ct_air(self):
        spec = mock_phantom_spec()
        generic, tissue = vj.generate_head(spec)
        ct = render_modality(generic, vj.Modality.SYNTH_CT)
        self.assertTrue((ct.voxels[tissue == Tissue.BG] <= -900).all())
        with self.assertRaises(ValueError):
            render_modality(ct, vj.Modality.SYNTH_MR)

    def test_mr_preserves_tissue_rank(self):
        generic, tissue = vj.generate_head(mock_phantom_spec(noise_std=0.0))
        mr = render_modality(generic, vj.Modality.SYNTH_MR)
        order = sorted(Tissue, key=lambda t: defaults.TISSUE_INTENSITY[t.name])
        means = [float(mr.voxels[tissue == t].mean()) for t in order]
        self.assertEqual(means, sorted(means))

    def test_renderings_share_foreground(self):
        spec = mock_phantom_spec(seed=4, noise_std=0.0)
        study = vj.synthesize_study(spec, modalities=[vj.Modality.SYNTH_MR, vj.Modality.SYNTH_CT])
        mr_fg = preprocess_volume(study.volumes[0])[0].foreground
        ct_fg = preprocess_volume(study.volumes[1])[0].foreground
        self.assertTrue(np.array_equal(mr_fg, ct_fg))
        self.assertTrue(np.array_equal(ct_fg, study.tissue_mask != Tissue.BG))
        self.assertTrue(np.array_equal(foreground_mask(study.volumes[1]), ct_fg))

    def test_flip_study_swaps_sides(self):
        spec = mock_phantom_spec(seed=2, lesions=[mock_lesion(Side.LEFT)])
        study = vj.synthesize_study(spec)
        flipped = vj.flip_study(study)
        self.assertEqual(flipped.label_dict()["hyper_right"], 1)
        self.assertEqual(flipped.label_dict()["hyper_left"], 0)
        self.assertEqual(flipped.laterality, Side.RIGHT)
        self.assertTrue(
            np.array_equal(flipped.lesion_masks["hyper_right"], study.lesion_masks["hyper_left"][:, :, ::-1])
        )
        twice = vj.flip_study(flipped)
        self.assertTrue(np.array_equal(twice.volumes[0].voxels, study.volumes[0].voxels))
        self.assertTrue(np.array_equal(twice.labels, study.labels))


class TestCorpus(unittest.TestCase):
    def test_split_counts(self):
        self.assertEqual(split_counts(10, (0.8, 0.1, 0.1)), (8, 1, 1))
        splits = assign_splits(10, (0.8, 0.1, 0.1), seed=1)
        self.assertEqual([splits.count(s) for s in ("train", "val", "test")], [8, 1, 1])
        self.assertEqual(splits, assign_splits(10, (0.8, 0.1, 0.1), seed=1))

    def test_build_corpus(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            out = Path(tmpdir)
            records = vj.build_corpus(10, mock_corpus_config(10), out)
            self.assertEqual([sum(r.split == s for r in records) for s in ("train", "val", "test")], [8, 1, 1])
            self.assertEqual(len({r.study_id for r in records}), 10)
            loaded = vj.load_corpus(out)
            self.assertEqual([r.to_pydict() for r in loaded], [r.to_pydict() for r in records])
            prevalence = pl.read_csv(out / "prevalence.csv")
            self.assertEqual(prevalence.height, 4 * len(defaults.LABEL_VOCAB))
            rec = records[0]
            vol = vj.read_volume(out / rec.volume_paths[0])
            self.assertEqual(vol.shape, SMALL_GRID)
            self.assertEqual(vol.modality.name, rec.modality)
            masks = load_masks(out, rec)
            self.assertIn("tissue", masks)
            for name, value in rec.labels.items():
                if value and name in masks:
                    self.assertTrue(masks[name].any())

    def test_build_corpus_is_deterministic(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            a, b = Path(tmpdir) / "a", Path(tmpdir) / "b"
            vj.build_corpus(4, mock_corpus_config(4, seed=9), a, threads=2)
            vj.build_corpus(4, mock_corpus_config(4, seed=9), b, threads=1)
            self.assertEqual((a / "corpus.json").read_bytes(), (b / "corpus.json").read_bytes())
            for f in sorted((a / "volumes").iterdir()):
                self.assertEqual(f.read_bytes(), (b / "volumes" / f.name).read_bytes())

    def test_zero_probability_label(self):
        probs = {"hyper_left": 0.0, "hyper_right": 0.5, "ventriculomegaly": 0.5}
        specs = sample_study_specs(mock_corpus_config(50, label_probs=probs))
        self.assertEqual(sum(s.labels()["hyper_left"] for s in specs), 0)
        self.assertEqual(sum(s.labels()["skull_defect"] for s in specs), 0)

    def test_prevalence_within_binomial_interval(self):
        n = 1000
        specs = sample_study_specs(mock_corpus_config(n, label_probs={"ventriculomegaly": 0.3}))
        k = sum(s.labels()["ventriculomegaly"] for s in specs)
        sigma = np.sqrt(n * 0.3 * 0.7)
        self.assertLess(abs(k - 0.3 * n), 2.576 * sigma)

    def test_config_validation(self):
        with self.assertRaises(vj.ConfigError):
            vj.CorpusConfig(label_probs={"any_lesion": 0.5})
        with self.assertRaises(vj.ConfigError):
            vj.CorpusConfig(modality_probs={"SYNTH_CT": 0.4})
        with self.assertRaises(vj.ConfigError):
            vj.CorpusConfig(split_fractions=(0.5, 0.1, 0.1))
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(vj.ConfigError):
                vj.build_corpus(0, mock_corpus_config(), tmpdir)

    def test_bad_manifest(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "corpus.json"
            path.write_text("{broken")
            with self.assertRaises(vj.ManifestError):
                vj.load_corpus(path)
            path.write_text(json.dumps([{"study_id": "x", "extra": 1}]))
            with self.assertRaises(vj.ManifestError):
                vj.load_corpus(path)


if __name__ == "__main__":
    unittest.main()
