import tempfile
import unittest
from pathlib import Path

import numpy as np

from .mock_resources import *

import voxjepa as vj
from voxjepa.latentlab import (
    PatchDatabank,
    WindowEmbedding,
    assign_clusters,
    build_databank,
    cluster_volume,
    export_reconstruction,
    fit_kmeans,
    kmeans_cluster,
    knn_reconstruct,
    knn_search,
    match_volumes,
    patch_match,
    patch_regions,
    place_patches,
    reconstruct_masked,
    reconstruction_error,
    retrieve_patches,
    sliding_window_embeddings,
    summarize_matches,
    unit_rows,
    window_offsets,
)
from voxjepa.model import build_model
from voxjepa.preprocess import normalize
from voxjepa.probe import BagVolume


def phantom_bag_volume(seed=0):
    study = vj.synthesize_study(mock_phantom_spec(seed=seed))
    pv = vj.preprocess_volume(study.volumes[0])[0]
    return BagVolume(f"seed_{seed}_0", pv.window.name, normalize(pv, 0.3), pv.foreground), study


def tiny_bank(keys, values=None):
    keys = np.asarray(keys, dtype=np.float64)
    n = len(keys)
    values = np.arange(n, dtype=np.float64).reshape(n, 1, 1, 1) if values is None else values
    return PatchDatabank(
        keys=unit_rows(keys),
        values=values,
        volume_ids=np.array(["v"] * n),
        coords=np.zeros((n, 3), dtype=np.int64),
        patch_shape=(1, 1, 1),
    )


class TestKnn(unittest.TestCase):
    def test_unit_rows(self):
        out = unit_rows([[3.0, 4.0], [0.0, 0.0]])
        self.assertTrue(np.allclose(out, [[0.6, 0.8], [0.0, 0.0]]))

    def test_search_order_and_ties(self):
        bank = tiny_bank([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 1.0]])
        idx, sims = knn_search([[5.0, 0.0]], bank, 3)
        # entries 0 and 2 tie at similarity 1; the lower index ranks first
        self.assertEqual(idx.tolist(), [[0, 2, 3]])
        self.assertTrue(np.allclose(sims, [[1.0, 1.0, np.sqrt(0.5)]]))
        self.assertTrue(np.allclose(retrieve_patches([[5.0, 0.0]], bank, 2).ravel(), [1.0]))

    def test_search_errors(self):
        bank = tiny_bank([[1.0, 0.0], [0.0, 1.0]])
        with self.assertLogs("voxjepa.latentlab", level="WARNING"):
            idx, _ = knn_search([[1.0, 0.0]], bank, 5)
        self.assertEqual(idx.shape, (1, 2))
        with self.assertRaises(vj.ShapeError):
            knn_search([[1.0, 0.0, 0.0]], bank, 1)
        with self.assertRaises(ValueError):
            knn_search([[1.0, 0.0]], bank, 0)

    def test_place_patches_clips_border(self):
        out = place_patches(np.zeros((1, 3, 3)), [[0, 1, 1]], np.ones((1, 1, 2, 2)), (1, 2, 2))
        self.assertEqual(out.shape, (1, 3, 3))
        self.assertEqual(float(out.sum()), 1.0)
        self.assertEqual(out[0, 2, 2], 1.0)


class TestReconstruction(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = build_model(mock_encoder_config(), mock_predictor_config(), seed=0)
        cls.volume, cls.study = phantom_bag_volume(0)
        cls.bank = build_databank(cls.model.teacher, [cls.volume])

    def test_databank_self_retrieval(self):
        grid = vj.patchify(self.volume.normalized, self.volume.foreground, (4, 16, 16))
        self.assertEqual(len(self.bank), grid.n_tokens)
        self.assertTrue(np.allclose(np.linalg.norm(self.bank.keys, axis=1), 1.0))
        patches = retrieve_patches(self.bank.keys, self.bank, 1)
        self.assertTrue(np.allclose(patches, self.bank.values))
        with self.assertRaises(vj.DataError):
            build_databank(self.model.teacher, [])

    def test_knn_reconstruct_touches_only_targets(self):
        grid = vj.patchify(self.volume.normalized, self.volume.foreground, (4, 16, 16))
        targets = grid.coords[:2]
        recon = knn_reconstruct(self.model, self.volume.normalized, self.volume.foreground, targets, self.bank, k=2)
        mask = recon.target_mask((4, 16, 16))
        self.assertEqual(int(mask.sum()), 2 * 4 * 16 * 16)
        self.assertTrue(np.array_equal(recon.volume[~mask], self.volume.normalized[~mask]))
        self.assertEqual(recon.neighbors.shape, (2, 2))
        self.assertTrue(np.isfinite(reconstruction_error(recon, self.volume.normalized, (4, 16, 16))))
        none = knn_reconstruct(self.model, self.volume.normalized, self.volume.foreground, np.zeros((0, 3)), self.bank)
        self.assertTrue(np.array_equal(none.volume, self.volume.normalized))
        with self.assertRaises(vj.EmptyVolumeError):
            knn_reconstruct(self.model, self.volume.normalized, self.volume.foreground, grid.coords, self.bank)

    def test_reconstruct_masked(self):
        recon = reconstruct_masked(self.model, self.volume, self.bank, vj.Modality.SYNTH_CT, seed=1)
        self.assertGreater(len(recon.target_coords), 0)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = export_reconstruction(Path(tmpdir) / "recon.vol", recon, SMALL_SPACING)
            back = vj.read_volume(path)
        self.assertIsNone(back.modality)
        self.assertTrue(np.allclose(back.voxels, recon.volume, atol=1e-6))


class TestPatchMatch(unittest.TestCase):
    def test_tie_break(self):
        cands = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        coords = np.array([[1, 0, 0], [0, 0, 0], [0, 5, 5]])
        m = patch_match([2.0, 0.0], cands, coords)
        self.assertEqual(m.coord, (0, 5, 5))
        self.assertEqual(m.index, 2)
        self.assertAlmostEqual(m.similarity, 1.0)
        with self.assertRaises(ValueError):
            patch_match([1.0, 0.0], np.zeros((0, 2)), np.zeros((0, 3)))

    def test_patch_regions(self):
        tissue = np.zeros((1, 2, 4), dtype=np.int64)
        tissue[0, :, 2:] = 3
        tissue[0, 0, 0] = 2
        regions = patch_regions(tissue, [[0, 0, 0], [0, 0, 1]], (1, 2, 2))
        self.assertEqual(regions.tolist(), [0, 3])

    def test_self_match_is_exact(self):
        encoder = build_model(mock_encoder_config(), mock_predictor_config(), seed=1).teacher
        volume, study = phantom_bag_volume(2)
        frame = match_volumes(encoder, volume, volume, study.tissue_mask, max_queries=3, seed=0)
        self.assertEqual(frame.height, 3)
        summary = summarize_matches(frame)
        self.assertEqual(summary.exact_rate, 1.0)
        self.assertEqual(summary.same_region_rate, 1.0)
        self.assertAlmostEqual(summary.chance_exact, 1.0 / frame["n_candidates"][0])
        self.assertLessEqual(summary.chance_same_region, 1.0)
        with self.assertRaises(ValueError):
            summarize_matches(frame.head(0))


class TestClustering(unittest.TestCase):
    def test_window_offsets(self):
        self.assertEqual(window_offsets((4, 16, 16))[0], (0, 0, 0))
        self.assertEqual(len(window_offsets((4, 16, 16))), 8)
        self.assertEqual(window_offsets((1, 2, 2)), [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)])

    def test_fit_kmeans_blobs(self):
        rng = np.random.default_rng(0)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        x = np.concatenate([c + rng.normal(0, 0.1, size=(20, 2)) for c in centers])
        fit = fit_kmeans(x, 3, seed=0)
        for b in range(3):
            self.assertEqual(len(set(fit.labels[20 * b : 20 * (b + 1)].tolist())), 1)
        self.assertEqual(len(set(fit.labels.tolist())), 3)
        self.assertTrue(all(a >= b - 1e-9 for a, b in zip(fit.objective, fit.objective[1:])))
        with self.assertRaises(ValueError):
            fit_kmeans(np.ones((5, 2)), 2)

    def test_assign_ties_to_lower_id(self):
        labels, d2 = assign_clusters([[0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
        self.assertEqual(labels.tolist(), [0])
        self.assertAlmostEqual(float(d2[0]), 1.0)

    def test_kmeans_cluster_selects_reference(self):
        coords = np.array([[0, y, x] for y in range(2) for x in range(4)])
        latents = np.where(coords[:, 2:3] < 2, 0.0, 5.0) + np.zeros((8, 2))
        latents[:, 1] += 0.01 * np.arange(8)
        window = WindowEmbedding((0, 0, 0), coords, latents, (1, 1, 1))
        reference = np.zeros((1, 2, 4), dtype=bool)
        reference[0, :, 2:] = True
        fg = np.ones((1, 2, 4), dtype=bool)
        fg[0, 0, 0] = False
        cmap = kmeans_cluster([window], (1, 2, 4), reference, fg, k=2, seed=0)
        self.assertEqual(cmap.labels[0, 0, 0], -1)
        self.assertEqual(cmap.iou[cmap.selected], 1.0)
        self.assertTrue((cmap.labels[reference] == cmap.selected).all())

    def test_cluster_volume(self):
        encoder = build_model(mock_encoder_config(), mock_predictor_config(), seed=2).teacher
        volume, study = phantom_bag_volume(3)
        windows = sliding_window_embeddings(encoder, volume.normalized, volume.foreground)
        self.assertEqual(windows[0].offset, (0, 0, 0))
        cmap = cluster_volume(encoder, volume, study.tissue_mask > 0, k=2, seed=0)
        self.assertEqual(cmap.labels.shape, volume.normalized.shape)
        self.assertTrue((cmap.labels[~volume.foreground] == -1).all())
        self.assertTrue(set(np.unique(cmap.labels[volume.foreground]).tolist()) <= {0, 1})


if __name__ == "__main__":
    unittest.main()
