import tempfile
import unittest
from pathlib import Path

import numpy as np

from .mock_resources import *

import voxjepa as vj
from voxjepa.volume import VOLUME_HEADER


class TestVolume(unittest.TestCase):
    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(0)
        vol = vj.RawVolume(
            rng.normal(size=(3, 5, 7)).astype(np.float32),
            spacing_mm=(4.0, 0.5, 0.5),
            modality=vj.Modality.SYNTH_MR,
            acquisition_axis=2,
        )
        with tempfile.TemporaryDirectory() as tmpdir:
            path = vj.write_volume(Path(tmpdir) / "vol.vpha", vol)
            self.assertEqual(path.stat().st_size, VOLUME_HEADER.size + 4 * 3 * 5 * 7)
            back = vj.read_volume(path)
        self.assertTrue(np.array_equal(back.voxels, vol.voxels))
        self.assertEqual(back.spacing_mm, vol.spacing_mm)
        self.assertEqual(back.modality, vj.Modality.SYNTH_MR)
        self.assertEqual(back.acquisition_axis, 2)

    def test_generic_modality_round_trips_as_none(self):
        vol = vj.RawVolume(np.zeros((2, 2, 2)), spacing_mm=(1.0, 1.0, 1.0))
        with tempfile.TemporaryDirectory() as tmpdir:
            back = vj.read_volume(vj.write_volume(Path(tmpdir) / "g.vpha", vol))
        self.assertIsNone(back.modality)

    def test_corruption_detected(self):
        vol = vj.RawVolume(np.ones((2, 3, 4)), spacing_mm=(1.0, 1.0, 1.0))
        with tempfile.TemporaryDirectory() as tmpdir:
            path = vj.write_volume(Path(tmpdir) / "v.vpha", vol)
            data = path.read_bytes()

            path.write_bytes(data[:-4])
            with self.assertRaises(vj.CorruptionError):
                vj.read_volume(path)

            path.write_bytes(data[:10])
            with self.assertRaises(vj.CorruptionError):
                vj.read_volume(path)

            path.write_bytes(b"XXXX" + data[4:])
            with self.assertRaises(vj.CorruptionError):
                vj.read_volume(path)

            path.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
            with self.assertRaises(vj.CorruptionError):
                vj.read_volume(path)

    def test_missing_file_is_data_error(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(vj.DataError):
                vj.read_volume(Path(tmpdir) / "absent.vpha")

    def test_validation(self):
        with self.assertRaises(ValueError):
            vj.RawVolume(np.zeros((2, 2)), spacing_mm=(1.0, 1.0, 1.0))
        with self.assertRaises(ValueError):
            vj.RawVolume(np.full((2, 2, 2), np.nan), spacing_mm=(1.0, 1.0, 1.0))
        with self.assertRaises(ValueError):
            vj.RawVolume(np.zeros((2, 2, 2)), spacing_mm=(1.0, 0.0, 1.0))
        with self.assertRaises(ValueError):
            vj.RawVolume(np.zeros((2, 2, 2)), spacing_mm=(1.0, 1.0, 1.0), acquisition_axis=3)

    def test_replace_voxels_keeps_metadata(self):
        vol = vj.RawVolume(np.zeros((2, 2, 2)), (2.0, 1.0, 1.0), vj.Modality.SYNTH_CT, 1)
        new = vol.replace_voxels(np.ones((2, 2, 2)))
        self.assertEqual(new.modality, vj.Modality.SYNTH_CT)
        self.assertEqual(new.acquisition_axis, 1)
        self.assertIsNone(vol.replace_voxels(vol.voxels, modality=None).modality)


if __name__ == "__main__":
    unittest.main()
