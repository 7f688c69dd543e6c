import tempfile
import time
import unittest
from pathlib import Path

from .mock_resources import *

import voxjepa as vj
from voxjepa.serde import data_formats


class TestSerde(unittest.TestCase):
    def test_file_round_trip_all_formats(self):
        config = mock_run_config(Path("runs/serde"))
        with tempfile.TemporaryDirectory() as tmpdir:
            for suffix in (".json", ".yaml", ".msgpack"):
                path = Path(tmpdir) / f"run{suffix}"
                t0 = time.perf_counter_ns()
                config.to_file(path)
                loaded = vj.RunConfig.from_file(path)
                t1 = time.perf_counter_ns()
                print(f"\nElapsed time for {suffix}: {t1 - t0:.3e} ns")
                self.assertEqual(loaded.to_pydict(), config.to_pydict())
                self.assertEqual(loaded.hash(), config.hash())

    def test_to_str_formats(self):
        spec = mock_phantom_spec(lesions=[mock_lesion()])
        for fmt in data_formats:
            self.assertTrue(len(spec.to_str(fmt)) > 0)
        self.assertEqual(vj.PhantomSpec.from_json(spec.to_json()), spec)
        self.assertEqual(vj.PhantomSpec.from_yaml(spec.to_yaml()), spec)
        self.assertEqual(vj.PhantomSpec.from_msg_pack(spec.to_msg_pack()), spec)

    def test_enums_serialize_by_name(self):
        spec = mock_phantom_spec(lesions=[mock_lesion()], modality=vj.Modality.SYNTH_MR)
        pydict = spec.to_pydict()
        self.assertEqual(pydict["pseudo_modality"], "SYNTH_MR")
        self.assertEqual(pydict["lesion_config"][0]["kind"], "HYPER")

    def test_unknown_field_names_dotted_path(self):
        pydict = vj.RunConfig().to_pydict()
        pydict["train"]["encoder"]["embed_dims"] = 64
        with self.assertRaises(vj.ConfigError) as ctx:
            vj.RunConfig.from_pydict(pydict)
        self.assertIn("train.encoder.embed_dims", str(ctx.exception))

    def test_invalid_value_is_config_error(self):
        pydict = vj.RunConfig().to_pydict()
        pydict["train"]["encoder"]["heads"] = 5
        with self.assertRaises(vj.ConfigError):
            vj.RunConfig.from_pydict(pydict)

    def test_missing_file_and_bad_suffix(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(vj.ConfigError):
                vj.RunConfig.from_file(Path(tmpdir) / "absent.json")
            bad = Path(tmpdir) / "run.toml"
            bad.write_text("seed = 1\n")
            with self.assertRaises(vj.ConfigError):
                vj.RunConfig.from_file(bad)

    def test_malformed_json(self):
        with self.assertRaises(vj.ConfigError):
            vj.RunConfig.from_json("{not json")


if __name__ == "__main__":
    unittest.main()
