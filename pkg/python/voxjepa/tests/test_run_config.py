import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from .mock_resources import *

import voxjepa as vj
from voxjepa.run_config import OUT_DIR_ENV, require_inputs


class TestRunConfig(unittest.TestCase):
    def test_defaults_and_validation(self):
        config = vj.load_run_config(None)
        self.assertEqual(config, vj.RunConfig())
        with self.assertRaises(vj.ConfigError):
            vj.RunConfig(seed=-1)
        with self.assertRaises(vj.ConfigError):
            vj.RunConfig(threads=0)
        with self.assertRaises(vj.ConfigError):
            PathsConfig(shards="")

    def test_seeded_derives_module_seeds(self):
        a = vj.RunConfig(seed=7, threads=3).seeded()
        b = vj.RunConfig(seed=7, threads=3).seeded()
        self.assertEqual(a, b)
        seeds = {a.phantom.seed, a.train.seed, a.probe.seed, a.eval.seed, a.latentlab.seed}
        self.assertEqual(len(seeds), 5)
        self.assertTrue(all(0 <= s <= 0xFFFFFFFF for s in seeds))
        self.assertEqual(a.train.threads, 3)
        self.assertEqual(a.eval.threads, 3)
        c = vj.RunConfig(seed=8).seeded()
        self.assertNotEqual(a.train.seed, c.train.seed)

    def test_override_precedence(self):
        config = vj.RunConfig(paths=PathsConfig(out_dir="from_file"))
        with mock.patch.dict(os.environ, {}, clear=False):
            os.environ.pop(OUT_DIR_ENV, None)
            self.assertEqual(config.with_overrides().paths.out_dir, "from_file")
        with mock.patch.dict(os.environ, {OUT_DIR_ENV: "from_env"}):
            self.assertEqual(config.with_overrides().paths.out_dir, "from_env")
            over = config.with_overrides(seed=3, threads=2, out_dir="from_flag")
        self.assertEqual(over.paths.out_dir, "from_flag")
        self.assertEqual((over.seed, over.threads), (3, 2))

    def test_hash_ignores_out_dir(self):
        a = vj.RunConfig(paths=PathsConfig(out_dir="a"))
        b = vj.RunConfig(paths=PathsConfig(out_dir="b"))
        self.assertEqual(a.hash(), b.hash())
        self.assertNotEqual(a.hash(), vj.RunConfig(seed=1).hash())
        self.assertNotEqual(a.hash(), vj.RunConfig(paths=PathsConfig(shards="elsewhere")).hash())

    def test_paths_resolve(self):
        paths = PathsConfig(out_dir="runs/x", probe="/abs/probe")
        self.assertEqual(paths.resolve("shards"), Path("runs/x/shards"))
        self.assertEqual(paths.resolve("probe"), Path("/abs/probe"))
        self.assertEqual(paths.resolve("out_dir"), Path("runs/x"))
        self.assertEqual(paths.report_dir("match"), Path("runs/x/reports/match"))
        with self.assertRaises(vj.ConfigError):
            paths.resolve("weights")

    def test_yaml_file(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "run.yaml"
            path.write_text("seed: 5\nthreads: 2\ntrain:\n  steps: 3\n")
            config = vj.load_run_config(path)
        self.assertEqual(config.seed, 5)
        self.assertEqual(config.train.steps, 3)
        self.assertEqual(config.probe, vj.RunConfig().probe)

    def test_bundled_configs_load(self):
        configs = vj.resources_root() / "configs"
        paths = sorted(configs.iterdir())
        self.assertTrue(len(paths) > 0)
        for path in paths:
            vj.load_run_config(path)

    def test_require_inputs(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            present = Path(tmpdir) / "here.json"
            present.write_text("{}")
            require_inputs({"here": present})
            with self.assertRaises(vj.DataError) as ctx:
                require_inputs({"here": present, "gone": Path(tmpdir) / "gone.bin"})
        self.assertIn("gone", str(ctx.exception))
        self.assertNotIn("here", str(ctx.exception).replace(tmpdir, ""))


if __name__ == "__main__":
    unittest.main()
