import json
import os
import importlib
import tempfile
import time
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import polars as pl

from .mock_resources import *

import voxjepa as vj
from voxjepa.autodiff import parameter
from voxjepa.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, MANIFEST_NAME, main
from voxjepa.evalstats import Verdict
from voxjepa.model.train import StepResult
from voxjepa.run_config import OUT_DIR_ENV

SMOKE_CONFIG = vj.resources_root() / "configs" / "smoke.json"


def run(*argv) -> int:
    t0 = time.perf_counter()
    code = main([str(a) for a in argv])
    print(f"\nElapsed time for `voxjepa {argv[0]}`: {time.perf_counter() - t0:.3g} s")
    return code


def read_manifest(stage_dir: Path) -> dict:
    return json.loads((Path(stage_dir) / MANIFEST_NAME).read_text())


class TestCliPipeline(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.out = Path(cls._tmp.name) / "run"
        cls.flags = ["--config", SMOKE_CONFIG, "--out", cls.out]
        for command in ("phantom-gen", "preprocess", "shard-pack"):
            assert run(command, *cls.flags) == EXIT_OK, command

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def test_full_pipeline(self):
        for command in (
            "pretrain",
            "probe-train",
            "evaluate",
            "recon",
            "match",
            "cluster",
            "mask-dump",
            "report",
        ):
            self.assertEqual(run(command, *self.flags), EXIT_OK, command)

        config = vj.RunConfig.from_file(SMOKE_CONFIG).with_overrides(out_dir=self.out).seeded()
        paths = config.paths
        manifest = read_manifest(paths.resolve("checkpoints"))
        self.assertEqual(manifest["subcommand"], "pretrain")
        self.assertEqual(manifest["config_hash"], config.hash())
        self.assertIn("checkpoint.bin", manifest["outputs"])
        self.assertEqual(read_manifest(paths.resolve("corpus"))["summary"]["n_studies"], 20)
        self.assertTrue((paths.report_dir("evaluate") / "metrics.csv").exists())
        self.assertTrue((paths.report_dir("match") / "match_summary.json").exists())

        summary = pl.read_csv(paths.report_dir("summary") / "summary.csv")
        self.assertEqual(summary.columns[0], "source")
        self.assertTrue({"recon", "match", "cluster"} <= set(summary["source"].to_list()))

        stats = json.loads((paths.report_dir("mask-dump") / "context_fraction.json").read_text())
        self.assertTrue(len(stats) > 0)

    def test_modality_probes_see_one_modality(self):
        for command in ("pretrain", "probe-train", "evaluate"):
            self.assertEqual(run(command, *self.flags), EXIT_OK, command)
        config = vj.RunConfig.from_file(SMOKE_CONFIG).with_overrides(out_dir=self.out).seeded()
        paths = config.paths
        corpus = {r.study_id: r for r in vj.load_corpus(paths.resolve("corpus"))}
        fitted = json.loads((paths.resolve("probe") / "modality_probes.json").read_text())
        self.assertTrue(len(fitted) > 0)
        for name, info in fitted.items():
            self.assertTrue(len(info["train_studies"]) > 0)
            for sid in info["train_studies"]:
                self.assertEqual(corpus[sid].modality, name)
                self.assertEqual(corpus[sid].split, "train")

        rows = json.loads((paths.report_dir("evaluate") / "cross_modal.json").read_text())
        n_test = sum(r.split == "test" for r in corpus.values())
        for row in rows:
            self.assertNotEqual(row["source"], row["target"])
            self.assertIn(row["source"], fitted)
            self.assertIn(row["target"], fitted)
            self.assertEqual(row["n_studies"], n_test)
            self.assertLessEqual(row["ci_lo"], row["ci_hi"])
            self.assertIn(row["verdict"], {v.name for v in Verdict})

    def test_stage_outputs_are_reproducible(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            self.assertEqual(run("phantom-gen", "--config", SMOKE_CONFIG, "--out", tmpdir), EXIT_OK)
            again = Path(tmpdir) / "corpus" / "corpus.json"
            first = self.out / "corpus" / "corpus.json"
            self.assertEqual(again.read_bytes(), first.read_bytes())

    def test_nonfinite_pretrain_exit_code(self):
        bad = StepResult(parameter(np.array(np.nan)), 0.0, 0.0)
        with tempfile.TemporaryDirectory() as tmpdir:
            config = vj.RunConfig.from_file(SMOKE_CONFIG)
            config.paths.out_dir = tmpdir
            config.paths.shards = str((self.out / "shards").resolve())
            path = Path(tmpdir) / "run.yaml"
            config.to_file(path)
            with mock.patch.object(importlib.import_module("voxjepa.model.train"), "forward_batch", return_value=bad):
                self.assertEqual(run("pretrain", "--config", path), EXIT_NUMERIC)
            self.assertFalse((Path(tmpdir) / "pretrain" / "checkpoint.bin").exists())


class TestCliErrors(unittest.TestCase):
    def test_missing_inputs_is_data_error(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            self.assertEqual(run("evaluate", "--config", SMOKE_CONFIG, "--out", tmpdir), EXIT_DATA)
            # nothing is promoted on failure
            self.assertFalse((Path(tmpdir) / "reports" / "evaluate" / MANIFEST_NAME).exists())

    def test_config_errors(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "bad.yaml"
            path.write_text("threads: 0\n")
            self.assertEqual(run("phantom-gen", "--config", path), EXIT_CONFIG)
            path.write_text("train:\n  stepz: 3\n")
            self.assertEqual(run("phantom-gen", "--config", path), EXIT_CONFIG)
            self.assertEqual(run("phantom-gen", "--config", Path(tmpdir) / "absent.json"), EXIT_CONFIG)
        self.assertEqual(run("no-such-command"), EXIT_CONFIG)
        self.assertEqual(run("pretrain", "--threads", "many"), EXIT_CONFIG)

    def test_out_dir_from_environment(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with mock.patch.dict(os.environ, {OUT_DIR_ENV: tmpdir}):
                self.assertEqual(run("phantom-gen", "--config", SMOKE_CONFIG), EXIT_OK)
            manifest = read_manifest(Path(tmpdir) / "corpus")
            self.assertEqual(manifest["config"]["paths"]["out_dir"], tmpdir)
            self.assertEqual(manifest["seed"], 0)
            self.assertIn("numpy", manifest["versions"])


if __name__ == "__main__":
    unittest.main()
