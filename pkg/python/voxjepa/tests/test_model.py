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
from voxjepa import defaults
from voxjepa.autodiff import Tensor, backward, parameter
from voxjepa.model import (
    Encoder,
    Predictor,
    build_model,
    ema_update,
    encode,
    load_model,
    predict_targets,
    save_model,
    train,
    vjepa_loss,
)
from voxjepa.model.train import StepResult, assert_no_collapse, lr_at, momentum_at, window_curve

D = 12


def small_encoder(seed=0):
    config = EncoderConfig(embed_dim=D, depth=1, heads=2, mlp_ratio=2.0, patch_shape=(1, 2, 2))
    return Encoder(config, np.random.default_rng(seed))


def random_tokens(n, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.array([[i // 4, (i // 2) % 2, i % 2] for i in range(n)])
    return rng.normal(size=(n, 4)), coords


class TestEncoder(unittest.TestCase):
    def test_single_token(self):
        payloads, coords = random_tokens(1)
        seq = encode(small_encoder(), payloads, coords)
        self.assertEqual(seq.latents.shape, (1, D))
        self.assertEqual(len(seq), 1)

    def test_order_equivariance(self):
        enc = small_encoder()
        payloads, coords = random_tokens(8)
        perm = np.random.default_rng(1).permutation(8)
        a = encode(enc, payloads, coords).latents.values
        b = encode(enc, payloads[perm], coords[perm]).latents.values
        self.assertTrue(np.allclose(a[perm], b, atol=1e-10))

    def test_invalid_tokens(self):
        enc = small_encoder()
        payloads, coords = random_tokens(3)
        coords[2] = coords[0]
        with self.assertRaises(ValueError):
            encode(enc, payloads, coords)
        with self.assertRaises(ValueError):
            encode(enc, np.zeros((0, 4)), np.zeros((0, 3)))
        with self.assertRaises(ValueError):
            encode(enc, np.zeros((1, 5)), np.zeros((1, 3)))

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            EncoderConfig(embed_dim=10, heads=3)
        with self.assertRaises(ValueError):
            EncoderConfig(embed_dim=4, heads=2)


class TestPredictor(unittest.TestCase):
    def setUp(self):
        enc = small_encoder()
        self.predictor = Predictor(
            PredictorConfig(embed_dim=D, depth=1, heads=2, mlp_ratio=2.0),
            enc.config,
            np.random.default_rng(2),
        )
        payloads, coords = random_tokens(8)
        self.ctx = encode(enc, payloads[:5], coords[:5])
        self.target_coords = coords[5:]

    def test_shapes_and_order(self):
        out = predict_targets(self.predictor, self.ctx, self.target_coords)
        self.assertEqual(out.shape, (3, D))
        flipped = predict_targets(self.predictor, self.ctx, self.target_coords[::-1])
        self.assertTrue(np.allclose(out.values[::-1], flipped.values, atol=1e-10))

    def test_no_targets(self):
        out = predict_targets(self.predictor, self.ctx, np.zeros((0, 3)))
        self.assertEqual(out.shape, (0, D))

    def test_overlap(self):
        with self.assertRaises(ValueError):
            predict_targets(self.predictor, self.ctx, self.ctx.coords[:1])


class TestLossAndEma(unittest.TestCase):
    def test_loss_examples(self):
        zeros = Tensor(np.zeros((2, 3)))
        self.assertEqual(vjepa_loss(parameter(np.zeros((2, 3))), zeros).item(), 0.0)
        self.assertAlmostEqual(vjepa_loss(parameter([[0.5]]), Tensor([[0.0]])).item(), 0.125)
        with self.assertRaises(vj.ShapeError):
            vjepa_loss(parameter(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))
        with self.assertRaises(ValueError):
            vjepa_loss(parameter(np.zeros((2, 3))), parameter(np.zeros((2, 3))))

    def test_teacher_gets_no_gradient(self):
        model = build_model(mock_encoder_config(), mock_predictor_config(), seed=0)
        grid = vj.patchify(np.random.default_rng(0).normal(size=(8, 32, 32)), np.ones((8, 32, 32), dtype=bool))
        plan = vj.sample_mask_plan(grid, vj.MaskScheme.SMALL_BLOCK_CONTEXT, vj.Modality.SYNTH_CT, 0)
        target = model.teacher(grid.flat_payloads(), grid.coords)
        self.assertFalse(target.requires_grad)
        ctx = encode(model.student, grid.flat_payloads()[plan.context_ids], grid.coords[plan.context_ids])
        pred = predict_targets(model.predictor, ctx, grid.coords[plan.target_ids])
        backward(vjepa_loss(pred, Tensor(target.values[plan.target_ids])))
        self.assertTrue(all(p.grad is None for p in model.teacher.parameters().values()))
        self.assertTrue(any(p.grad is not None for p in model.student.parameters().values()))

    def test_ema(self):
        model = build_model(mock_encoder_config(), mock_predictor_config(), seed=0)
        for p in model.student.parameters().values():
            p.values = p.values + 1.0
        before = model.teacher.state_arrays()
        ema_update(model.teacher, model.student, 1.0)
        for name, arr in model.teacher.state_arrays().items():
            self.assertTrue(np.array_equal(arr, before[name]))
        ema_update(model.teacher, model.student, 0.99)
        for name, arr in model.teacher.state_arrays().items():
            self.assertTrue(np.allclose(arr, before[name] + 0.01))
        ema_update(model.teacher, model.student, 0.0)
        student = model.student.state_arrays()
        for name, arr in model.teacher.state_arrays().items():
            self.assertTrue(np.array_equal(arr, student[name]))

    def test_schedules(self):
        self.assertAlmostEqual(lr_at(0, 100, 1e-3, 0.1), 1e-4)
        self.assertAlmostEqual(lr_at(9, 100, 1e-3, 0.1), 1e-3)
        self.assertAlmostEqual(lr_at(10, 100, 1e-3, 0.1), 1e-3)
        self.assertAlmostEqual(lr_at(100, 100, 1e-3, 0.1), 0.0)
        self.assertEqual(momentum_at(0, 10, 0.996, 1.0), 0.996)
        self.assertAlmostEqual(momentum_at(9, 10, 0.996, 1.0), 1.0)
        self.assertEqual(momentum_at(0, 1, 0.996, 1.0), 0.996)


class TestTrain(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.reader = vj.ShardReader(mock_shards(Path(cls.tmpdir.name)))

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def test_writes_outputs(self):
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory() as out:
            result = train(self.reader, mock_train_config(steps=3), out)
            self.assertTrue((Path(out) / "metrics.csv").exists())
            self.assertEqual(result.checkpoint, Path(out) / "checkpoint.bin")
            loaded = load_model(result.checkpoint)
        print(f"Elapsed time to train 3 steps: {time.perf_counter() - t0:.3g} s")
        self.assertEqual(result.metrics.height, 3)
        self.assertEqual(result.metrics["step"].to_list(), [0, 1, 2])
        self.assertTrue(np.isfinite(result.metrics["loss"].to_numpy()).all())
        self.assertTrue(all(p.grad is None for p in result.model.teacher.parameters().values()))
        for name, arr in result.model.state_arrays().items():
            self.assertTrue(np.array_equal(loaded.state_arrays()[name], arr), msg=name)

    def test_zero_lr_keeps_student(self):
        model = build_model(mock_encoder_config(), mock_predictor_config(), seed=0)
        before = model.student.state_arrays()
        result = train(self.reader, mock_train_config(steps=2, lr=0.0), model=model)
        after = result.model.student.state_arrays()
        teacher = result.model.teacher.state_arrays()
        for name, arr in before.items():
            self.assertTrue(np.array_equal(after[name], arr), msg=name)
            self.assertTrue(np.allclose(teacher[name], arr, atol=1e-12), msg=name)

    def test_deterministic(self):
        a = train(self.reader, mock_train_config(steps=2))
        b = train(self.reader, mock_train_config(steps=2, threads=2))
        self.assertTrue(np.array_equal(a.metrics["loss"].to_numpy(), b.metrics["loss"].to_numpy()))

    def test_nonfinite_loss(self):
        bad = StepResult(parameter(np.array(np.nan)), 0.0, 0.0)
        with tempfile.TemporaryDirectory() as out:
            with mock.patch.object(importlib.import_module("voxjepa.model.train"), "forward_batch", return_value=bad):
                with self.assertRaises(vj.NumericalError):
                    train(self.reader, mock_train_config(steps=1), out)
            self.assertTrue((Path(out) / "nonfinite_step_0.json").exists())

    def test_collapse_floor(self):
        metrics = pl.DataFrame(
            {"step": [0, 1, 2], "teacher_latent_std_min": [0.5, 1e-5, 0.2]}
        )
        self.assertAlmostEqual(assert_no_collapse(metrics, 1e-6), 1e-5)
        with self.assertRaisesRegex(vj.NumericalError, "at step 1"):
            assert_no_collapse(metrics, defaults.COLLAPSE_STD_FLOOR)
        nan_run = pl.DataFrame({"step": [0], "teacher_latent_std_min": [float("nan")]})
        with self.assertRaises(vj.NumericalError):
            assert_no_collapse(nan_run)
        self.assertTrue(np.isnan(assert_no_collapse(metrics.clear())))

    def test_collapsed_run_writes_no_checkpoint(self):
        config = mock_train_config(steps=2, check_collapse=True, collapse_floor=1e9)
        with tempfile.TemporaryDirectory() as out:
            with self.assertRaises(vj.NumericalError):
                train(self.reader, config, out)
            self.assertTrue((Path(out) / "metrics.csv").exists())
            self.assertFalse((Path(out) / "checkpoint.bin").exists())
        healthy = train(self.reader, mock_train_config(steps=2, check_collapse=True, collapse_floor=0.0))
        self.assertEqual(healthy.metrics.height, 2)

    def test_save_load(self):
        model = build_model(mock_encoder_config(), mock_predictor_config(), seed=3)
        with tempfile.TemporaryDirectory() as out:
            path = save_model(model, Path(out) / "m.bin")
            loaded = load_model(path)
        self.assertEqual(loaded.encoder_config, model.encoder_config)
        for name, arr in model.state_arrays().items():
            self.assertTrue(np.array_equal(loaded.state_arrays()[name], arr))

    def test_window_curve(self):
        import polars as pl

        metrics = pl.DataFrame({"loss": [4.0, 3.0, 2.0, 1.0]})
        self.assertEqual(window_curve(metrics, window=2), (3.5, 1.5))
        with self.assertRaises(ValueError):
            window_curve(pl.DataFrame({"loss": []}, schema={"loss": pl.Float64}))


if __name__ == "__main__":
    unittest.main()
