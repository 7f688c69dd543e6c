import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from .mock_resources import *

import voxjepa as vj
from voxjepa.autodiff import (
    AdamW,
    AdamWState,
    Tensor,
    adamw_step,
    backward,
    default_dtype,
    gradcheck,
    load_checkpoint,
    no_grad,
    ops,
    parameter,
    save_checkpoint,
)


class TestOps(unittest.TestCase):
    def test_smooth_l1_examples(self):
        pred = parameter([0.0, 2.0, -0.5])
        loss = ops.smooth_l1(pred, [0.0, 0.0, 0.0])
        # 0, |2| - 0.5, 0.5 * 0.25
        self.assertAlmostEqual(loss.item(), (0.0 + 1.5 + 0.125) / 3)
        backward(loss)
        self.assertTrue(np.allclose(pred.grad, [0.0, 1.0 / 3, -0.5 / 3]))
        with self.assertRaises(vj.ShapeError):
            ops.smooth_l1(pred, [0.0, 0.0])

    def test_softmax_mask(self):
        x = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        mask = np.array([[0.0, -np.inf, 0.0], [0.0, 0.0, 0.0]])
        y = ops.softmax_rows(x, mask).values
        self.assertEqual(y[0, 1], 0.0)
        self.assertTrue(np.allclose(y.sum(axis=-1), 1.0))
        self.assertTrue(np.allclose(y[1], 1.0 / 3))
        self.assertTrue(np.allclose(ops.softmax_rows(x + 100.0).values, ops.softmax_rows(x).values))
        with self.assertRaises(ValueError):
            ops.softmax_rows(x, np.full((2, 3), -np.inf))
        with self.assertRaises(vj.ShapeError):
            ops.softmax_rows(x, np.zeros((2, 2)))

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(0).normal(3.0, 5.0, size=(4, 16))
        y = ops.layer_norm(x).values
        self.assertTrue(np.allclose(y.mean(axis=-1), 0.0, atol=1e-12))
        self.assertTrue(np.allclose(y.var(axis=-1), 1.0, atol=1e-6))

    def test_gelu_values(self):
        y = ops.gelu([0.0, 10.0, -10.0]).values
        self.assertEqual(y[0], 0.0)
        self.assertAlmostEqual(y[1], 10.0, places=6)
        self.assertAlmostEqual(y[2], 0.0, places=6)

    def test_linear_shapes(self):
        with self.assertRaises(vj.ShapeError):
            ops.linear(np.ones((2, 3)), np.ones((4, 5)))
        with self.assertRaises(vj.ShapeError):
            ops.linear(np.ones((2, 3)), np.ones((3, 5)), np.ones(4))
        self.assertEqual(ops.linear(np.ones((2, 3)), np.ones((3, 5)), np.zeros(5)).shape, (2, 5))

    def test_bce_matches_reference(self):
        logits = np.array([-2.0, 0.0, 3.0])
        y = np.array([0.0, 1.0, 1.0])
        p = 1.0 / (1.0 + np.exp(-logits))
        ref = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        self.assertAlmostEqual(ops.bce_with_logits(logits, y).item(), ref, places=12)


class TestBackward(unittest.TestCase):
    def test_shared_node(self):
        x = parameter([1.0, -2.0])
        backward((x * x + x).sum())
        self.assertTrue(np.allclose(x.grad, [3.0, -3.0]))

    def test_matmul_grad(self):
        a = parameter(np.arange(6.0).reshape(2, 3))
        b = parameter(np.ones((3, 4)))
        backward((a @ b).sum())
        self.assertTrue(np.allclose(a.grad, np.full((2, 3), 4.0)))
        self.assertTrue(np.allclose(b.grad, np.repeat(a.values.sum(axis=0)[:, None], 4, axis=1)))

    def test_broadcast_add(self):
        x = parameter(np.ones((3, 2)))
        bias = parameter(np.zeros(2))
        backward((x + bias).sum())
        self.assertTrue(np.allclose(bias.grad, [3.0, 3.0]))

    def test_gather_repeated(self):
        x = parameter(np.arange(4.0))
        backward(x[[0, 0, 3]].sum())
        self.assertTrue(np.allclose(x.grad, [2.0, 0.0, 0.0, 1.0]))

    def test_non_scalar_loss(self):
        with self.assertRaises(vj.ShapeError):
            backward(parameter(np.ones(3)) * 2.0)

    def test_no_grad_and_dtype(self):
        x = parameter(np.ones(2))
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertEqual(y.parents, ())
        with default_dtype(np.float32):
            self.assertEqual(Tensor([1.0]).values.dtype, np.float32)
        self.assertEqual(Tensor([1.0]).values.dtype, np.float64)
        with self.assertRaises(ValueError):
            with default_dtype(np.int32):
                pass

    def test_gradcheck_three_layer_net(self):
        rng = np.random.default_rng(0)
        params = {
            "w1": parameter(rng.normal(0, 0.5, size=(5, 8))),
            "b1": parameter(rng.normal(0, 0.1, size=8)),
            "w2": parameter(rng.normal(0, 0.5, size=(8, 8))),
            "w3": parameter(rng.normal(0, 0.5, size=(8, 3))),
        }
        x = rng.normal(size=(4, 5))
        target = rng.normal(0, 0.3, size=(4, 3))
        mask = np.zeros((4, 4))
        mask[0, 1] = -np.inf

        def loss_fn():
            h = ops.gelu(ops.linear(x, params["w1"], params["b1"]))
            h = ops.layer_norm(h)
            attn = ops.softmax_rows(h @ h.T * 0.1, mask)
            h = attn @ ops.linear(h, params["w2"])
            return ops.smooth_l1(ops.linear(ops.gelu(h), params["w3"]), target)

        worst = gradcheck(loss_fn, params)
        for name, err in worst.items():
            self.assertLess(err, 1e-4, msg=name)


class TestAdamW(unittest.TestCase):
    def test_hand_computed_step(self):
        state = AdamWState.zeros_like(np.array([1.0]))
        out = adamw_step(np.array([1.0]), np.array([0.5]), state, lr=0.1, weight_decay=0.1)
        # decay 1.0 -> 0.99, then the bias-corrected first step moves by lr * sign(grad)
        self.assertAlmostEqual(float(out[0]), 0.89, places=6)
        self.assertEqual(state.step, 1)
        self.assertAlmostEqual(float(state.m[0]), 0.05)
        self.assertAlmostEqual(float(state.v[0]), 0.00025)

    def test_no_decay_and_missing_grad(self):
        params = {
            "enc.weight": parameter(np.full(2, 2.0)),
            "enc.bias": parameter(np.full(2, 2.0)),
            "head.weight": parameter(np.full(2, 2.0)),
        }
        opt = AdamW(params, lr=0.1, weight_decay=0.5, no_decay=("bias",))
        params["enc.weight"].grad = np.zeros(2)
        params["enc.bias"].grad = np.zeros(2)
        opt.step()
        self.assertTrue(np.allclose(params["enc.weight"].values, 1.9))
        self.assertTrue(np.allclose(params["enc.bias"].values, 2.0))
        self.assertTrue(np.array_equal(params["head.weight"].values, np.full(2, 2.0)))
        self.assertNotIn("head.weight", opt.state)

    def test_shape_mismatch(self):
        with self.assertRaises(vj.ShapeError):
            adamw_step(np.ones(2), np.ones(3), AdamWState.zeros_like(np.ones(2)), lr=0.1)


class TestCheckpoint(unittest.TestCase):
    def test_round_trip(self):
        tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1.5])}
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_checkpoint(Path(tmpdir) / "ckpt.bin", tensors, {"step": 3})
            self.assertEqual(path.stat().st_size, 7 * 8)
            back, meta = load_checkpoint(path)
            sidecar = json.loads((Path(tmpdir) / "ckpt.bin.json").read_text())
        self.assertEqual(meta, {"step": 3})
        self.assertEqual([t["name"] for t in sidecar["tensors"]], ["a", "b"])
        for name, arr in tensors.items():
            self.assertTrue(np.array_equal(back[name], arr))

    def test_corruption(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_checkpoint(Path(tmpdir) / "ckpt.bin", {"w": np.ones((3, 3))})
            data = path.read_bytes()
            path.write_bytes(data[:-8])
            with self.assertRaises(vj.CorruptionError):
                load_checkpoint(path)
            path.write_bytes(data[:-3])
            with self.assertRaises(vj.CorruptionError):
                load_checkpoint(path)
            path.write_bytes(data)
            side = Path(tmpdir) / "ckpt.bin.json"
            sidecar = json.loads(side.read_text())
            sidecar["tensors"][0]["offset"] = 2
            side.write_text(json.dumps(sidecar))
            with self.assertRaises(vj.CorruptionError):
                load_checkpoint(path)
            side.unlink()
            with self.assertRaises(vj.CorruptionError):
                load_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
