"""
Self-distillation pretraining: student encoder and predictor trained with a smooth-L1 latent
loss against an EMA teacher that sees the full token set.
"""

from __future__ import annotations
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import polars as pl
from tqdm import tqdm

from voxjepa import defaults
from voxjepa.autodiff import ops
from voxjepa.autodiff.checkpoint import load_checkpoint, save_checkpoint
from voxjepa.autodiff.optim import AdamW
from voxjepa.autodiff.tensor import Tensor, backward, default_dtype, no_grad
from voxjepa.errors import NumericalError, ShapeError
from voxjepa.model.config import EncoderConfig, PredictorConfig, TrainConfig
from voxjepa.model.encoder import Encoder, encode
from voxjepa.model.predictor import Predictor, predict_targets
from voxjepa.shardstore import ShardReader, VolumeView, sample_batch
from voxjepa.tokenmask import (
    AugmentSpec,
    MaskPlan,
    MaskScheme,
    PatchGrid,
    apply_augment,
    crop_foreground,
    patchify,
    plan_to_pydict,
    random_augment,
    sample_mask_plan,
)
from voxjepa.utilities import derive_seed, rng_for, write_json
from voxjepa.volume import Window

log = logging.getLogger(__name__)

NO_DECAY = ("bias", "gamma", "beta", "mask_token")
METRICS_COLUMNS = ["step", "loss", "teacher_latent_std", "teacher_latent_std_min", "lr", "m"]


@dataclass
class JepaModel:
    """
    Attributes:
        - `student`: encoder trained by gradient descent
        - `teacher`: encoder with the student's shapes, updated only by EMA
        - `predictor`: mask-token predictor
    """

    student: Encoder
    teacher: Encoder
    predictor: Predictor
    encoder_config: EncoderConfig
    predictor_config: PredictorConfig

    def trainable(self) -> Dict[str, Tensor]:
        params = {f"student.{k}": v for k, v in self.student.named_parameters()}
        params.update({f"predictor.{k}": v for k, v in self.predictor.named_parameters()})
        return params

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, module in (
            ("student", self.student),
            ("teacher", self.teacher),
            ("predictor", self.predictor),
        ):
            out.update({f"{prefix}.{k}": v for k, v in module.state_arrays().items()})
        return out


def build_model(
    encoder_config: EncoderConfig, predictor_config: PredictorConfig, seed: int
) -> JepaModel:
    """Random student and predictor; the teacher starts as an exact copy of the student."""
    student = Encoder(encoder_config, rng_for(seed, "init", "encoder"))
    teacher = Encoder(encoder_config, rng_for(seed, "init", "encoder"))
    teacher.load_arrays(student.state_arrays())
    for p in teacher.parameters().values():
        p.requires_grad = False
    predictor = Predictor(predictor_config, encoder_config, rng_for(seed, "init", "predictor"))
    return JepaModel(student, teacher, predictor, encoder_config, predictor_config)


def vjepa_loss(pred: Tensor, teacher_targets: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over every target token and latent dimension."""
    if teacher_targets.requires_grad:
        raise ValueError("vjepa_loss: teacher latents must be detached from the tape")
    if pred.shape != teacher_targets.shape:
        raise ShapeError(
            f"vjepa_loss: {pred.shape[0] if pred.ndim else 0} predictions for "
            f"{teacher_targets.shape[0] if teacher_targets.ndim else 0} targets "
            f"(shapes {pred.shape} and {teacher_targets.shape})"
        )
    return ops.smooth_l1(pred, teacher_targets, beta)


def ema_update(teacher: Encoder, student: Encoder, m: float) -> Encoder:
    """`teacher <- m * teacher + (1 - m) * student`, in place, parameter by parameter."""
    t_params = teacher.parameters()
    s_params = student.parameters()
    if set(t_params) != set(s_params):
        raise ShapeError("ema_update: teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ShapeError(f"ema_update: {name} teacher {t.shape} vs student {s.shape}")
        t.values = m * t.values + (1.0 - m) * s.values
    return teacher


def lr_at(step: int, steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over `warmup_frac` of the run, then cosine decay to zero."""
    warmup = int(math.ceil(warmup_frac * steps))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = max(steps - warmup, 1)
    progress = min(max(step - warmup, 0) / remaining, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def momentum_at(step: int, steps: int, start: float, end: float) -> float:
    if steps <= 1:
        return start
    return start + (end - start) * step / (steps - 1)


@dataclass
class TrainingInstance:
    """
    One batch element after augmentation, tokenization, cropping and masking.

    Attributes:
        - `grid`: full (cropped) token set seen by the teacher
        - `plan`: context/target split of `grid` tokens
        - `augment`: transform applied to the volume before tokenization
        - `seed`: derived per-instance seed
    """

    study_id: str
    window: Window
    grid: PatchGrid
    plan: MaskPlan
    augment: AugmentSpec
    seed: int


def prepare_instance(
    view: VolumeView, window: Window, config: TrainConfig, step: int, index: int
) -> TrainingInstance:
    seed = derive_seed(config.seed, "pretrain", step, index)
    rng = np.random.default_rng(seed)
    aug = random_augment(rng) if config.augment else AugmentSpec()
    volume = apply_augment(view.normalized(), aug)
    foreground = apply_augment(view.foreground(), aug)
    grid = patchify(volume, foreground, config.encoder.patch_shape, config.mask.fg_frac)
    grid = crop_foreground(grid, config.mask.max_per_axis, seed=derive_seed(seed, "crop"))
    scheme = MaskScheme((index + step) % 2)
    plan = sample_mask_plan(grid, scheme, view.modality, derive_seed(seed, "mask"), config.mask)
    return TrainingInstance(view.entry.study_id, window, grid, plan, aug, seed)


def prepare_batch(
    reader: ShardReader, config: TrainConfig, step: int, pool: Optional[ThreadPoolExecutor] = None
) -> List[TrainingInstance]:
    """Instances come back in draw order whether or not a worker pool is used."""
    draws = sample_batch(reader, config.batch, step)
    jobs = [(view, window, config, step, i) for i, (view, window) in enumerate(draws)]
    if pool is None:
        return [prepare_instance(*job) for job in jobs]
    return list(pool.map(lambda job: prepare_instance(*job), jobs))


@dataclass
class StepResult:
    loss: Tensor
    teacher_latent_std: float
    teacher_latent_std_min: float


def forward_batch(
    model: JepaModel, instances: List[TrainingInstance], beta: float
) -> StepResult:
    """Loss averaged over instances; the teacher runs off the tape."""
    losses = []
    teacher_rows = []
    for inst in instances:
        grid, plan = inst.grid, inst.plan
        with no_grad():
            t_latents = model.teacher(grid.flat_payloads(), grid.coords)
        both = np.concatenate([plan.context_ids, plan.target_ids])
        paired = {tuple(c) for c in grid.coords[both].tolist()}
        if paired != {tuple(c) for c in grid.coords.tolist()}:
            raise ValueError(f"teacher and student token sets differ for study {inst.study_id}")
        teacher_rows.append(t_latents.values)
        ctx = encode(
            model.student, grid.flat_payloads()[plan.context_ids], grid.coords[plan.context_ids]
        )
        pred = predict_targets(model.predictor, ctx, grid.coords[plan.target_ids])
        target = Tensor(t_latents.values[plan.target_ids])
        losses.append(vjepa_loss(pred, target, beta))
    loss = ops.mean(ops.stack_rows(losses))
    std = np.concatenate(teacher_rows, axis=0).std(axis=0)
    return StepResult(loss, float(std.mean()), float(std.min()))


def _dump_nonfinite(out_dir: Path, step: int, config: TrainConfig, instances: List[TrainingInstance]) -> Path:
    path = Path(out_dir) / f"nonfinite_step_{step}.json"
    write_json(
        path,
        {
            "step": step,
            "seed": config.seed,
            "instances": [
                {
                    "study_id": inst.study_id,
                    "window": inst.window.name,
                    "seed": inst.seed,
                    "augment": inst.augment.to_pydict(),
                    "plan": plan_to_pydict(inst.plan, inst.grid),
                }
                for inst in instances
            ],
        },
    )
    return path


def assert_no_collapse(metrics: pl.DataFrame, floor: float = defaults.COLLAPSE_STD_FLOOR) -> float:
    """
    Returns the run minimum of `teacher_latent_std_min`; raises `NumericalError` when it falls
    below `floor`.  An empty run passes.
    """
    if metrics.height == 0:
        return float("nan")
    low = float(metrics["teacher_latent_std_min"].min())  # type: ignore[arg-type]
    if not low >= floor:
        worst = metrics["teacher_latent_std_min"].arg_min()
        step = int(metrics["step"][worst])  # type: ignore[index]
        raise NumericalError(
            f"representation collapse: teacher latent std fell to {low:.3g} at step {step}, "
            f"below the floor {floor:.3g}"
        )
    return low


@dataclass
class TrainResult:
    model: JepaModel
    metrics: pl.DataFrame
    checkpoint: Optional[Path]


def train(
    reader: ShardReader,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    model: Optional[JepaModel] = None,
    verbose: bool = False,
) -> TrainResult:
    """
    Runs `config.steps` optimizer steps.  Per step: sample a batch, build instances, student
    forward/backward, AdamW step, EMA update of the teacher.  Writes `metrics.csv` and the
    checkpoint to `out_dir` when given.  With `config.check_collapse`, a run whose teacher latent
    std undercuts `config.collapse_floor` raises `NumericalError` after `metrics.csv` is written
    and before any checkpoint is.
    """
    t0 = time.perf_counter()
    dtype = np.float64 if config.dtype == "float64" else np.float32
    with default_dtype(dtype):
        if model is None:
            model = build_model(config.encoder, config.predictor, config.seed)
        optimizer = AdamW(
            model.trainable(),
            lr=config.lr,
            betas=config.betas,
            eps=config.eps,
            weight_decay=config.weight_decay,
            no_decay=NO_DECAY,
        )
        rows = []
        pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
        try:
            for step in tqdm(range(config.steps), disable=not verbose, desc="pretrain"):
                instances = prepare_batch(reader, config, step, pool)
                lr = lr_at(step, config.steps, config.lr, config.warmup_frac)
                m = momentum_at(step, config.steps, config.ema_start, config.ema_end)
                optimizer.zero_grad()
                result = forward_batch(model, instances, config.smooth_l1_beta)
                loss = result.loss.item()
                if not np.isfinite(loss):
                    dump = _dump_nonfinite(Path(out_dir or "."), step, config, instances)
                    raise NumericalError(f"non-finite loss {loss} at step {step}; diagnostics in {dump}")
                backward(result.loss)
                optimizer.step(lr)
                ema_update(model.teacher, model.student, m)
                rows.append(
                    {
                        "step": step,
                        "loss": loss,
                        "teacher_latent_std": result.teacher_latent_std,
                        "teacher_latent_std_min": result.teacher_latent_std_min,
                        "lr": lr,
                        "m": m,
                    }
                )
                log.debug(f"step {step}: loss {loss:.5g}, teacher std {result.teacher_latent_std:.3g}")
        finally:
            if pool is not None:
                pool.shutdown()

    schema = {c: (pl.Int64 if c == "step" else pl.Float64) for c in METRICS_COLUMNS}
    metrics = pl.DataFrame(rows, schema=schema)
    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(out_dir / "metrics.csv")
    if config.check_collapse:
        assert_no_collapse(metrics, config.collapse_floor)
    if out_dir is not None:
        checkpoint = save_model(model, out_dir / "checkpoint.bin", config)
    dt = time.perf_counter() - t0
    log.info(f"Elapsed time to pretrain {config.steps} steps: {dt:.3g} s")
    return TrainResult(model, metrics, checkpoint)


def save_model(model: JepaModel, path: Union[str, Path], config: Optional[TrainConfig] = None) -> Path:
    meta = {
        "encoder": model.encoder_config.to_pydict(),
        "predictor": model.predictor_config.to_pydict(),
    }
    if config is not None:
        meta["train"] = config.to_pydict()
    return save_checkpoint(path, model.state_arrays(), meta)


def load_model(path: Union[str, Path]) -> JepaModel:
    """Rebuilds the triad from a checkpoint written by `save_model`."""
    arrays, meta = load_checkpoint(path)
    enc_cfg = EncoderConfig.from_pydict(meta["encoder"])
    pred_cfg = PredictorConfig.from_pydict(meta["predictor"])
    model = build_model(enc_cfg, pred_cfg, seed=0)
    for prefix, module in (
        ("student", model.student),
        ("teacher", model.teacher),
        ("predictor", model.predictor),
    ):
        module.load_arrays(
            {k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
        )
    return model


def window_curve(metrics: pl.DataFrame, window: int = 50) -> Tuple[float, float]:
    """Mean loss over the first and the last `window` steps."""
    losses = metrics["loss"].to_numpy()
    w = min(window, len(losses))
    if w == 0:
        raise ValueError("no training steps recorded")
    return float(losses[:w].mean()), float(losses[-w:].mean())
