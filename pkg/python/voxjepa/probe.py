"""
Classify-then-aggregate attentive probe over frozen encoder features.

A study is a bag of token latents drawn from every volume (and window) of the study.  Two
separate perceptrons map each instance to per-class logits and per-class attention scores;
attention is a softmax over instances per class, and the bag logit is the attention-weighted
sum of instance logits.
"""

from __future__ import annotations
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import polars as pl
from PIL import Image
from tqdm import tqdm

from voxjepa import defaults
from voxjepa.autodiff import ops
from voxjepa.autodiff.checkpoint import load_checkpoint, save_checkpoint
from voxjepa.autodiff.optim import AdamW
from voxjepa.autodiff.tensor import Tensor, backward, no_grad
from voxjepa.errors import DataError, ShapeError, UndefinedMetricError
from voxjepa.evalstats import auroc
from voxjepa.model.encoder import Encoder, encode_grid
from voxjepa.model.layers import Linear, Module
from voxjepa.phantom import SyntheticStudy
from voxjepa.preprocess import PreprocessConfig, normalize, preprocess_volume
from voxjepa.serde import SerdeAPI
from voxjepa.shardstore import ShardReader
from voxjepa.tokenmask import patchify
from voxjepa.utilities import rng_for, write_json
from voxjepa.volume import Modality, RawVolume

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig(SerdeAPI):
    """
    Attributes:
        - `labels`: class names, in output order
        - `hidden_mult`: hidden width of both perceptrons relative to the feature width
        - `lr`, `weight_decay`: AdamW settings
        - `epochs`: maximum passes over the training bags
        - `patience`: epochs without validation improvement before stopping
        - `batch_size`: bags per optimizer step
        - `seed`: initialization and shuffling seed
    """

    labels: List[str] = field(default_factory=lambda: list(defaults.LABEL_VOCAB))
    hidden_mult: int = defaults.PROBE_HIDDEN_MULT
    lr: float = defaults.PROBE_LR
    weight_decay: float = defaults.WEIGHT_DECAY
    epochs: int = defaults.PROBE_EPOCHS
    patience: int = defaults.PROBE_PATIENCE
    batch_size: int = defaults.PROBE_BATCH_SIZE
    seed: int = 0

    def __post_init__(self):
        unknown = [name for name in self.labels if name not in defaults.LABEL_VOCAB]
        if unknown or not self.labels:
            raise ValueError(f"labels must be a nonempty subset of {defaults.LABEL_VOCAB}, got {unknown}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")


@dataclass
class BagVolume:
    """One preprocessed volume of a study, ready for tokenization."""

    volume_id: str
    window: str
    normalized: npt.NDArray[np.float32]
    foreground: npt.NDArray[np.bool_]


@dataclass
class StudyBag:
    """
    Attributes:
        - `study_id`: identifier
        - `features`: (N, d) frozen instance latents
        - `coords`: (N, 3) patch coordinates in the source volume's lattice
        - `volume_index`: (N,) index into `volume_ids` for each instance
        - `volume_ids`, `windows`, `volume_shapes`: per source volume
        - `patch_shape`: voxels per token
        - `labels`: (K,) 0/1 vector, or empty when unknown
    """

    study_id: str
    features: npt.NDArray[np.float64]
    coords: npt.NDArray[np.int64]
    volume_index: npt.NDArray[np.int64]
    volume_ids: List[str]
    windows: List[str]
    volume_shapes: List[Tuple[int, int, int]]
    patch_shape: Tuple[int, int, int]
    labels: npt.NDArray[np.int8] = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self):
        if len(self.features) < 1:
            raise ValueError(f"study bag {self.study_id} has no instances")

    @property
    def n_instances(self) -> int:
        return int(self.features.shape[0])


def build_study_bag(
    encoder: Encoder,
    study_id: str,
    volumes: Sequence[BagVolume],
    labels: Optional[npt.ArrayLike] = None,
) -> StudyBag:
    """
    Encodes every foreground token of every volume (no truncation) with the frozen `encoder` and
    concatenates the latents into one bag.
    """
    feats, coords, index, shapes = [], [], [], []
    patch_shape = encoder.config.patch_shape
    for i, vol in enumerate(volumes):
        grid = patchify(vol.normalized, vol.foreground, patch_shape)
        latents = encode_grid(encoder, grid)
        feats.append(latents.latents.values.astype(np.float64))
        coords.append(grid.coords)
        index.append(np.full(grid.n_tokens, i, dtype=np.int64))
        shapes.append(tuple(vol.normalized.shape))
    return StudyBag(
        study_id=study_id,
        features=np.concatenate(feats, axis=0),
        coords=np.concatenate(coords, axis=0),
        volume_index=np.concatenate(index),
        volume_ids=[v.volume_id for v in volumes],
        windows=[v.window for v in volumes],
        volume_shapes=shapes,  # type: ignore[arg-type]
        patch_shape=patch_shape,
        labels=np.zeros(0, dtype=np.int8) if labels is None else np.asarray(labels, dtype=np.int8),
    )


def study_volumes(reader: ShardReader, study_id: str) -> List[BagVolume]:
    """Every stored window of one study, ordered by window name."""
    entries = reader.study_entries(study_id)
    volumes = []
    for window in sorted(entries):
        view = reader.read_volume(entries[window])
        volumes.append(BagVolume(view.entry.volume_id, window, view.normalized(), view.foreground()))
    return volumes


def study_modality(reader: ShardReader, study_id: str) -> Modality:
    """Pseudo-modality of a stored study, read from its first shard entry."""
    return Modality[next(iter(reader.study_entries(study_id).values())).modality]


def bags_from_shards(
    reader: ShardReader,
    encoder: Encoder,
    label_names: Sequence[str],
    split: Optional[str] = None,
    verbose: bool = False,
    modality: Optional[Modality] = None,
) -> List[StudyBag]:
    """
    One bag per study of `split`, from every stored window of the study.  With `modality`, only
    studies stored under that pseudo-modality are bagged.
    """
    ids = reader.study_ids(split)
    if modality is not None:
        ids = [sid for sid in ids if study_modality(reader, sid) == modality]
    bags = []
    for sid in tqdm(ids, desc="bags", disable=not verbose):
        first = next(iter(reader.study_entries(sid).values()))
        labels = [first.labels.get(name, 0) for name in label_names]
        bags.append(build_study_bag(encoder, sid, study_volumes(reader, sid), labels))
    return bags


def bag_from_raw(
    encoder: Encoder,
    study_id: str,
    raw_volumes: Sequence[RawVolume],
    window_means: Dict[str, float],
    labels: Optional[npt.ArrayLike] = None,
    config: Optional[PreprocessConfig] = None,
) -> StudyBag:
    """Runs the preprocessing chain on rendered volumes, then `build_study_bag`."""
    volumes = []
    for j, raw in enumerate(raw_volumes):
        for pv in preprocess_volume(raw, config):
            mean = window_means.get(pv.window.name, 0.0)
            volumes.append(
                BagVolume(f"{study_id}_{j}", pv.window.name, normalize(pv, mean), pv.foreground)
            )
    return build_study_bag(encoder, study_id, volumes, labels)


def rendering_bags(
    encoder: Encoder,
    studies: Sequence[SyntheticStudy],
    modality: Modality,
    window_means: Dict[str, float],
    label_names: Sequence[str],
    config: Optional[PreprocessConfig] = None,
) -> List[StudyBag]:
    """
    One bag per study from its `modality` rendering alone, labeled from the study's ground truth.
    Studies rendered in several pseudo-modalities give paired bags for cross-modal scoring.
    """
    bags = []
    for study in studies:
        raw = [v for v in study.volumes if v.modality == modality]
        if not raw:
            raise DataError(f"study {study.study_id} has no {modality.name} rendering")
        truth = study.label_dict()
        labels = [truth.get(name, 0) for name in label_names]
        bags.append(bag_from_raw(encoder, study.study_id, raw, window_means, labels, config))
    return bags


class Perceptron(Module):
    """Two-layer perceptron with a GELU hidden layer."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng, defaults.INIT_STD)
        self.fc2 = Linear(hidden, d_out, rng, defaults.INIT_STD)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class AttentiveProbe(Module):
    """
    `instance_head` gives per-instance class logits, `attention_head` per-instance class
    attention scores; the heads share nothing.
    """

    def __init__(self, feature_dim: int, n_classes: int, hidden_mult: int, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        hidden = hidden_mult * feature_dim
        self.instance_head = Perceptron(feature_dim, hidden, n_classes, rng)
        self.attention_head = Perceptron(feature_dim, hidden, n_classes, rng)


def make_probe(feature_dim: int, config: ProbeConfig) -> AttentiveProbe:
    return AttentiveProbe(
        feature_dim, len(config.labels), config.hidden_mult, rng_for(config.seed, "probe", "init")
    )


@dataclass
class BagPrediction:
    """
    Attributes:
        - `bag_logits`: (K,) study-level logits
        - `attention`: (N, K) attention, each column a distribution over instances
        - `instance_logits`: (N, K)
    """

    bag_logits: npt.NDArray[np.float64]
    attention: npt.NDArray[np.float64]
    instance_logits: npt.NDArray[np.float64]


def bag_logits(probe: AttentiveProbe, features: npt.ArrayLike) -> Tuple[Tensor, Tensor, Tensor]:
    """Differentiable `(bag_logits, attention, instance_logits)`."""
    x = Tensor(np.asarray(features))
    if x.ndim != 2 or x.shape[1] != probe.feature_dim:
        raise ShapeError(f"probe expects (N, {probe.feature_dim}) features, got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("probe_forward: empty bag")
    inst = probe.instance_head(x)
    scores = probe.attention_head(x)
    alpha = ops.transpose(ops.softmax_rows(ops.transpose(scores)))
    return ops.sum(alpha * inst, axis=0), alpha, inst


def probe_forward(probe: AttentiveProbe, bag: StudyBag) -> BagPrediction:
    with no_grad():
        logits, alpha, inst = bag_logits(probe, bag.features)
    return BagPrediction(logits.values.copy(), alpha.values.copy(), inst.values.copy())


def class_weights_from_labels(
    labels: npt.ArrayLike, label_names: Optional[Sequence[str]] = None
) -> npt.NDArray[np.float64]:
    """
    Inverse prevalence per class, normalized to mean 1 over classes with positives.  Classes
    without training positives get weight 0 (excluded from the loss) and a warning.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or len(y) == 0:
        raise ValueError(f"labels must be a nonempty (studies, classes) matrix, got shape {y.shape}")
    prevalence = y.mean(axis=0)
    present = prevalence > 0
    weights = np.zeros(y.shape[1])
    weights[present] = 1.0 / prevalence[present]
    for k in np.flatnonzero(~present):
        name = label_names[k] if label_names is not None else str(k)
        log.warning(f"class {name} has no training positives; excluded from the probe loss")
    if present.any():
        weights[present] /= weights[present].mean()
    return weights


def _mean_auroc(probe: AttentiveProbe, bags: Sequence[StudyBag], labels: npt.NDArray) -> float:
    scores = np.stack([probe_forward(probe, b).bag_logits for b in bags])
    values = []
    for k in range(labels.shape[1]):
        try:
            values.append(auroc(scores[:, k], labels[:, k]))
        except UndefinedMetricError:
            continue
    return float(np.mean(values)) if values else float("nan")


@dataclass
class ProbeResult:
    probe: AttentiveProbe
    history: pl.DataFrame
    best_epoch: int


def probe_train(
    bags: Sequence[StudyBag],
    labels: npt.ArrayLike,
    class_weights: npt.ArrayLike,
    config: ProbeConfig,
    val_bags: Optional[Sequence[StudyBag]] = None,
    val_labels: Optional[npt.ArrayLike] = None,
    verbose: bool = False,
) -> ProbeResult:
    """
    Minimizes class-weighted binary cross-entropy over bag logits with AdamW.  With a
    validation set, keeps the parameters of the epoch with the best mean validation AUROC and
    stops after `config.patience` epochs without improvement.
    """
    t0 = time.perf_counter()
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if len(bags) != len(y) or len(bags) == 0:
        raise ValueError(f"{len(bags)} bags for {len(y)} label rows")
    if y.shape[1] != len(config.labels) or w.shape != (y.shape[1],):
        raise ShapeError(f"labels {y.shape} / weights {w.shape} do not match {len(config.labels)} classes")
    probe = make_probe(bags[0].features.shape[1], config)
    optimizer = AdamW(probe.parameters(), lr=config.lr, weight_decay=config.weight_decay, no_decay=("bias",))
    n_active = max(int((w > 0).sum()), 1)
    y_val = None if val_labels is None else np.asarray(val_labels, dtype=np.float64)
    best = (-np.inf, 0, probe.state_arrays())
    rows = []
    stale = 0
    for epoch in tqdm(range(config.epochs), desc="probe", disable=not verbose):
        order = rng_for(config.seed, "probe", "epoch", epoch).permutation(len(bags))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            norm = float(len(batch) * n_active)
            terms = [
                ops.bce_with_logits(bag_logits(probe, bags[i].features)[0], y[i], w, norm)
                for i in batch
            ]
            loss = ops.sum(ops.stack_rows(terms))
            backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        row = {"epoch": epoch, "loss": epoch_loss / len(bags), "val_mean_auroc": float("nan")}
        if val_bags:
            score = _mean_auroc(probe, val_bags, y_val)  # type: ignore[arg-type]
            row["val_mean_auroc"] = score
            if score > best[0]:
                best = (score, epoch, probe.state_arrays())
                stale = 0
            else:
                stale += 1
        rows.append(row)
        if val_bags and stale >= config.patience:
            log.info(f"probe early stop at epoch {epoch}; best epoch {best[1]}")
            break
    best_epoch = rows[-1]["epoch"]
    if val_bags and np.isfinite(best[0]):
        probe.load_arrays(best[2])
        best_epoch = best[1]
    t1 = time.perf_counter()
    log.info(f"Elapsed time to train probe over {len(bags)} bags: {t1 - t0:.3g} s")
    return ProbeResult(probe, pl.DataFrame(rows), best_epoch)


def save_probe(probe: AttentiveProbe, path: Union[str, Path], config: ProbeConfig) -> Path:
    meta = {"probe": config.to_pydict(), "feature_dim": probe.feature_dim}
    return save_checkpoint(path, probe.state_arrays(), meta)


def load_probe(path: Union[str, Path]) -> Tuple[AttentiveProbe, ProbeConfig]:
    arrays, meta = load_checkpoint(path)
    config = ProbeConfig.from_pydict(meta["probe"])
    probe = make_probe(int(meta["feature_dim"]), config)
    probe.load_arrays(arrays)
    return probe, config


@dataclass
class Heatmap:
    """
    Attributes:
        - `values`: (K, *volume_shape) attention splatted onto voxels; every voxel of an
          instance's patch (padding excluded) carries that instance's raw attention, summed
          over the study's volumes
        - `scale`: multiply `values` by this to get a voxel density summing to 1 per class when
          no patch is clipped by padding
        - `labels`: class names per leading index
    """

    study_id: str
    values: npt.NDArray[np.float64]
    scale: float
    labels: List[str]


def attention_heatmap(
    prediction: BagPrediction, bag: StudyBag, label_names: Sequence[str]
) -> Heatmap:
    shapes = set(bag.volume_shapes)
    if len(shapes) != 1:
        raise ShapeError(f"study {bag.study_id} mixes volume shapes {sorted(shapes)}")
    shape = shapes.pop()
    k = prediction.attention.shape[1]
    values = np.zeros((k, *shape))
    pz, py, px = bag.patch_shape
    for i, (z, y, x) in enumerate(bag.coords):
        values[
            :, z * pz : (z + 1) * pz, y * py : (y + 1) * py, x * px : (x + 1) * px
        ] += prediction.attention[i][:, None, None, None]
    return Heatmap(bag.study_id, values, 1.0 / float(pz * py * px), list(label_names))


def pointing_game(heatmap: npt.ArrayLike, gt_mask: npt.ArrayLike) -> Optional[bool]:
    """
    True when the maximal voxel (first in (z, y, x) order among ties) lies in `gt_mask`;
    `None` when the mask is empty.
    """
    heatmap = np.asarray(heatmap)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if heatmap.shape != gt_mask.shape:
        raise ShapeError(f"pointing_game: heatmap {heatmap.shape} vs mask {gt_mask.shape}")
    if not gt_mask.any():
        return None
    return bool(gt_mask.reshape(-1)[int(np.argmax(heatmap))])


def pointing_accuracy(hits: Sequence[Optional[bool]]) -> float:
    scored = [h for h in hits if h is not None]
    return float(np.mean(scored)) if scored else float("nan")


def random_voxel_baseline(gt_mask: npt.ArrayLike, foreground: npt.ArrayLike) -> float:
    """Hit probability of a voxel drawn uniformly from the foreground."""
    gt_mask = np.asarray(gt_mask, dtype=bool)
    foreground = np.asarray(foreground, dtype=bool)
    n_fg = int(foreground.sum())
    return float((gt_mask & foreground).sum() / n_fg) if n_fg else float("nan")


def resize_labels_nearest(labels: npt.ArrayLike, shape: Tuple[int, int, int]) -> npt.NDArray:
    """Nearest-neighbor resampling of a label grid onto `shape` spanning the same extent."""
    labels = np.asarray(labels)
    if labels.shape == tuple(shape):
        return labels
    idx = [
        np.minimum(((np.arange(n) + 0.5) * old / n).astype(np.int64), old - 1)
        for n, old in zip(shape, labels.shape)
    ]
    return labels[np.ix_(*idx)]


def resize_mask_nearest(mask: npt.ArrayLike, shape: Tuple[int, int, int]) -> npt.NDArray[np.bool_]:
    return resize_labels_nearest(np.asarray(mask, dtype=bool), shape)


def export_heatmap_pgm(heatmap: Heatmap, class_name: str, out_dir: Union[str, Path]) -> Path:
    """
    Writes one 8-bit PGM per axial slice of one class map plus `heatmap.json` with the study,
    class, scale and the maximum value mapped to 255.
    """
    k = heatmap.labels.index(class_name)
    values = heatmap.values[k]
    out_dir = Path(out_dir) / heatmap.study_id / class_name
    out_dir.mkdir(parents=True, exist_ok=True)
    vmax = float(values.max())
    img = np.zeros(values.shape, dtype=np.uint8)
    if vmax > 0:
        img = np.floor(values / vmax * 255.0 + 0.5).astype(np.uint8)
    for z in range(values.shape[0]):
        Image.fromarray(img[z]).save(out_dir / f"slice_{z:03d}.pgm")
    write_json(
        out_dir / "heatmap.json",
        {
            "study_id": heatmap.study_id,
            "class": class_name,
            "scale": heatmap.scale,
            "max_value": vmax,
            "n_slices": int(values.shape[0]),
            "shape": list(values.shape),
        },
    )
    return out_dir


def predictions_frame(
    bags: Sequence[StudyBag], predictions: Sequence[BagPrediction], label_names: Sequence[str]
) -> pl.DataFrame:
    """Long-form study scores: study_id, class, logit, label."""
    rows = []
    for bag, pred in zip(bags, predictions):
        for k, name in enumerate(label_names):
            rows.append(
                {
                    "study_id": bag.study_id,
                    "class": name,
                    "logit": float(pred.bag_logits[k]),
                    "label": int(bag.labels[k]) if bag.labels.size else -1,
                }
            )
    return pl.DataFrame(rows)

