from pathlib import Path
from typing import List, Optional

import numpy as np

import voxjepa as vj
from voxjepa.model.config import EncoderConfig, PredictorConfig, TrainConfig
from voxjepa.phantom import LesionKind, Side
from voxjepa.evalstats import EvalConfig
from voxjepa.latentlab import LatentLabConfig
from voxjepa.probe import ProbeConfig
from voxjepa.run_config import PathsConfig
from voxjepa.shardstore import VolumeMeta

# smallest grid whose skull shell is at least one voxel thick on every axis, rounded up to
# whole patches
SMALL_GRID = (16, 32, 32)
SMALL_SPACING = (4.0, 1.0, 1.0)


def mock_lesion(
    side: Side = Side.LEFT,
    kind: LesionKind = LesionKind.HYPER,
    radius_vox: float = 2.5,
    label_id: int = 0,
) -> vj.LesionSpec:
    return vj.LesionSpec(kind=kind, radius_vox=radius_vox, side=side, label_id=label_id)


def mock_phantom_spec(
    seed: int = 0,
    lesions: Optional[List[vj.LesionSpec]] = None,
    modality: vj.Modality = vj.Modality.SYNTH_CT,
    **kwargs,
) -> vj.PhantomSpec:
    return vj.PhantomSpec(
        seed=seed,
        grid_shape=SMALL_GRID,
        spacing_mm=SMALL_SPACING,
        pseudo_modality=modality,
        lesion_config=lesions or [],
        **kwargs,
    )


def mock_corpus_config(n_studies: int = 10, seed: int = 0, **kwargs) -> vj.CorpusConfig:
    return vj.CorpusConfig(
        n_studies=n_studies,
        grid_shape=SMALL_GRID,
        spacing_mm=SMALL_SPACING,
        radius_range=(1.5, 2.0),
        seed=seed,
        **kwargs,
    )


def mock_encoder_config() -> EncoderConfig:
    return EncoderConfig(embed_dim=12, depth=1, heads=2, mlp_ratio=2.0)


def mock_predictor_config() -> PredictorConfig:
    return PredictorConfig(embed_dim=12, depth=1, heads=2, mlp_ratio=2.0)


def mock_train_config(steps: int = 2, **kwargs) -> TrainConfig:
    # a few steps of a tiny model say nothing about collapse
    kwargs.setdefault("check_collapse", False)
    return TrainConfig(
        steps=steps,
        batch=vj.BatchSpec(batch_size=2),
        encoder=mock_encoder_config(),
        predictor=mock_predictor_config(),
        **kwargs,
    )


def mock_ramp_volume(shape=SMALL_GRID) -> np.ndarray:
    """Distinct, smoothly varying voxel values."""
    return np.arange(np.prod(shape), dtype=np.float64).reshape(shape) / np.prod(shape)


def mock_shards(out_dir: Path, n_studies: int = 10, seed: int = 0) -> Path:
    """
    Generates a small phantom corpus under `out_dir / "corpus"`, preprocesses it and packs
    it into `out_dir / "shards"`.  Returns the shard directory.
    """
    out_dir = Path(out_dir)
    config = mock_corpus_config(n_studies, seed=seed)
    corpus_dir = out_dir / "corpus"
    records = vj.build_corpus(n_studies, config, corpus_dir)
    writer = vj.ShardWriter(out_dir / "shards")
    for rec in records:
        for j, rel in enumerate(rec.volume_paths):
            raw = vj.read_volume(corpus_dir / rel)
            for pv in vj.preprocess_volume(raw):
                meta = VolumeMeta(rec.study_id, f"{rec.study_id}_{j}", rec.labels, rec.split)
                writer.append_volume(pv, meta)
    writer.finalize()
    return out_dir / "shards"


def mock_run_config(out_dir: Path, n_studies: int = 10, steps: int = 2, seed: int = 0) -> vj.RunConfig:
    return vj.RunConfig(
        seed=seed,
        paths=PathsConfig(out_dir=str(out_dir)),
        phantom=mock_corpus_config(n_studies),
        train=mock_train_config(steps),
        probe=ProbeConfig(epochs=2, patience=2, batch_size=4),
        eval=EvalConfig(replicates=50),
        latentlab=LatentLabConfig(n_reference=2, n_studies=1, max_queries=4),
    )
