from __future__ import annotations
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from voxjepa import defaults
from voxjepa.serde import SerdeAPI
from voxjepa.shardstore import BatchSpec
from voxjepa.tokenmask import MaskConfig


@dataclass
class EncoderConfig(SerdeAPI):
    """
    Vision-transformer encoder over 3D patch tokens.

    Attributes:
        - `embed_dim`: latent width `d`, divisible by `heads`
        - `depth`: number of pre-norm transformer blocks
        - `heads`: attention heads
        - `mlp_ratio`: hidden width of each block MLP relative to `embed_dim`
        - `patch_shape`: voxels per token along (z, y, x); the patch embedding maps
          `prod(patch_shape)` voxels to `embed_dim`
        - `ln_eps`: layer-norm epsilon
        - `init_std`: standard deviation of the normal weight initialization
        - `posenc_temperature`: base of the sinusoidal frequency ladder
    """

    embed_dim: int = defaults.EMBED_DIM
    depth: int = defaults.DEPTH
    heads: int = defaults.HEADS
    mlp_ratio: float = defaults.MLP_RATIO
    patch_shape: Tuple[int, int, int] = defaults.PATCH_SHAPE
    ln_eps: float = defaults.LN_EPS
    init_std: float = defaults.INIT_STD
    posenc_temperature: float = defaults.POSENC_TEMPERATURE

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)  # type: ignore[assignment]
        if self.embed_dim <= 0 or self.depth < 0 or self.heads <= 0:
            raise ValueError(
                f"embed_dim, heads must be > 0 and depth >= 0, got "
                f"{self.embed_dim}, {self.heads}, {self.depth}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.embed_dim < 6:
            raise ValueError(f"embed_dim {self.embed_dim} leaves no sinusoidal band per axis")

    @property
    def patch_dim(self) -> int:
        return int(np.prod(self.patch_shape))

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class PredictorConfig(SerdeAPI):
    """
    Narrow transformer that predicts target latents from context latents and mask tokens.

    Attributes:
        - `embed_dim`: predictor width; context latents are projected to it and back
        - `depth`: number of blocks
        - `heads`: attention heads
        - `mlp_ratio`: block MLP expansion
    """

    embed_dim: int = defaults.EMBED_DIM
    depth: int = defaults.PREDICTOR_DEPTH
    heads: int = defaults.HEADS
    mlp_ratio: float = defaults.MLP_RATIO

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.embed_dim < 6:
            raise ValueError(f"embed_dim {self.embed_dim} leaves no sinusoidal band per axis")

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class TrainConfig(SerdeAPI):
    """
    Pretraining run settings.

    Attributes:
        - `steps`: optimizer steps
        - `lr`: peak learning rate (linear warmup over `warmup_frac` of the run, cosine decay
          to zero afterwards)
        - `weight_decay`, `betas`, `eps`: AdamW settings
        - `warmup_frac`: fraction of steps spent warming up
        - `ema_start`, `ema_end`: teacher momentum, ramped linearly over the run
        - `smooth_l1_beta`: transition point of the smooth-L1 loss
        - `seed`: global seed; every per-instance draw derives from it
        - `augment`: apply random axis permutations and flips
        - `dtype`: "float64" (default) or "float32"
        - `threads`: workers assembling training instances
        - `collapse_floor`: smallest acceptable per-dimension teacher latent std over the run
        - `check_collapse`: fail the run with `NumericalError` when the floor is undercut
        - `batch`: batch sampler settings
        - `mask`: mask plan settings
        - `encoder`, `predictor`: architecture
    """

    steps: int = 300
    lr: float = defaults.LR
    weight_decay: float = defaults.WEIGHT_DECAY
    betas: Tuple[float, float] = defaults.ADAM_BETAS
    eps: float = defaults.ADAM_EPS
    warmup_frac: float = defaults.WARMUP_FRAC
    ema_start: float = defaults.EMA_MOMENTUM_START
    ema_end: float = defaults.EMA_MOMENTUM_END
    smooth_l1_beta: float = defaults.SMOOTH_L1_BETA
    seed: int = 0
    augment: bool = True
    dtype: str = "float64"
    threads: int = 1
    collapse_floor: float = defaults.COLLAPSE_STD_FLOOR
    check_collapse: bool = True
    batch: BatchSpec = field(default_factory=BatchSpec)
    mask: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError(f"lr and weight_decay must be >= 0, got {self.lr}, {self.weight_decay}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        if not (0.0 <= self.ema_start <= 1.0 and 0.0 <= self.ema_end <= 1.0):
            raise ValueError(f"EMA momenta must be in [0, 1], got {self.ema_start}, {self.ema_end}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.collapse_floor < 0:
            raise ValueError(f"collapse_floor must be >= 0, got {self.collapse_floor}")
