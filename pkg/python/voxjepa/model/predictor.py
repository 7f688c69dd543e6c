from __future__ import annotations

import numpy as np
import numpy.typing as npt

from voxjepa.autodiff import ops
from voxjepa.autodiff.tensor import Tensor, parameter
from voxjepa.model.config import EncoderConfig, PredictorConfig
from voxjepa.model.encoder import LatentSequence, check_unique_coords
from voxjepa.model.layers import LayerNorm, Linear, Module, make_blocks, sincos_posenc


class Predictor(Module):
    """
    Maps context latents into the predictor width, appends one shared learnable mask token per
    target (plus the target's sinusoidal position), runs joint self-attention and projects the
    target rows back to the encoder width.
    """

    def __init__(self, config: PredictorConfig, encoder: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.encoder_dim = encoder.embed_dim
        self.temperature = encoder.posenc_temperature
        std = encoder.init_std
        self.embed = Linear(encoder.embed_dim, config.embed_dim, rng, std)
        self.mask_token = parameter(rng.normal(0.0, std, size=config.embed_dim))
        self.blocks = make_blocks(
            config.depth, config.embed_dim, config.heads, config.mlp_dim, rng, std, encoder.ln_eps
        )
        self.norm = LayerNorm(config.embed_dim, encoder.ln_eps)
        self.proj = Linear(config.embed_dim, encoder.embed_dim, rng, std)

    def __call__(self, ctx: LatentSequence, target_coords: npt.ArrayLike) -> Tensor:
        return predict_targets(self, ctx, target_coords)


def predict_targets(predictor: Predictor, ctx: LatentSequence, target_coords: npt.ArrayLike) -> Tensor:
    """
    Returns `(len(target_coords), d)` predicted latents in the order of `target_coords`.
    """
    target_coords = np.asarray(target_coords, dtype=np.int64).reshape(-1, 3)
    n_t = len(target_coords)
    if n_t == 0:
        return Tensor(np.zeros((0, predictor.encoder_dim)))
    check_unique_coords(target_coords, "predict_targets")
    ctx_set = {tuple(c) for c in ctx.coords.tolist()}
    overlap = [tuple(c) for c in target_coords.tolist() if tuple(c) in ctx_set]
    if overlap:
        raise ValueError(
            f"predict_targets: {len(overlap)} target coordinates overlap the context, e.g. {overlap[0]}"
        )
    pd = predictor.config.embed_dim
    ctx_h = predictor.embed(ctx.latents)
    tgt_h = predictor.mask_token + sincos_posenc(target_coords, pd, predictor.temperature)
    h = ops.concat([ctx_h, tgt_h], axis=0)
    for block in predictor.blocks:
        h = block(h)
    h = predictor.norm(h)
    n_c = len(ctx)
    return predictor.proj(h[n_c : n_c + n_t])
