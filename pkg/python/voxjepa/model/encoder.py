from __future__ import annotations
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from voxjepa.autodiff.tensor import Tensor, as_tensor, no_grad
from voxjepa.model.config import EncoderConfig
from voxjepa.model.layers import LayerNorm, Linear, Module, make_blocks, sincos_posenc
from voxjepa.tokenmask import PatchGrid


@dataclass
class LatentSequence:
    """
    Attributes:
        - `coords`: (T, 3) integer patch coordinates, unique
        - `latents`: (T, d) tensor, row `i` belongs to `coords[i]`
    """

    coords: npt.NDArray[np.int64]
    latents: Tensor

    def __len__(self) -> int:
        return int(self.coords.shape[0])


def check_unique_coords(coords: npt.NDArray, what: str) -> None:
    if len(np.unique(coords, axis=0)) != len(coords):
        raise ValueError(f"{what}: token coordinates are not unique")


class Encoder(Module):
    """Patch embedding plus fixed sinusoidal positions, pre-norm blocks and a final norm."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.patch_embed = Linear(config.patch_dim, config.embed_dim, rng, config.init_std)
        self.blocks = make_blocks(
            config.depth,
            config.embed_dim,
            config.heads,
            config.mlp_dim,
            rng,
            config.init_std,
            config.ln_eps,
        )
        self.norm = LayerNorm(config.embed_dim, config.ln_eps)

    def __call__(self, payloads: npt.ArrayLike, coords: npt.ArrayLike) -> Tensor:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        x = as_tensor(np.asarray(payloads).reshape(len(coords), -1))
        if len(coords) == 0:
            raise ValueError("encode: empty token sequence")
        if x.shape[1] != self.config.patch_dim:
            raise ValueError(
                f"encode: payload width {x.shape[1]} does not match patch_dim {self.config.patch_dim}"
            )
        pos = sincos_posenc(coords, self.config.embed_dim, self.config.posenc_temperature)
        h = self.patch_embed(x) + pos
        for block in self.blocks:
            h = block(h)
        return self.norm(h)


def encode(encoder: Encoder, payloads: npt.ArrayLike, coords: npt.ArrayLike) -> LatentSequence:
    """One latent per input token, coordinates carried through unchanged."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    check_unique_coords(coords, "encode")
    return LatentSequence(coords=coords, latents=encoder(payloads, coords))


def encode_grid(encoder: Encoder, grid: PatchGrid) -> LatentSequence:
    """Inference over every token of `grid` (no truncation), off the tape."""
    with no_grad():
        return encode(encoder, grid.flat_payloads(), grid.coords)
