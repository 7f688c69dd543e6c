"""
Tokenization into anisotropic 3D patches, truncation to a bounded patch window, context/target
mask plans and paired axis-permutation/flip augmentation.
"""

from __future__ import annotations
import enum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from voxjepa import defaults
from voxjepa.errors import ConfigError, EmptyVolumeError
from voxjepa.serde import SerdeAPI
from voxjepa.utilities import derive_seed, rng_for
from voxjepa.volume import Modality

log = logging.getLogger(__name__)


class MaskScheme(enum.Enum):
    MULTI_BLOCK_TARGET = 0
    SMALL_BLOCK_CONTEXT = 1


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class PatchGrid:
    """
    Foreground tokens of one (padded) volume.

    Attributes:
        - `patch_shape`: voxels per patch along (z, y, x)
        - `grid_dims`: patches per axis (after any crop)
        - `coords`: (T, 3) integer patch indices, unique, in row-major order
        - `payloads`: (T, *patch_shape) voxel blocks
        - `foreground_flags`: boolean lattice of shape `grid_dims`, True where a token is kept
        - `volume_shape`: unpadded voxel shape the lattice covers (per axis, counted from the
          lattice origin)
        - `origin`: patch index of `coords == 0` in the uncropped lattice
    """

    patch_shape: Tuple[int, int, int]
    grid_dims: Tuple[int, int, int]
    coords: npt.NDArray[np.int64]
    payloads: npt.NDArray[np.float64]
    foreground_flags: npt.NDArray[np.bool_]
    volume_shape: Tuple[int, int, int]
    origin: Tuple[int, int, int] = (0, 0, 0)

    @property
    def n_tokens(self) -> int:
        return int(self.coords.shape[0])

    def flat_payloads(self) -> npt.NDArray[np.float64]:
        return self.payloads.reshape(self.n_tokens, -1)

    def subset(self, ids: npt.ArrayLike) -> PatchGrid:
        """Grid holding only tokens `ids` (order kept as given)."""
        ids = np.asarray(ids, dtype=np.int64)
        flags = np.zeros(self.grid_dims, dtype=bool)
        kept = self.coords[ids]
        flags[kept[:, 0], kept[:, 1], kept[:, 2]] = True
        return PatchGrid(
            patch_shape=self.patch_shape,
            grid_dims=self.grid_dims,
            coords=kept,
            payloads=self.payloads[ids],
            foreground_flags=flags,
            volume_shape=self.volume_shape,
            origin=self.origin,
        )


def patchify(
    volume: npt.ArrayLike,
    mask: npt.ArrayLike,
    patch_shape: Tuple[int, int, int] = defaults.PATCH_SHAPE,
    fg_frac: float = defaults.TOKEN_FOREGROUND_FRAC,
) -> PatchGrid:
    """
    Zero-pads `volume` (and `mask` with False) to multiples of `patch_shape` and keeps tokens
    whose foreground fraction exceeds `fg_frac`.
    """
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if volume.shape != mask.shape or volume.ndim != 3:
        raise ValueError(f"volume {volume.shape} and mask {mask.shape} must be equal 3D shapes")
    dims = tuple(-(-n // p) for n, p in zip(volume.shape, patch_shape))
    pad = [(0, d * p - n) for d, p, n in zip(dims, patch_shape, volume.shape)]
    vol_p = np.pad(volume, pad, constant_values=0.0)
    mask_p = np.pad(mask, pad, constant_values=False)
    pz, py, px = patch_shape
    blocks = vol_p.reshape(dims[0], pz, dims[1], py, dims[2], px).transpose(0, 2, 4, 1, 3, 5)
    mblocks = mask_p.reshape(dims[0], pz, dims[1], py, dims[2], px).transpose(0, 2, 4, 1, 3, 5)
    frac = mblocks.reshape(*dims, -1).mean(axis=-1)
    flags = frac > fg_frac
    if not flags.any():
        raise EmptyVolumeError(
            f"volume of shape {volume.shape} has no token above {fg_frac:.3g} foreground"
        )
    coords = np.argwhere(flags).astype(np.int64)
    return PatchGrid(
        patch_shape=tuple(patch_shape),  # type: ignore[arg-type]
        grid_dims=dims,  # type: ignore[arg-type]
        coords=coords,
        payloads=np.ascontiguousarray(blocks[flags]),
        foreground_flags=flags,
        volume_shape=tuple(volume.shape),  # type: ignore[arg-type]
    )


def _crop_window(grid: PatchGrid, starts: List[int], max_per_axis: int) -> PatchGrid:
    stops = [s + min(d, max_per_axis) for s, d in zip(starts, grid.grid_dims)]
    lo = np.array(starts)
    hi = np.array(stops)
    keep = np.all((grid.coords >= lo) & (grid.coords < hi), axis=1)
    dims = tuple(int(h - s) for s, h in zip(starts, stops))
    vol_shape = tuple(
        int(max(0, min(n - s * p, d * p)))
        for n, s, d, p in zip(grid.volume_shape, starts, dims, grid.patch_shape)
    )
    return PatchGrid(
        patch_shape=grid.patch_shape,
        grid_dims=dims,  # type: ignore[arg-type]
        coords=grid.coords[keep] - lo,
        payloads=grid.payloads[keep],
        foreground_flags=grid.foreground_flags[
            starts[0] : stops[0], starts[1] : stops[1], starts[2] : stops[2]
        ].copy(),
        volume_shape=vol_shape,  # type: ignore[arg-type]
        origin=tuple(int(o + s) for o, s in zip(grid.origin, starts)),  # type: ignore[arg-type]
    )


def truncate_crop(
    grid: PatchGrid, max_per_axis: int = defaults.MAX_PATCHES_PER_AXIS, seed: int = 0
) -> PatchGrid:
    """
    Restricts every axis longer than `max_per_axis` patches to a contiguous window whose start is
    uniform over the valid positions.  Coordinates are re-based to the window.

    Never raises: a window that misses every foreground token gives a grid with no tokens, and
    `crop_foreground` redraws in that case.
    """
    if not any(d > max_per_axis for d in grid.grid_dims):
        return grid
    rng = np.random.default_rng(seed)
    starts = [
        int(rng.integers(0, d - max_per_axis + 1)) if d > max_per_axis else 0 for d in grid.grid_dims
    ]
    return _crop_window(grid, starts, max_per_axis)


def crop_foreground(
    grid: PatchGrid,
    max_per_axis: int = defaults.MAX_PATCHES_PER_AXIS,
    seed: int = 0,
    max_draws: int = defaults.CROP_REDRAWS,
) -> PatchGrid:
    """
    `truncate_crop` with seed `seed`, redrawn with derived seeds while the window holds no
    token.  After `max_draws` empty windows, the window is anchored on a seeded foreground token
    (start uniform over the positions that contain it), so the result always has tokens.
    """
    if grid.n_tokens == 0:
        raise EmptyVolumeError("cannot crop an empty patch grid")
    for k in range(max_draws):
        draw_seed = seed if k == 0 else derive_seed(seed, "crop-redraw", k)
        cropped = truncate_crop(grid, max_per_axis, draw_seed)
        if cropped.n_tokens:
            return cropped
    rng = rng_for(seed, "crop-anchor")
    anchor = grid.coords[int(rng.integers(grid.n_tokens))]
    starts = []
    for c, d in zip(anchor.tolist(), grid.grid_dims):
        if d <= max_per_axis:
            starts.append(0)
            continue
        lo, hi = max(0, c - max_per_axis + 1), min(c, d - max_per_axis)
        starts.append(int(rng.integers(lo, hi + 1)))
    log.debug(f"crop anchored on token {anchor.tolist()} after {max_draws} empty windows")
    return _crop_window(grid, starts, max_per_axis)


def _default_context_ratio() -> Dict[str, float]:
    return dict(defaults.CONTEXT_RATIO)


@dataclass
class MaskConfig(SerdeAPI):
    """
    Attributes:
        - `masked_fraction`: MULTI_BLOCK_TARGET adds blocks until at least this fraction is
          masked (before dropout)
        - `context_ratio`: SMALL_BLOCK_CONTEXT context fraction per modality name
        - `dropout`: fraction of context tokens moved into the target
        - `min_block_extent`: smallest block extent, in patches
        - `max_per_axis`: truncation limit, in patches
        - `fg_frac`: a token is kept when more than this fraction of its voxels is foreground
    """

    masked_fraction: float = defaults.MULTI_BLOCK_MASKED_FRAC
    context_ratio: Dict[str, float] = field(default_factory=_default_context_ratio)
    dropout: float = defaults.PATCH_DROPOUT
    min_block_extent: int = defaults.MIN_BLOCK_EXTENT
    max_per_axis: int = defaults.MAX_PATCHES_PER_AXIS
    fg_frac: float = defaults.TOKEN_FOREGROUND_FRAC

    def __post_init__(self):
        if not 0.0 < self.masked_fraction < 1.0:
            raise ConfigError(f"masked_fraction must lie in (0, 1), got {self.masked_fraction}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name, r in self.context_ratio.items():
            if name not in Modality.__members__ or not 0.0 < r < 1.0:
                raise ConfigError(f"context_ratio[{name!r}] = {r} is invalid")
        if self.min_block_extent < 1 or self.max_per_axis < 1:
            raise ConfigError("min_block_extent and max_per_axis must be >= 1")
        if not 0.0 <= self.fg_frac < 1.0:
            raise ConfigError(f"fg_frac must lie in [0, 1), got {self.fg_frac}")


@dataclass
class MaskPlan:
    """
    Disjoint context/target token index sets over one `PatchGrid`.

    Attributes:
        - `context_ids`, `target_ids`: sorted token indices
        - `scheme`: sampling scheme
        - `dropout_moved`: number of context tokens moved into the target by patch dropout
        - `modality`: modality the plan was sampled for
        - `n_tokens`: tokens in the grid
        - `masked_fraction`: target fraction before dropout
    """

    context_ids: npt.NDArray[np.int64]
    target_ids: npt.NDArray[np.int64]
    scheme: MaskScheme
    dropout_moved: int
    modality: Modality
    n_tokens: int
    masked_fraction: float

    @property
    def context_fraction(self) -> float:
        return len(self.context_ids) / (len(self.context_ids) + len(self.target_ids))


def _block_extent(d: int, rng: np.random.Generator, min_extent: int) -> int:
    if d <= min_extent:
        return d
    return int(np.clip(round_half_up(np.exp(rng.uniform(np.log(min_extent), np.log(d)))), min_extent, d))


def sample_mask_plan(
    grid: PatchGrid,
    scheme: MaskScheme,
    modality: Modality,
    seed: int,
    config: Optional[MaskConfig] = None,
) -> MaskPlan:
    """
    Samples a context/target split of the grid's tokens, then applies patch dropout.

    MULTI_BLOCK_TARGET adds axis-aligned blocks (log-uniform extents between `min_block_extent`
    and the axis extent, centered at random tokens) until the masked fraction reaches
    `masked_fraction`; masked tokens are the target.  SMALL_BLOCK_CONTEXT takes the
    `round(context_ratio * T)` tokens nearest a random center under a randomly scaled L-infinity
    distance as the context.  Dropout then moves `round(dropout * |context|)` uniformly chosen
    context tokens into the target.  Context always keeps at least one token.
    """
    config = config or MaskConfig()
    n = grid.n_tokens
    if n < 2:
        raise EmptyVolumeError(f"mask plans need at least 2 tokens, grid has {n}")
    rng = np.random.default_rng(seed)
    coords = grid.coords
    match scheme:
        case MaskScheme.MULTI_BLOCK_TARGET:
            masked = np.zeros(n, dtype=bool)
            while masked.mean() < config.masked_fraction:
                center = coords[int(rng.integers(n))]
                extents = np.array(
                    [_block_extent(d, rng, config.min_block_extent) for d in grid.grid_dims]
                )
                lo = center - extents // 2
                masked |= np.all((coords >= lo) & (coords < lo + extents), axis=1)
            if masked.all():
                masked[int(rng.integers(n))] = False
            context = np.flatnonzero(~masked)
        case MaskScheme.SMALL_BLOCK_CONTEXT:
            ratio = config.context_ratio[modality.name]
            n_ctx = min(max(1, round_half_up(ratio * n)), n - 1)
            center = coords[int(rng.integers(n))]
            scale = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=3))
            dist = np.max(np.abs(coords - center) * scale, axis=1)
            context = np.sort(np.argsort(dist, kind="stable")[:n_ctx])
        case _:
            raise ValueError(f"unknown mask scheme {scheme}")
    masked_fraction = 1.0 - len(context) / n
    k = min(round_half_up(config.dropout * len(context)), len(context) - 1)
    moved = rng.choice(context, size=k, replace=False) if k > 0 else np.empty(0, dtype=np.int64)
    context = np.setdiff1d(context, moved)
    target = np.setdiff1d(np.arange(n, dtype=np.int64), context)
    return MaskPlan(
        context_ids=context.astype(np.int64),
        target_ids=target.astype(np.int64),
        scheme=scheme,
        dropout_moved=int(k),
        modality=modality,
        n_tokens=n,
        masked_fraction=float(masked_fraction),
    )


@dataclass
class AugmentSpec(SerdeAPI):
    """
    Output axis `i` is input axis `axis_permutation[i]`; `flips[i]` reverses output axis `i`.

    Attributes:
        - `axis_permutation`: permutation of (0, 1, 2)
        - `flips`: per output axis
    """

    axis_permutation: Tuple[int, int, int] = (0, 1, 2)
    flips: Tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        self.axis_permutation = tuple(int(a) for a in self.axis_permutation)  # type: ignore[assignment]
        self.flips = tuple(bool(f) for f in self.flips)  # type: ignore[assignment]
        if sorted(self.axis_permutation) != [0, 1, 2]:
            raise ValueError(f"axis_permutation must permute (0, 1, 2), got {self.axis_permutation}")
        if len(self.flips) != 3:
            raise ValueError(f"flips needs 3 entries, got {self.flips}")

    def inverse(self) -> AugmentSpec:
        perm = self.axis_permutation
        inv = tuple(int(i) for i in np.argsort(perm))
        flips = [False] * 3
        for i, f in enumerate(self.flips):
            flips[perm[i]] = f
        return AugmentSpec(axis_permutation=inv, flips=tuple(flips))  # type: ignore[arg-type]

    def preserves_lattice(self, patch_shape: Tuple[int, int, int]) -> bool:
        return tuple(patch_shape[p] for p in self.axis_permutation) == tuple(patch_shape)


def _augment_array(x: npt.NDArray, aug: AugmentSpec, lead: int = 0) -> npt.NDArray:
    """Applies `aug` to the 3 axes following `lead` leading axes."""
    axes = tuple(range(lead)) + tuple(lead + p for p in aug.axis_permutation)
    out = np.transpose(x, axes)
    flip_axes = tuple(lead + i for i, f in enumerate(aug.flips) if f)
    if flip_axes:
        out = np.flip(out, axis=flip_axes)
    return np.ascontiguousarray(out)


def apply_augment(
    x: Union[npt.NDArray, PatchGrid], aug: AugmentSpec
) -> Union[npt.NDArray, PatchGrid]:
    """
    Permutes and flips a volume (any permutation) or a `PatchGrid` (permutations that keep
    `patch_shape` unchanged; others must be applied to the volume before `patchify`).
    """
    if isinstance(x, PatchGrid):
        return _augment_grid(x, aug)
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"apply_augment expects a 3D volume, got shape {x.shape}")
    return _augment_array(x, aug)


def _augment_grid(grid: PatchGrid, aug: AugmentSpec) -> PatchGrid:
    if not aug.preserves_lattice(grid.patch_shape):
        raise ValueError(
            f"permutation {aug.axis_permutation} changes patch shape {grid.patch_shape}; "
            "apply it to the volume before patchify"
        )
    perm = list(aug.axis_permutation)
    dims = tuple(grid.grid_dims[p] for p in perm)
    coords = grid.coords[:, perm].copy()
    for i, f in enumerate(aug.flips):
        if f:
            coords[:, i] = dims[i] - 1 - coords[:, i]
    payloads = _augment_array(grid.payloads, aug, lead=1)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    return PatchGrid(
        patch_shape=grid.patch_shape,
        grid_dims=dims,  # type: ignore[arg-type]
        coords=coords[order],
        payloads=payloads[order],
        foreground_flags=_augment_array(grid.foreground_flags, aug),
        volume_shape=tuple(grid.volume_shape[p] for p in perm),  # type: ignore[arg-type]
        origin=tuple(grid.origin[p] for p in perm),  # type: ignore[arg-type]
    )


def random_augment(
    rng: np.random.Generator, patch_shape: Optional[Tuple[int, int, int]] = None
) -> AugmentSpec:
    """
    Uniform random permutation and independent fair flips.  With `patch_shape`, only
    permutations that keep the patch lattice are drawn.
    """
    perms = list(itertools.permutations(range(3)))
    if patch_shape is not None:
        perms = [p for p in perms if tuple(patch_shape[i] for i in p) == tuple(patch_shape)]
    perm = perms[int(rng.integers(len(perms)))]
    flips = tuple(bool(f) for f in rng.integers(0, 2, size=3))
    return AugmentSpec(axis_permutation=perm, flips=flips)  # type: ignore[arg-type]


def context_fraction_stats(plans: List[MaskPlan], min_plans: int = 100) -> Dict[str, float]:
    """
    Median visible-context fraction `|context| / (|context| + |target|)` per modality name.
    """
    by_modality: Dict[str, List[float]] = {}
    for plan in plans:
        by_modality.setdefault(plan.modality.name, []).append(plan.context_fraction)
    out = {}
    for name, fracs in sorted(by_modality.items()):
        if len(fracs) < min_plans:
            log.warning(f"only {len(fracs)} plans for {name}; medians below {min_plans} plans are noisy")
        out[name] = float(np.median(fracs))
    return out


def plan_to_pydict(plan: MaskPlan, grid: Optional[PatchGrid] = None) -> Dict:
    """JSON-ready form of a plan, with token coordinates when `grid` is given."""
    out = {
        "context": [int(i) for i in plan.context_ids],
        "target": [int(i) for i in plan.target_ids],
        "scheme": plan.scheme.name,
        "modality": plan.modality.name,
        "dropout_moved": plan.dropout_moved,
        "masked_fraction": plan.masked_fraction,
    }
    if grid is not None:
        out["context_coords"] = grid.coords[plan.context_ids].tolist()
        out["target_coords"] = grid.coords[plan.target_ids].tolist()
        out["grid_dims"] = list(grid.grid_dims)
        out["origin"] = list(grid.origin)
    return out
