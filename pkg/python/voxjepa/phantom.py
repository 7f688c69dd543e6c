"""
Deterministic synthetic head phantoms: nested-ellipsoid anatomy, spherical lesions with known
ground-truth masks, two pseudo-modality renderings and corpus generation on disk.

Axes are (z, y, x); x is the left-right axis and voxels with x below the midline are on the
LEFT side.
"""

from __future__ import annotations
import enum
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
import polars as pl
from scipy import ndimage
from tqdm import tqdm

from voxjepa import defaults
from voxjepa.errors import ConfigError, DataError, ManifestError, PlacementError
from voxjepa.serde import SerdeAPI
from voxjepa.utilities import derive_seed, rng_for, write_json
from voxjepa.volume import Modality, RawVolume, write_volume

log = logging.getLogger(__name__)


class Tissue(enum.IntEnum):
    BG = 0
    SKULL = 1
    BRAIN = 2
    VENTRICLE = 3


class LesionKind(enum.Enum):
    HYPER = 1
    HYPO = -1


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    MIDLINE = "midline"


LATERAL_SWAPS = {
    "hyper_left": "hyper_right",
    "hyper_right": "hyper_left",
    "hypo_left": "hypo_right",
    "hypo_right": "hypo_left",
}

# labels that are sampled directly; `any_lesion` is derived from the lesion labels
SAMPLED_LABELS = (
    "hyper_left",
    "hyper_right",
    "hypo_left",
    "hypo_right",
    "midline_lesion",
    "ventriculomegaly",
    "skull_defect",
)

SPLITS = ("train", "val", "test")


@dataclass
class LesionSpec(SerdeAPI):
    """
    Attributes:
        - `kind`: HYPER raises intensity, HYPO lowers it
        - `radius_vox`: sphere radius in voxels
        - `side`: hemisphere the whole sphere must lie in, or MIDLINE
        - `label_id`: identifier unique within one study
    """

    kind: LesionKind
    radius_vox: float
    side: Side
    label_id: int

    def __post_init__(self):
        if not self.radius_vox > 0:
            raise ValueError(f"radius_vox must be positive, got {self.radius_vox}")

    @property
    def label_name(self) -> str:
        if self.side == Side.MIDLINE:
            return "midline_lesion"
        return f"{self.kind.name.lower()}_{self.side.value}"


@dataclass
class PhantomSpec(SerdeAPI):
    """
    Everything needed to synthesize one study; `seed` fully determines the output.

    Attributes:
        - `seed`: 64-bit integer seed
        - `grid_shape`: (depth, height, width) in voxels
        - `spacing_mm`: (z, y, x) voxel spacing
        - `pseudo_modality`: rendering used for the study's volume
        - `lesion_config`: lesions to inject, in order
        - `noise_std`: standard deviation of the additive noise on generic intensities
        - `ventriculomegaly`: enlarge the ventricle core
        - `skull_defect`: remove a cap of the skull shell at the top of the head
    """

    seed: int
    grid_shape: Tuple[int, int, int] = defaults.DEFAULT_GRID_SHAPE
    spacing_mm: Tuple[float, float, float] = defaults.DEFAULT_SPACING_MM
    pseudo_modality: Modality = Modality.SYNTH_CT
    lesion_config: List[LesionSpec] = field(default_factory=list)
    noise_std: float = defaults.NOISE_STD
    ventriculomegaly: bool = False
    skull_defect: bool = False

    def __post_init__(self):
        self.grid_shape = tuple(int(n) for n in self.grid_shape)  # type: ignore[assignment]
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)  # type: ignore[assignment]
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 8:
            raise ValueError(f"grid_shape components must be >= 8, got {self.grid_shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing_mm components must be > 0, got {self.spacing_mm}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        ids = [les.label_id for les in self.lesion_config]
        if len(set(ids)) != len(ids):
            raise ValueError(f"lesion label_id values must be unique, got {ids}")

    def labels(self) -> Dict[str, int]:
        """Label vector implied by the lesion config and anomalies, without rendering anything."""
        labels = {name: 0 for name in defaults.LABEL_VOCAB}
        for lesion in self.lesion_config:
            labels[lesion.label_name] = 1
            labels["any_lesion"] = 1
        labels["ventriculomegaly"] = int(self.ventriculomegaly)
        labels["skull_defect"] = int(self.skull_defect)
        return labels


@dataclass
class SyntheticStudy:
    """
    One synthesized study.

    Attributes:
        - `study_id`: identifier
        - `spec`: generating spec
        - `generic`: noisy generic intensities with lesions, before rendering
        - `volumes`: rendered volumes (one per requested pseudo-modality); `inject_lesions` alone
          leaves the single unrendered generic volume here
        - `labels`: int8 vector over `defaults.LABEL_VOCAB`
        - `lesion_masks`: per positive label, boolean voxel mask aligned with `volumes`
        - `tissue_mask`: `Tissue` codes per voxel
        - `laterality`: LEFT/RIGHT when all lateral lesions share a side
    """

    study_id: str
    spec: PhantomSpec
    generic: RawVolume
    volumes: List[RawVolume]
    labels: npt.NDArray[np.int8]
    lesion_masks: Dict[str, npt.NDArray[np.bool_]]
    tissue_mask: npt.NDArray[np.uint8]
    laterality: Optional[Side] = None

    def label_dict(self) -> Dict[str, int]:
        return {name: int(v) for name, v in zip(defaults.LABEL_VOCAB, self.labels)}

    def rendered(self, modality: Modality) -> RawVolume:
        return render_modality(self.generic, modality)


def _normalized_coords(shape: Tuple[int, int, int]) -> List[npt.NDArray[np.float64]]:
    """Open grids of coordinates relative to the grid center, divided by the head semi-axes."""
    out = []
    for axis, n in enumerate(shape):
        semi = defaults.HEAD_SEMI_AXIS_FRAC * n / 2.0
        c = (n - 1) / 2.0
        coord = (np.arange(n, dtype=np.float64) - c) / semi
        view = [1, 1, 1]
        view[axis] = n
        out.append(coord.reshape(view))
    return out


def _check_shell_fit(shape: Tuple[int, int, int]) -> None:
    for axis, n in enumerate(shape):
        semi = defaults.HEAD_SEMI_AXIS_FRAC * n / 2.0
        shell = semi * (1.0 - defaults.SKULL_INNER_SCALE)
        core = semi * defaults.VENTRICLE_SCALE
        if shell < 1.0 or core < 1.0:
            raise ValueError(
                f"grid {shape} is too small to contain the head shells: axis {axis} with {n} "
                f"voxels gives a skull shell {shell:.2f} and ventricle semi-axis {core:.2f} "
                "voxels thick (both must be >= 1)"
            )


def tissue_geometry(spec: PhantomSpec) -> npt.NDArray[np.uint8]:
    """Returns the `Tissue` code grid for `spec` (no noise, no lesions)."""
    _check_shell_fit(spec.grid_shape)
    z, y, x = _normalized_coords(spec.grid_shape)
    r2 = z**2 + y**2 + x**2
    tissue = np.full(spec.grid_shape, Tissue.BG, dtype=np.uint8)
    tissue[r2 <= 1.0] = Tissue.SKULL
    tissue[r2 <= defaults.SKULL_INNER_SCALE**2] = Tissue.BRAIN
    core = (
        defaults.VENTRICULOMEGALY_SCALE if spec.ventriculomegaly else defaults.VENTRICLE_SCALE
    )
    tissue[r2 <= core**2] = Tissue.VENTRICLE
    if spec.skull_defect:
        cap = np.broadcast_to(y < -(1.0 - defaults.SKULL_DEFECT_CAP_FRAC), spec.grid_shape)
        tissue[(tissue == Tissue.SKULL) & cap] = Tissue.BG
    return tissue


def skull_defect_mask(spec: PhantomSpec) -> npt.NDArray[np.bool_]:
    """Voxels removed from the skull shell by the `skull_defect` variant."""
    intact = tissue_geometry(
        PhantomSpec(seed=spec.seed, grid_shape=spec.grid_shape, spacing_mm=spec.spacing_mm)
    )
    return (intact == Tissue.SKULL) & (tissue_geometry(spec) == Tissue.BG)


def generate_head(spec: PhantomSpec) -> Tuple[RawVolume, npt.NDArray[np.uint8]]:
    """
    Builds the nested-ellipsoid head for `spec`.

    Returns the generic-intensity volume (with seeded additive Gaussian noise) and the tissue
    code grid.  Raises `ValueError` when the grid cannot hold the shells.
    """
    tissue = tissue_geometry(spec)
    lut = np.array(
        [defaults.TISSUE_INTENSITY[t.name] for t in Tissue], dtype=np.float64
    )
    intensity = lut[tissue]
    if spec.noise_std > 0:
        rng = rng_for(spec.seed, "noise")
        intensity = intensity + rng.normal(0.0, spec.noise_std, size=spec.grid_shape)
    volume = RawVolume(voxels=intensity, spacing_mm=spec.spacing_mm, modality=None)
    return volume, tissue


def sphere_mask(
    shape: Tuple[int, int, int], center: Tuple[int, int, int], radius: float
) -> npt.NDArray[np.bool_]:
    """Voxels whose center lies within `radius` of `center`."""
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return d2 <= radius**2


def _side_ok(x: npt.NDArray[np.int64], radius: float, side: Side, width: int) -> npt.NDArray[np.bool_]:
    cx = (width - 1) / 2.0
    if side == Side.LEFT:
        return x + radius < cx
    if side == Side.RIGHT:
        return x - radius > cx
    return np.abs(x - cx) <= 0.5


def lesion_contrast(noise_std: float) -> float:
    """Lesion intensity offset for a study with generic noise amplitude `noise_std`."""
    return defaults.LESION_CONTRAST_SNR * max(noise_std, defaults.NOISE_STD)


def _label_vector(masks: Dict[str, npt.NDArray[np.bool_]]) -> npt.NDArray[np.int8]:
    return np.array(
        [int(name in masks and bool(masks[name].any())) for name in defaults.LABEL_VOCAB],
        dtype=np.int8,
    )


def inject_lesions(
    volume: RawVolume,
    tissue_mask: npt.NDArray[np.uint8],
    lesions: List[LesionSpec],
    seed: int,
    spec: Optional[PhantomSpec] = None,
) -> SyntheticStudy:
    """
    Places spherical lesions inside BRAIN tissue on their requested side.

    Spheres are pairwise disjoint and never leave the parenchyma.  HYPER lesions add
    `lesion_contrast(spec.noise_std)` to the generic intensity, HYPO lesions subtract it.

    Returns an unrendered study: `generic` and the single entry of `volumes` are the lesioned
    generic volume, `lesion_masks` holds one mask per label (plus `any_lesion` when any lesion
    was placed).  Without `spec`, one is derived from the volume with the default noise level.
    """
    if spec is None:
        spec = PhantomSpec(
            seed=seed,
            grid_shape=volume.shape,
            spacing_mm=volume.spacing_mm,
            lesion_config=list(lesions),
        )
    contrast = lesion_contrast(spec.noise_std)
    shape = volume.shape
    voxels = volume.voxels.astype(np.float64)
    masks: Dict[str, npt.NDArray[np.bool_]] = {}
    occupied = np.zeros(shape, dtype=bool)
    sides = set()
    for lesion in lesions:
        available = (tissue_mask == Tissue.BRAIN) & ~occupied
        # distance from each available voxel to the nearest unavailable one
        dist = ndimage.distance_transform_edt(available)
        zc, yc, xc = np.nonzero(dist > lesion.radius_vox)
        keep = _side_ok(xc, lesion.radius_vox, lesion.side, shape[2])
        zc, yc, xc = zc[keep], yc[keep], xc[keep]
        if len(zc) == 0:
            raise PlacementError(
                f"cannot place {lesion.kind.name} lesion {lesion.label_id} of radius "
                f"{lesion.radius_vox} on side {lesion.side.name} in grid {shape}: no brain "
                "voxels far enough from other tissue"
            )
        rng = rng_for(seed, "lesion", lesion.label_id)
        pick = int(rng.integers(len(zc)))
        center = (int(zc[pick]), int(yc[pick]), int(xc[pick]))
        mask = sphere_mask(shape, center, lesion.radius_vox)
        occupied |= mask
        voxels[mask] += lesion.kind.value * contrast
        name = lesion.label_name
        masks[name] = masks[name] | mask if name in masks else mask
        if lesion.side != Side.MIDLINE:
            sides.add(lesion.side)
    if lesions:
        masks["any_lesion"] = occupied.copy()
    lesioned = volume.replace_voxels(voxels)
    return SyntheticStudy(
        study_id=f"seed_{spec.seed}",
        spec=spec,
        generic=lesioned,
        volumes=[lesioned],
        labels=_label_vector(masks),
        lesion_masks=masks,
        tissue_mask=tissue_mask,
        laterality=next(iter(sides)) if len(sides) == 1 else None,
    )


def _bias_field(shape: Tuple[int, int, int]) -> npt.NDArray[np.float64]:
    coords = []
    for axis, n in enumerate(shape):
        c = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        view = [1, 1, 1]
        view[axis] = n
        coords.append(c.reshape(view))
    zn, yn, xn = coords
    k = defaults.MR_BIAS_COEFFS
    return 1.0 + k["x"] * xn + k["y"] * yn + k["z"] * zn + k["xy"] * xn * yn


def render_modality(volume: RawVolume, pseudo_modality: Modality) -> RawVolume:
    """
    Maps generic intensities to a pseudo-modality.

    SYNTH_CT uses a piecewise-linear transfer function to Hounsfield-like units.  SYNTH_MR applies
    the monotone remap `MR_SCALE * (1 - exp(-MR_RATE * g))` times a smooth positive bias field.
    """
    if volume.modality is not None:
        raise ValueError(f"volume is already rendered as {volume.modality.name}")
    g = volume.voxels.astype(np.float64)
    match pseudo_modality:
        case Modality.SYNTH_CT:
            out = np.interp(g, defaults.CT_TRANSFER_KNOTS, defaults.CT_TRANSFER_HU)
        case Modality.SYNTH_MR:
            out = defaults.MR_SCALE * (1.0 - np.exp(-defaults.MR_RATE * g))
            out = out * _bias_field(volume.shape)
        case _:
            raise ValueError(f"unknown pseudo-modality {pseudo_modality}")
    return volume.replace_voxels(out, modality=pseudo_modality)


def synthesize_study(
    spec: PhantomSpec,
    study_id: Optional[str] = None,
    modalities: Optional[List[Modality]] = None,
) -> SyntheticStudy:
    """
    Runs `generate_head`, `inject_lesions` and `render_modality` for one spec.

    Arguments:
    ----------
    spec: phantom spec
    study_id: defaults to `"seed_<seed>"`
    modalities: renderings to produce, defaults to `[spec.pseudo_modality]`
    """
    generic, tissue = generate_head(spec)
    study = inject_lesions(generic, tissue, spec.lesion_config, derive_seed(spec.seed, "lesions"), spec)
    masks = study.lesion_masks
    if spec.ventriculomegaly:
        masks["ventriculomegaly"] = tissue == Tissue.VENTRICLE
    if spec.skull_defect:
        masks["skull_defect"] = skull_defect_mask(spec)
    modalities = modalities or [spec.pseudo_modality]
    return dataclasses.replace(
        study,
        study_id=study_id or study.study_id,
        volumes=[render_modality(study.generic, m) for m in modalities],
        labels=_label_vector(masks),
    )


def flip_study(study: SyntheticStudy) -> SyntheticStudy:
    """
    Mirrors a study along the left-right (x) axis, swapping lateral labels and masks.
    """

    def flip(a: npt.NDArray) -> npt.NDArray:
        return np.ascontiguousarray(a[:, :, ::-1])

    masks = {LATERAL_SWAPS.get(k, k): flip(v) for k, v in study.lesion_masks.items()}
    labels = study.label_dict()
    swapped = {LATERAL_SWAPS.get(k, k): v for k, v in labels.items()}
    laterality = {Side.LEFT: Side.RIGHT, Side.RIGHT: Side.LEFT}.get(study.laterality)  # type: ignore[arg-type]
    return SyntheticStudy(
        study_id=study.study_id,
        spec=study.spec,
        generic=study.generic.replace_voxels(flip(study.generic.voxels)),
        volumes=[v.replace_voxels(flip(v.voxels)) for v in study.volumes],
        labels=np.array([swapped[name] for name in defaults.LABEL_VOCAB], dtype=np.int8),
        lesion_masks=masks,
        tissue_mask=flip(study.tissue_mask),
        laterality=laterality,
    )


def _default_label_probs() -> Dict[str, float]:
    return {
        "hyper_left": 0.2,
        "hyper_right": 0.2,
        "hypo_left": 0.15,
        "hypo_right": 0.15,
        "midline_lesion": 0.1,
        "ventriculomegaly": 0.15,
        "skull_defect": 0.1,
    }


def _default_modality_probs() -> Dict[str, float]:
    return {Modality.SYNTH_MR.name: 0.5, Modality.SYNTH_CT.name: 0.5}


@dataclass
class CorpusConfig(SerdeAPI):
    """
    Attributes:
        - `n_studies`: number of studies to generate
        - `grid_shape`: phantom grid shape
        - `spacing_mm`: phantom voxel spacing
        - `noise_std`: generic-intensity noise
        - `label_probs`: independent per-label probabilities for the sampled labels (a long
          tail is obtained by giving some labels small probabilities)
        - `modality_probs`: probability of each pseudo-modality, keyed by name
        - `radius_range`: lesion radius drawn uniformly from this range (voxels)
        - `split_fractions`: train/val/test fractions
        - `seed`: corpus seed
    """

    n_studies: int = 200
    grid_shape: Tuple[int, int, int] = defaults.DEFAULT_GRID_SHAPE
    spacing_mm: Tuple[float, float, float] = defaults.DEFAULT_SPACING_MM
    noise_std: float = defaults.NOISE_STD
    label_probs: Dict[str, float] = field(default_factory=_default_label_probs)
    modality_probs: Dict[str, float] = field(default_factory=_default_modality_probs)
    radius_range: Tuple[float, float] = defaults.LESION_RADIUS_RANGE
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        unknown = sorted(set(self.label_probs) - set(SAMPLED_LABELS))
        if unknown:
            raise ConfigError(
                f"label_probs has unknown or derived labels {unknown}; allowed: {list(SAMPLED_LABELS)}"
            )
        for name, p in self.label_probs.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"label_probs[{name!r}] = {p} is not a probability")
        bad_mods = sorted(set(self.modality_probs) - {m.name for m in Modality})
        if bad_mods:
            raise ConfigError(f"modality_probs has unknown modalities {bad_mods}")
        if not np.isclose(sum(self.modality_probs.values()), 1.0):
            raise ConfigError(f"modality_probs must sum to 1, got {self.modality_probs}")
        if not np.isclose(sum(self.split_fractions), 1.0) or min(self.split_fractions) < 0:
            raise ConfigError(f"split_fractions must be nonnegative and sum to 1, got {self.split_fractions}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi, got {self.radius_range}")


@dataclass
class StudyRecord(SerdeAPI):
    """
    Attributes:
        - `study_id`: identifier
        - `seed`: phantom seed
        - `volume_paths`: volume files, relative to the corpus directory
        - `modality`: pseudo-modality name
        - `labels`: label name -> 0/1
        - `split`: train, val or test
        - `mask_path`: `.npz` archive with `tissue` and one array per positive label
    """

    study_id: str
    seed: int
    volume_paths: List[str]
    modality: str
    labels: Dict[str, int]
    split: str
    mask_path: str


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_counts(n: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_train = round_half_up(n * fractions[0])
    n_val = min(round_half_up(n * fractions[1]), n - n_train)
    return n_train, n_val, n - n_train - n_val


def sample_study_specs(config: CorpusConfig, n_studies: Optional[int] = None) -> List[PhantomSpec]:
    """
    Draws one `PhantomSpec` per study from `config` without rendering anything.
    """
    n = config.n_studies if n_studies is None else n_studies
    mod_names = sorted(config.modality_probs)
    mod_p = np.array([config.modality_probs[m] for m in mod_names])
    specs = []
    for i in range(n):
        rng = rng_for(config.seed, "study", i)
        seed = derive_seed(config.seed, "phantom", i)
        modality = Modality[mod_names[int(rng.choice(len(mod_names), p=mod_p))]]
        draws = {name: bool(rng.random() < config.label_probs.get(name, 0.0)) for name in SAMPLED_LABELS}
        lesions = []
        for label_id, name in enumerate(defaults.LABEL_VOCAB):
            if name in ("ventriculomegaly", "skull_defect") or not draws.get(name, False):
                continue
            radius = float(rng.uniform(*config.radius_range))
            if name == "midline_lesion":
                kind = LesionKind.HYPER if rng.random() < 0.5 else LesionKind.HYPO
                side = Side.MIDLINE
            else:
                kind_str, side_str = name.split("_")
                kind = LesionKind[kind_str.upper()]
                side = Side(side_str)
            lesions.append(LesionSpec(kind=kind, radius_vox=radius, side=side, label_id=label_id))
        specs.append(
            PhantomSpec(
                seed=seed,
                grid_shape=config.grid_shape,
                spacing_mm=config.spacing_mm,
                pseudo_modality=modality,
                lesion_config=lesions,
                noise_std=config.noise_std,
                ventriculomegaly=draws["ventriculomegaly"],
                skull_defect=draws["skull_defect"],
            )
        )
    return specs


def assign_splits(n: int, fractions: Tuple[float, float, float], seed: int) -> List[str]:
    """Seeded study-level split assignment with round-half-up train/val counts."""
    counts = split_counts(n, fractions)
    tags = np.array(sum(([s] * c for s, c in zip(SPLITS, counts)), []), dtype=object)
    order = rng_for(seed, "split").permutation(n)
    out = np.empty(n, dtype=object)
    out[order] = tags
    return [str(t) for t in out]


def prevalence_table(records: List[StudyRecord]) -> pl.DataFrame:
    """
    Per-label positive counts and prevalence for each split and for the whole corpus.
    """
    rows = []
    for split in (*SPLITS, "all"):
        subset = [r for r in records if split == "all" or r.split == split]
        for name in defaults.LABEL_VOCAB:
            positives = sum(r.labels[name] for r in subset)
            rows.append(
                {
                    "label": name,
                    "split": split,
                    "n_studies": len(subset),
                    "positives": positives,
                    "prevalence": positives / len(subset) if subset else float("nan"),
                }
            )
    return pl.DataFrame(rows)


def _write_study(spec: PhantomSpec, study_id: str, split: str, out_dir: Path) -> StudyRecord:
    study = synthesize_study(spec, study_id=study_id)
    vol_rel = f"volumes/{study_id}.vpha"
    mask_rel = f"masks/{study_id}.npz"
    write_volume(out_dir / vol_rel, study.volumes[0])
    try:
        np.savez_compressed(out_dir / mask_rel, tissue=study.tissue_mask, **study.lesion_masks)
    except OSError as err:
        raise DataError(f"failed to write mask archive {out_dir / mask_rel}: {err}") from err
    return StudyRecord(
        study_id=study_id,
        seed=spec.seed,
        volume_paths=[vol_rel],
        modality=spec.pseudo_modality.name,
        labels=study.label_dict(),
        split=split,
        mask_path=mask_rel,
    )


def build_corpus(
    n_studies: int,
    config: CorpusConfig,
    out_dir: Union[str, Path],
    threads: int = 1,
    verbose: bool = False,
) -> List[StudyRecord]:
    """
    Generates `n_studies` phantom studies under `out_dir`.

    Writes `volumes/*.vpha`, `masks/*.npz`, the `corpus.json` manifest and `prevalence.csv`,
    and returns the manifest records in study order.  Splits are disjoint by study.
    """
    if n_studies < 1:
        raise ConfigError(f"n_studies must be >= 1, got {n_studies}")
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    try:
        (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create corpus directories under {out_dir}: {err}") from err
    specs = sample_study_specs(config, n_studies)
    splits = assign_splits(n_studies, config.split_fractions, config.seed)
    ids = [f"study_{i:05d}" for i in range(n_studies)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [
            pool.submit(_write_study, spec, sid, split, out_dir)
            for spec, sid, split in zip(specs, ids, splits)
        ]
        records = [f.result() for f in tqdm(futures, desc="phantoms", disable=not verbose)]
    write_json(out_dir / "corpus.json", [r.to_pydict() for r in records])
    prevalence_table(records).write_csv(out_dir / "prevalence.csv")
    t1 = time.perf_counter()
    log.info(f"Elapsed time to build corpus of {n_studies} studies: {t1 - t0:.3g} s")
    return records


def load_corpus(path: Union[str, Path]) -> List[StudyRecord]:
    """
    Loads `corpus.json` (or the directory holding it).
    """
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.json"
    try:
        raw = json.loads(path.read_text())
    except OSError as err:
        raise DataError(f"cannot read corpus manifest {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ManifestError(f"corpus manifest {path} is not valid JSON: {err}") from err
    if not isinstance(raw, list):
        raise ManifestError(f"corpus manifest {path} must be a JSON array")
    try:
        return [StudyRecord.from_pydict(r) for r in raw]
    except ConfigError as err:
        raise ManifestError(f"corpus manifest {path}: {err}") from err


def load_masks(corpus_dir: Union[str, Path], record: StudyRecord) -> Dict[str, npt.NDArray]:
    path = Path(corpus_dir) / record.mask_path
    try:
        with np.load(path) as archive:
            return {k: archive[k] for k in archive.files}
    except OSError as err:
        raise DataError(f"cannot read mask archive {path}: {err}") from err
