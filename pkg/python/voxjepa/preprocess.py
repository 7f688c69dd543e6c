"""
Preprocessing chain: resampling, percentile clipping, windowing with reduced-bit quantization,
foreground masking and normalization.
"""

from __future__ import annotations
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from voxjepa import defaults
from voxjepa.errors import ConfigError, CorruptionError, DataError
from voxjepa.serde import SerdeAPI
from voxjepa.volume import Modality, RawVolume, Window

log = logging.getLogger(__name__)


@dataclass
class WindowSpec(SerdeAPI):
    """
    Attributes:
        - `width`: window width (HU for CT)
        - `level`: window center
        - `bit_width`: 4 or 8
    """

    width: float
    level: float
    bit_width: int = 8

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be > 0, got {self.width}")
        if self.bit_width not in (4, 8):
            raise ValueError(f"bit_width must be 4 or 8, got {self.bit_width}")

    @property
    def max_code(self) -> int:
        return 2**self.bit_width - 1


def ct_window_spec(window: Window) -> WindowSpec:
    width, level, bits = defaults.CT_WINDOWS[window.name]
    return WindowSpec(width=width, level=level, bit_width=bits)


@dataclass
class PreprocVolume:
    """
    Quantized, windowed volume ready for storage.

    Attributes:
        - `codes`: uint8 codes, each below `2**bit_width`
        - `window`: window tag
        - `bit_width`: logical bits per code (4 or 8)
        - `foreground`: boolean mask, same shape as `codes`
        - `modality`: pseudo-modality of the source volume
        - `dequant_scale`, `dequant_offset`: `code * scale + offset` maps back to [0, 1]
    """

    codes: npt.NDArray[np.uint8]
    window: Window
    bit_width: int
    foreground: npt.NDArray[np.bool_]
    modality: Modality
    dequant_scale: float = 0.0
    dequant_offset: float = 0.0

    def __post_init__(self):
        if self.bit_width not in (4, 8):
            raise ValueError(f"bit_width must be 4 or 8, got {self.bit_width}")
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        self.foreground = np.asarray(self.foreground, dtype=bool)
        if self.codes.shape != self.foreground.shape:
            raise ValueError(
                f"codes shape {self.codes.shape} differs from foreground shape {self.foreground.shape}"
            )
        if self.codes.size and int(self.codes.max()) >= 2**self.bit_width:
            raise ValueError(f"codes exceed {self.bit_width}-bit range")
        if self.dequant_scale == 0.0:
            self.dequant_scale = 1.0 / (2**self.bit_width - 1)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.codes.shape  # type: ignore[return-value]


@dataclass
class PreprocessConfig(SerdeAPI):
    """
    Attributes:
        - `target_inplane_mm`: in-plane spacing after resampling
        - `target_acquisition_mm`: spacing along the acquisition axis after resampling
        - `clip_percentiles`: (lo, hi) percentiles for SYNTH_MR clipping
        - `ct_air_threshold_hu`: SYNTH_CT foreground is HU strictly above this value
        - `ct_windows`: CT windows to emit, by name
    """

    target_inplane_mm: float = defaults.TARGET_INPLANE_SPACING_MM
    target_acquisition_mm: float = defaults.TARGET_ACQUISITION_SPACING_MM
    clip_percentiles: Tuple[float, float] = defaults.CLIP_PERCENTILES
    ct_air_threshold_hu: float = defaults.CT_AIR_THRESHOLD_HU
    ct_windows: List[str] = field(default_factory=lambda: list(defaults.CT_WINDOWS))

    def __post_init__(self):
        bad = [w for w in self.ct_windows if w not in defaults.CT_WINDOWS]
        if bad:
            raise ConfigError(f"unknown CT windows {bad}; expected names from {list(defaults.CT_WINDOWS)}")
        lo, hi = self.clip_percentiles
        if not 0.0 <= lo < hi <= 100.0:
            raise ConfigError(f"clip_percentiles must satisfy 0 <= lo < hi <= 100, got {self.clip_percentiles}")


def target_spacing(
    v: RawVolume, inplane_mm: float = 1.0, acquisition_mm: float = 4.0
) -> Tuple[float, float, float]:
    spacing = [inplane_mm] * 3
    spacing[v.acquisition_axis] = acquisition_mm
    return tuple(spacing)  # type: ignore[return-value]


def resample(
    v: RawVolume,
    spacing: Optional[Tuple[float, float, float]] = None,
) -> RawVolume:
    """
    Trilinear resampling to `spacing` (default 1 mm in-plane, 4 mm along the acquisition axis).

    Output shape is `round(shape * old_spacing / new_spacing)`, at least 1 per axis.  Output voxel
    `o` samples input coordinate `o * new_spacing / old_spacing`; samples past the last voxel are
    clamped to the edge.  Axes of length 1 fall back to nearest-neighbor sampling.
    """
    spacing = spacing or target_spacing(v)
    old = np.asarray(v.spacing_mm, dtype=np.float64)
    new = np.asarray(spacing, dtype=np.float64)
    if np.array_equal(old, new):
        return v.replace_voxels(v.voxels.copy())
    shape = np.asarray(v.shape)
    out_shape = tuple(int(n) for n in np.maximum(1, np.floor(shape * old / new + 0.5)))
    order = 0 if min(v.shape) == 1 else 1
    out = ndimage.affine_transform(
        v.voxels.astype(np.float64),
        matrix=new / old,
        offset=0.0,
        output_shape=out_shape,
        order=order,
        mode="nearest",
    )
    return RawVolume(
        voxels=out,
        spacing_mm=tuple(spacing),  # type: ignore[arg-type]
        modality=v.modality,
        acquisition_axis=v.acquisition_axis,
    )


def clip_percentile(v: RawVolume, lo: float = 0.5, hi: float = 99.5) -> RawVolume:
    """
    Clips to the `lo`-th and `hi`-th percentiles (linear interpolation between order statistics).
    """
    if v.modality == Modality.SYNTH_CT:
        log.debug("clip_percentile applied to a SYNTH_CT volume")
    p_lo, p_hi = np.percentile(v.voxels.astype(np.float64), [lo, hi])
    return v.replace_voxels(np.clip(v.voxels.astype(np.float64), p_lo, p_hi))


def mr_window(v: RawVolume) -> WindowSpec:
    """The full value range of a (clipped) SYNTH_MR volume as an 8-bit window."""
    vmin = float(np.min(v.voxels))
    vmax = float(np.max(v.voxels))
    width = vmax - vmin if vmax > vmin else 1.0
    return WindowSpec(width=width, level=vmin + width / 2.0, bit_width=defaults.MR_BIT_WIDTH)


def quantize(
    values: npt.ArrayLike, w: WindowSpec
) -> npt.NDArray[np.uint8]:
    """
    `t = clamp((value - (level - width/2)) / width, 0, 1)`, `code = floor(t * (2^b - 1) + 0.5)`.
    """
    t = (np.asarray(values, dtype=np.float64) - (w.level - w.width / 2.0)) / w.width
    t = np.clip(t, 0.0, 1.0)
    return np.floor(t * w.max_code + 0.5).astype(np.uint8)


def _infer_window(v: RawVolume, w: WindowSpec) -> Window:
    if v.modality == Modality.SYNTH_MR:
        return Window.MR
    for name, preset in defaults.CT_WINDOWS.items():
        if preset == (w.width, w.level, w.bit_width):
            return Window[name]
    raise ValueError(f"no window tag given and {w} matches no CT preset")


def window_quantize(
    v: RawVolume,
    w: WindowSpec,
    window: Optional[Window] = None,
    foreground: Optional[npt.NDArray[np.bool_]] = None,
) -> PreprocVolume:
    """
    Quantizes `v` through window `w`.  The window tag defaults to `MR` for SYNTH_MR volumes and
    otherwise to the CT preset matching `w`.
    """
    if window is None:
        window = _infer_window(v, w)
    codes = quantize(v.voxels, w)
    if foreground is None:
        foreground = np.ones(v.shape, dtype=bool)
    return PreprocVolume(
        codes=codes,
        window=window,
        bit_width=w.bit_width,
        foreground=foreground,
        modality=v.modality or Modality.SYNTH_CT,
        dequant_scale=1.0 / w.max_code,
        dequant_offset=0.0,
    )


def dequantize(pv: PreprocVolume) -> npt.NDArray[np.float64]:
    return pv.codes.astype(np.float64) * pv.dequant_scale + pv.dequant_offset


def histogram_bins(values: npt.ArrayLike, n_bins: int = defaults.OTSU_BINS) -> npt.NDArray[np.int64]:
    """Bin index per value over `n_bins` equal-width bins spanning [min, max]."""
    values = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(values.min()), float(values.max())
    if vmax == vmin:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - vmin) / (vmax - vmin) * n_bins)
    return np.clip(idx, 0, n_bins - 1).astype(np.int64)


def otsu_threshold(values: npt.ArrayLike, n_bins: int = defaults.OTSU_BINS) -> Optional[int]:
    """
    Returns the bin threshold `t` in `1..n_bins-1` maximizing the between-class variance of the
    split `bin < t` / `bin >= t`, or `None` when no split separates two nonempty classes.

    Scores are compared exactly; ties go to the lowest `t`.
    """
    counts = np.bincount(histogram_bins(values, n_bins).ravel(), minlength=n_bins)
    counts_int = [int(c) for c in counts]
    moments = [i * c for i, c in enumerate(counts_int)]
    n_total = sum(counts_int)
    s_total = sum(moments)
    best_t: Optional[int] = None
    best = Fraction(0)
    n0 = 0
    s0 = 0
    for t in range(1, n_bins):
        n0 += counts_int[t - 1]
        s0 += moments[t - 1]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_total - s0
        # between-class variance times n_total^2
        score = Fraction((s0 * n1 - s1 * n0) ** 2, n0 * n1)
        if score > best:
            best = score
            best_t = t
    return best_t


def foreground_mask(
    v: RawVolume, ct_air_threshold_hu: float = defaults.CT_AIR_THRESHOLD_HU
) -> npt.NDArray[np.bool_]:
    """
    SYNTH_MR: Otsu over a 256-bin histogram, mask is voxels in bins at or above the threshold.
    SYNTH_CT: voxels with HU above `ct_air_threshold_hu`.  Air removal only.

    A volume Otsu cannot split (e.g. constant) is all foreground.
    """
    match v.modality:
        case Modality.SYNTH_CT:
            return v.voxels > ct_air_threshold_hu
        case Modality.SYNTH_MR:
            t = otsu_threshold(v.voxels)
            if t is None:
                return np.ones(v.shape, dtype=bool)
            return histogram_bins(v.voxels) >= t
        case _:
            raise ValueError("foreground_mask needs a rendered SYNTH_MR or SYNTH_CT volume")


def normalize(pv: PreprocVolume, mean: float) -> npt.NDArray[np.float32]:
    """
    Dequantized codes minus `mean`; background voxels are set to `-mean`.
    """
    out = dequantize(pv) - mean
    out[~pv.foreground] = -mean
    return out.astype(np.float32)


def preprocess_volume(
    v: RawVolume, config: Optional[PreprocessConfig] = None
) -> List[PreprocVolume]:
    """
    Full chain for one raw volume.  SYNTH_MR yields one `MR` volume; SYNTH_CT yields one volume
    per configured CT window, all sharing one foreground mask.
    """
    config = config or PreprocessConfig()
    v = resample(v, target_spacing(v, config.target_inplane_mm, config.target_acquisition_mm))
    match v.modality:
        case Modality.SYNTH_MR:
            clipped = clip_percentile(v, *config.clip_percentiles)
            fg = foreground_mask(clipped)
            return [window_quantize(clipped, mr_window(clipped), Window.MR, fg)]
        case Modality.SYNTH_CT:
            fg = foreground_mask(v, config.ct_air_threshold_hu)
            return [
                window_quantize(v, ct_window_spec(Window[name]), Window[name], fg)
                for name in config.ct_windows
            ]
        case _:
            raise DataError("cannot preprocess a volume without a pseudo-modality")


def compute_window_means(volumes: Iterable[PreprocVolume]) -> Dict[str, float]:
    """
    Mean dequantized foreground value per window, accumulated in float64.
    """
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for pv in volumes:
        values = dequantize(pv)[pv.foreground]
        sums[pv.window.name] = sums.get(pv.window.name, 0.0) + float(values.sum())
        counts[pv.window.name] = counts.get(pv.window.name, 0) + int(values.size)
    return {w: sums[w] / counts[w] for w in sorted(sums) if counts[w] > 0}


def save_preproc(path: Union[str, Path], pv: PreprocVolume) -> None:
    path = Path(path)
    try:
        np.savez_compressed(
            path,
            codes=pv.codes,
            foreground=pv.foreground,
            meta=np.array(
                [pv.window.value, pv.bit_width, list(Modality).index(pv.modality)], dtype=np.int64
            ),
            dequant=np.array([pv.dequant_scale, pv.dequant_offset], dtype=np.float64),
        )
    except OSError as err:
        raise DataError(f"failed to write preprocessed volume {path}: {err}") from err


def load_preproc(path: Union[str, Path]) -> PreprocVolume:
    path = Path(path)
    try:
        with np.load(path) as archive:
            window_value, bit_width, mod_idx = (int(x) for x in archive["meta"])
            scale, offset = (float(x) for x in archive["dequant"])
            return PreprocVolume(
                codes=archive["codes"],
                window=Window(window_value),
                bit_width=bit_width,
                foreground=archive["foreground"],
                modality=list(Modality)[mod_idx],
                dequant_scale=scale,
                dequant_offset=offset,
            )
    except OSError as err:
        raise DataError(f"cannot read preprocessed volume {path}: {err}") from err
    except (KeyError, ValueError) as err:
        raise CorruptionError(f"preprocessed volume {path} is malformed: {err}") from err
