"""Volume types shared by the phantom, preprocessing and reconstruction code, plus the
phantom volume file format (64-byte little-endian header followed by float32 voxels)."""

from __future__ import annotations
import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from voxjepa import defaults
from voxjepa.errors import CorruptionError, DataError
from voxjepa.utilities import atomic_write_bytes


class Modality(enum.Enum):
    SYNTH_MR = 1
    SYNTH_CT = 2


class Window(enum.Enum):
    MR = 0
    CT_BRAIN = 1
    CT_BLOOD = 2
    CT_BONE = 3


# modality code 0 marks generic, not yet rendered, intensities
_MODALITY_CODES = {None: 0, Modality.SYNTH_MR: 1, Modality.SYNTH_CT: 2}
_CODE_MODALITIES = {v: k for k, v in _MODALITY_CODES.items()}

# magic, version, shape (3 x u32), spacing (3 x f64), modality code, acquisition axis, padding
VOLUME_HEADER = struct.Struct("<4sI3I3dBB18x")
assert VOLUME_HEADER.size == defaults.VOLUME_HEADER_BYTES


@dataclass
class RawVolume:
    """
    A single scalar volume in (z, y, x) voxel order.

    Attributes:
        - `voxels`: 3D float32 grid
        - `spacing_mm`: voxel spacing along (z, y, x)
        - `modality`: pseudo-modality, `None` for generic phantom intensities that have not
          been rendered yet
        - `acquisition_axis`: index of the thick-slice axis
    """

    voxels: npt.NDArray[np.float32]
    spacing_mm: Tuple[float, float, float]
    modality: Optional[Modality] = None
    acquisition_axis: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"RawVolume expects 3 dimensions, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)  # type: ignore[assignment]
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing_mm}")
        if self.acquisition_axis not in (0, 1, 2):
            raise ValueError(f"acquisition_axis must be 0, 1 or 2, got {self.acquisition_axis}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("RawVolume voxels must be finite")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]

    def replace_voxels(
        self, voxels: npt.ArrayLike, modality: Union[Optional[Modality], str] = "keep"
    ) -> RawVolume:
        return RawVolume(
            voxels=np.asarray(voxels, dtype=np.float32),
            spacing_mm=self.spacing_mm,
            modality=self.modality if modality == "keep" else modality,  # type: ignore[arg-type]
            acquisition_axis=self.acquisition_axis,
        )


def encode_volume(volume: RawVolume) -> bytes:
    header = VOLUME_HEADER.pack(
        defaults.VOLUME_MAGIC,
        defaults.VOLUME_VERSION,
        *volume.shape,
        *volume.spacing_mm,
        _MODALITY_CODES[volume.modality],
        volume.acquisition_axis,
    )
    return header + volume.voxels.astype("<f4").tobytes(order="C")


def write_volume(path: Union[str, Path], volume: RawVolume) -> Path:
    """
    Writes `volume` to `path` in the phantom volume file format.
    """
    path = Path(path)
    try:
        atomic_write_bytes(path, encode_volume(volume))
    except OSError as err:
        raise DataError(f"failed to write volume file {path}: {err}") from err
    return path


def read_volume(path: Union[str, Path]) -> RawVolume:
    """
    Reads a phantom volume file, validating header and payload size.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DataError(f"failed to read volume file {path}: {err}") from err
    if len(data) < VOLUME_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the {VOLUME_HEADER.size}-byte header")
    magic, version, d, h, w, sz, sy, sx, mod_code, acq_axis = VOLUME_HEADER.unpack_from(data)
    if magic != defaults.VOLUME_MAGIC:
        raise CorruptionError(f"{path}: bad magic {magic!r}, expected {defaults.VOLUME_MAGIC!r}")
    if version != defaults.VOLUME_VERSION:
        raise CorruptionError(f"{path}: unsupported version {version}")
    expected = VOLUME_HEADER.size + 4 * d * h * w
    if len(data) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes for shape {(d, h, w)}, got {len(data)}")
    if mod_code not in _CODE_MODALITIES:
        raise CorruptionError(f"{path}: unknown modality code {mod_code}")
    voxels = np.frombuffer(data, dtype="<f4", offset=VOLUME_HEADER.size).reshape(d, h, w)
    return RawVolume(
        voxels=voxels.astype(np.float32),
        spacing_mm=(sz, sy, sx),
        modality=_CODE_MODALITIES[mod_code],
        acquisition_axis=acq_axis,
    )
