"""
Append-only binary shards with a JSON index manifest.

Shard layout: a 64-byte little-endian header (magic `VJSH`, u32 version, zero padding) followed by
concatenated entry payloads.  Each entry stores its codes (8-bit codes verbatim, 4-bit codes two
per byte with the earlier voxel in the low nibble) followed by its foreground mask packed with
`numpy.packbits`.  Readers memory-map shards and hand out views over the stored bytes.
"""

from __future__ import annotations
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from voxjepa import defaults
from voxjepa.errors import ConfigError, CorruptionError, DataError, ManifestError, NoStudiesError
from voxjepa.preprocess import PreprocVolume
from voxjepa.serde import SerdeAPI
from voxjepa.utilities import atomic_write_bytes
from voxjepa.volume import Modality, Window

log = logging.getLogger(__name__)

SHARD_HEADER = struct.Struct("<4sI56x")
assert SHARD_HEADER.size == defaults.SHARD_HEADER_BYTES

MANIFEST_NAME = "manifest.json"
_CRC_CHUNK = 1 << 20


def packed_length(n_voxels: int, bit_width: int) -> int:
    return (n_voxels + 1) // 2 if bit_width == 4 else n_voxels


def pack_codes(codes: npt.NDArray[np.uint8], bit_width: int) -> bytes:
    """Row-major codes as bytes; 4-bit codes are paired low nibble first."""
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if bit_width == 8:
        return flat.tobytes()
    if bit_width != 4:
        raise ValueError(f"bit_width must be 4 or 8, got {bit_width}")
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_codes(
    payload: npt.NDArray[np.uint8], bit_width: int, shape: Tuple[int, ...]
) -> npt.NDArray[np.uint8]:
    n = int(np.prod(shape))
    if bit_width == 8:
        return np.asarray(payload[:n], dtype=np.uint8).reshape(shape)
    out = np.empty(2 * payload.size, dtype=np.uint8)
    out[0::2] = payload & 0x0F
    out[1::2] = payload >> 4
    return out[:n].reshape(shape)


@dataclass
class ShardFile(SerdeAPI):
    """
    Attributes:
        - `path`: shard path relative to the manifest directory
        - `byte_length`: total file size including the header
        - `crc32`: CRC-32 of the whole file
    """

    path: str
    byte_length: int
    crc32: int


@dataclass
class ShardEntry(SerdeAPI):
    """
    Index record for one stored volume.

    Attributes:
        - `study_id`, `volume_id`: identifiers
        - `window`, `modality`: enum names
        - `shape`: voxel grid shape
        - `bit_width`: 4 or 8
        - `shard`: index into the manifest's `shards`
        - `offset`, `length`, `crc32`: byte range and checksum of the packed codes
        - `mask_offset`, `mask_length`, `mask_crc32`: same for the packed foreground mask
        - `dequant_scale`, `dequant_offset`: code to [0, 1] mapping
        - `labels`: study labels
        - `split`: train, val or test
    """

    study_id: str
    volume_id: str
    window: str
    modality: str
    shape: Tuple[int, int, int]
    bit_width: int
    shard: int
    offset: int
    length: int
    crc32: int
    mask_offset: int
    mask_length: int
    mask_crc32: int
    dequant_scale: float
    dequant_offset: float
    labels: Dict[str, int] = field(default_factory=dict)
    split: str = "train"

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class ShardManifest(SerdeAPI):
    """
    Attributes:
        - `version`: shard format version
        - `shards`: shard files
        - `entries`: index records, in write order
        - `window_means`: per-window mean of dequantized training foreground voxels
        - `config_hash`: hash of the config that produced the shards
    """

    version: int = defaults.SHARD_VERSION
    shards: List[ShardFile] = field(default_factory=list)
    entries: List[ShardEntry] = field(default_factory=list)
    window_means: Dict[str, float] = field(default_factory=dict)
    config_hash: str = ""


@dataclass
class VolumeMeta:
    study_id: str
    volume_id: str
    labels: Dict[str, int]
    split: str = "train"


def file_crc32(path: Path) -> int:
    crc = 0
    with open(path, "rb") as file:
        while chunk := file.read(_CRC_CHUNK):
            crc = zlib.crc32(chunk, crc)
    return crc


class ShardWriter:
    """
    Single-writer shard builder; one shard file per split.

    Training-split foreground means are accumulated per window while volumes are appended and
    stored in the manifest by `finalize`.
    """

    def __init__(self, out_dir: Union[str, Path], config_hash: str = ""):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.entries: List[ShardEntry] = []
        self._files: Dict[str, BinaryIO] = {}
        self._shard_index: Dict[str, int] = {}
        self._positions: Dict[str, int] = {}
        self._sums: Dict[str, float] = {}
        self._counts: Dict[str, int] = {}
        self._finalized = False

    def _shard_path(self, split: str) -> Path:
        return self.out_dir / f"shard_{split}.bin"

    def _open(self, split: str) -> BinaryIO:
        if split not in self._files:
            path = self._shard_path(split)
            try:
                fh = open(path, "wb")
                fh.write(SHARD_HEADER.pack(defaults.SHARD_MAGIC, defaults.SHARD_VERSION))
            except OSError as err:
                raise DataError(f"cannot create shard {path}: {err}") from err
            self._files[split] = fh
            self._shard_index[split] = len(self._shard_index)
            self._positions[split] = SHARD_HEADER.size
        return self._files[split]

    def append_volume(self, pv: PreprocVolume, meta: VolumeMeta) -> ShardEntry:
        """
        Appends `pv` to the shard of `meta.split` and returns its index record.
        """
        if self._finalized:
            raise DataError("cannot append to a finalized ShardWriter")
        fh = self._open(meta.split)
        codes = pack_codes(pv.codes, pv.bit_width)
        mask = np.packbits(pv.foreground.ravel()).tobytes()
        offset = self._positions[meta.split]
        try:
            fh.write(codes)
            fh.write(mask)
        except OSError as err:
            raise DataError(f"write to shard {self._shard_path(meta.split)} failed: {err}") from err
        entry = ShardEntry(
            study_id=meta.study_id,
            volume_id=meta.volume_id,
            window=pv.window.name,
            modality=pv.modality.name,
            shape=tuple(int(n) for n in pv.shape),  # type: ignore[arg-type]
            bit_width=pv.bit_width,
            shard=self._shard_index[meta.split],
            offset=offset,
            length=len(codes),
            crc32=zlib.crc32(codes),
            mask_offset=offset + len(codes),
            mask_length=len(mask),
            mask_crc32=zlib.crc32(mask),
            dequant_scale=float(pv.dequant_scale),
            dequant_offset=float(pv.dequant_offset),
            labels=dict(meta.labels),
            split=meta.split,
        )
        self._positions[meta.split] = offset + len(codes) + len(mask)
        self.entries.append(entry)
        if meta.split == "train":
            values = pv.codes[pv.foreground].astype(np.float64) * pv.dequant_scale + pv.dequant_offset
            self._sums[entry.window] = self._sums.get(entry.window, 0.0) + float(values.sum())
            self._counts[entry.window] = self._counts.get(entry.window, 0) + int(values.size)
        return entry

    def finalize(self, window_means: Optional[Dict[str, float]] = None) -> ShardManifest:
        """
        Closes all shards, checksums them and writes `manifest.json` atomically.
        """
        for split, fh in self._files.items():
            try:
                fh.close()
            except OSError as err:
                raise DataError(f"closing shard {self._shard_path(split)} failed: {err}") from err
        shards = []
        for split in sorted(self._shard_index, key=self._shard_index.__getitem__):
            path = self._shard_path(split)
            shards.append(
                ShardFile(path=path.name, byte_length=path.stat().st_size, crc32=file_crc32(path))
            )
        if window_means is None:
            window_means = {
                w: self._sums[w] / self._counts[w] for w in sorted(self._sums) if self._counts[w]
            }
        manifest = ShardManifest(
            shards=shards,
            entries=list(self.entries),
            window_means=window_means,
            config_hash=self.config_hash,
        )
        atomic_write_bytes(self.out_dir / MANIFEST_NAME, manifest.to_json().encode())
        self._finalized = True
        log.info(f"Finalized {len(self.entries)} entries into {len(shards)} shard(s) at {self.out_dir}")
        return manifest


@dataclass
class VolumeView:
    """
    View over one stored entry.  `codes`, `foreground` and `normalized` decode on demand.
    """

    entry: ShardEntry
    payload: npt.NDArray[np.uint8]
    reader: ShardReader

    @property
    def window(self) -> Window:
        return Window[self.entry.window]

    @property
    def modality(self) -> Modality:
        return Modality[self.entry.modality]

    def codes(self) -> npt.NDArray[np.uint8]:
        return unpack_codes(self.payload, self.entry.bit_width, self.entry.shape)

    def foreground(self) -> npt.NDArray[np.bool_]:
        packed = self.reader._region(
            self.entry.shard, self.entry.mask_offset, self.entry.mask_length
        )
        if self.reader.check_reads and zlib.crc32(packed) != self.entry.mask_crc32:
            raise CorruptionError(
                f"mask checksum mismatch for entry {self.entry.volume_id} ({self.entry.window})"
            )
        bits = np.unpackbits(packed, count=self.entry.n_voxels)
        return bits.astype(bool).reshape(self.entry.shape)

    def dequantized(self) -> npt.NDArray[np.float64]:
        return self.codes().astype(np.float64) * self.entry.dequant_scale + self.entry.dequant_offset

    def normalized(self, mean: Optional[float] = None) -> npt.NDArray[np.float32]:
        """Dequantized minus the training mean of this window; background is `-mean`."""
        if mean is None:
            mean = self.reader.manifest.window_means.get(self.entry.window, 0.0)
        out = self.dequantized() - mean
        out[~self.foreground()] = -mean
        return out.astype(np.float32)

    def to_preproc(self) -> PreprocVolume:
        return PreprocVolume(
            codes=self.codes(),
            window=self.window,
            bit_width=self.entry.bit_width,
            foreground=self.foreground(),
            modality=self.modality,
            dequant_scale=self.entry.dequant_scale,
            dequant_offset=self.entry.dequant_offset,
        )


class ShardReader:
    """
    Read-only access to finalized shards through memory maps.  Safe for concurrent readers.

    Arguments:
    ----------
    manifest_path: path to `manifest.json` or its directory
    verify: also check every shard and entry checksum while opening
    access_log: record every `(shard, offset, length)` byte range handed out
    check_reads: check entry checksums on every read
    """

    def __init__(
        self,
        manifest_path: Union[str, Path],
        verify: bool = False,
        access_log: bool = False,
        check_reads: bool = True,
    ):
        path = Path(manifest_path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        self.root = path.parent
        try:
            text = path.read_text()
        except OSError as err:
            raise DataError(f"cannot read shard manifest {path}: {err}") from err
        try:
            self.manifest = ShardManifest.from_pydict(json.loads(text))
        except (json.JSONDecodeError, ConfigError) as err:
            raise ManifestError(f"shard manifest {path} is malformed: {err}") from err
        self.check_reads = check_reads
        self.access_log: Optional[List[Tuple[int, int, int]]] = [] if access_log else None
        self._maps = [self._open_shard(i, s) for i, s in enumerate(self.manifest.shards)]
        self._validate_entries()
        if verify:
            self.verify()
        self._studies: Dict[str, Dict[str, ShardEntry]] = {}
        for entry in self.manifest.entries:
            self._studies.setdefault(entry.study_id, {})[entry.window] = entry

    def _open_shard(self, index: int, shard: ShardFile) -> np.memmap:
        path = self.root / shard.path
        if not path.exists():
            raise DataError(f"shard file missing: {path}")
        size = path.stat().st_size
        if size != shard.byte_length:
            raise CorruptionError(
                f"shard {path} is {size} bytes, manifest declares {shard.byte_length} (truncated or modified)"
            )
        if size < SHARD_HEADER.size:
            raise CorruptionError(f"shard {path} is shorter than its header")
        mm = np.memmap(path, dtype=np.uint8, mode="r")
        magic, version = SHARD_HEADER.unpack(bytes(mm[: SHARD_HEADER.size]))
        if magic != defaults.SHARD_MAGIC or version != self.manifest.version:
            raise CorruptionError(f"shard {path} has bad header (magic {magic!r}, version {version})")
        return mm

    def _validate_entries(self) -> None:
        last_offset: Dict[int, int] = {}
        for entry in self.manifest.entries:
            name = f"{entry.volume_id} ({entry.window})"
            if not 0 <= entry.shard < len(self.manifest.shards):
                raise ManifestError(f"entry {name} references unknown shard {entry.shard}")
            if entry.bit_width not in (4, 8):
                raise ManifestError(f"entry {name} has invalid bit_width {entry.bit_width}")
            if entry.offset <= last_offset.get(entry.shard, SHARD_HEADER.size - 1):
                raise ManifestError(f"entry {name} offset {entry.offset} is not strictly increasing")
            last_offset[entry.shard] = entry.offset
            byte_length = self.manifest.shards[entry.shard].byte_length
            for off, length, what in (
                (entry.offset, entry.length, "codes"),
                (entry.mask_offset, entry.mask_length, "mask"),
            ):
                if off < SHARD_HEADER.size or off + length > byte_length:
                    raise ManifestError(
                        f"entry {name} {what} range [{off}, {off + length}) lies outside shard "
                        f"{self.manifest.shards[entry.shard].path} of {byte_length} bytes"
                    )
            if entry.length != packed_length(entry.n_voxels, entry.bit_width):
                raise ManifestError(
                    f"entry {name} length {entry.length} does not decode to shape {entry.shape}"
                )
            if entry.mask_length != (entry.n_voxels + 7) // 8:
                raise ManifestError(f"entry {name} mask length does not match shape {entry.shape}")

    def verify(self) -> None:
        """Full checksum pass over every shard file and entry."""
        for shard in self.manifest.shards:
            if file_crc32(self.root / shard.path) != shard.crc32:
                raise CorruptionError(f"checksum mismatch for shard {self.root / shard.path}")
        for entry in self.manifest.entries:
            mm = self._maps[entry.shard]
            if zlib.crc32(mm[entry.offset : entry.offset + entry.length]) != entry.crc32:
                raise CorruptionError(f"checksum mismatch for entry {entry.volume_id} ({entry.window})")
            mask = mm[entry.mask_offset : entry.mask_offset + entry.mask_length]
            if zlib.crc32(mask) != entry.mask_crc32:
                raise CorruptionError(f"mask checksum mismatch for entry {entry.volume_id} ({entry.window})")

    def _region(self, shard: int, offset: int, length: int) -> npt.NDArray[np.uint8]:
        if self.access_log is not None:
            self.access_log.append((shard, offset, length))
        return self._maps[shard][offset : offset + length]

    @property
    def entries(self) -> List[ShardEntry]:
        return self.manifest.entries

    def study_ids(self, split: Optional[str] = None) -> List[str]:
        return [
            sid
            for sid, by_window in self._studies.items()
            if split is None or next(iter(by_window.values())).split == split
        ]

    def study_entries(self, study_id: str) -> Dict[str, ShardEntry]:
        try:
            return self._studies[study_id]
        except KeyError:
            raise DataError(f"study {study_id} not found in shard manifest") from None

    def read_volume(self, entry: ShardEntry) -> VolumeView:
        """
        Returns a view over the stored codes of `entry`; raises `CorruptionError` on checksum
        mismatch.
        """
        payload = self._region(entry.shard, entry.offset, entry.length)
        if self.check_reads and zlib.crc32(payload) != entry.crc32:
            raise CorruptionError(f"checksum mismatch for entry {entry.volume_id} ({entry.window})")
        return VolumeView(entry=entry, payload=payload, reader=self)


def _default_window_probs() -> Dict[str, float]:
    return dict(defaults.CT_WINDOW_PROBS)


@dataclass
class BatchSpec(SerdeAPI):
    """
    Attributes:
        - `batch_size`: draws per step
        - `window_probs`: CT window probabilities, keyed by window name
        - `modality_mix`: `natural` draws studies uniformly, `balanced` first draws a modality
          uniformly among those present
        - `seed`: sampler seed; a batch is a pure function of `(seed, step)`
        - `split`: split to draw from
    """

    batch_size: int = 4
    window_probs: Dict[str, float] = field(default_factory=_default_window_probs)
    modality_mix: str = "natural"
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        bad = sorted(set(self.window_probs) - set(defaults.CT_WINDOWS))
        if bad:
            raise ConfigError(f"window_probs has unknown CT windows {bad}")
        if min(self.window_probs.values(), default=0.0) < 0 or not np.isclose(
            sum(self.window_probs.values()), 1.0
        ):
            raise ConfigError(f"window_probs must be nonnegative and sum to 1, got {self.window_probs}")
        if self.modality_mix not in ("natural", "balanced"):
            raise ConfigError(f"modality_mix must be 'natural' or 'balanced', got {self.modality_mix!r}")


def choose_window(
    available: List[str], window_probs: Dict[str, float], rng: np.random.Generator, study_id: str = ""
) -> str:
    """
    Draws one CT window among `available` with `window_probs`, renormalizing (with a warning) when
    some configured windows are missing or carry no mass.
    """
    names = list(defaults.CT_WINDOWS)
    probs = np.array([window_probs.get(n, 0.0) if n in available else 0.0 for n in names])
    if probs.sum() <= 0 or any(window_probs.get(n, 0.0) > 0 and n not in available for n in names):
        log.warning(
            f"empty window stratum for study {study_id}: resampling among available windows {available}"
        )
        if probs.sum() <= 0:
            probs = np.array([1.0 if n in available else 0.0 for n in names])
    probs = probs / probs.sum()
    return names[int(rng.choice(len(names), p=probs))]


def sample_batch(
    reader: ShardReader, spec: BatchSpec, step: int
) -> List[Tuple[VolumeView, Window]]:
    """
    Draws `spec.batch_size` (volume view, window) pairs.  SYNTH_CT studies get exactly one window
    per draw; SYNTH_MR studies use their `MR` volume.  Deterministic given `(spec.seed, step)`.
    """
    study_ids = reader.study_ids(spec.split)
    if not study_ids:
        raise NoStudiesError(f"no studies in split {spec.split!r} of the shard manifest")
    rng = np.random.default_rng([spec.seed, step])
    by_modality: Dict[str, List[str]] = {}
    for sid in study_ids:
        modality = next(iter(reader.study_entries(sid).values())).modality
        by_modality.setdefault(modality, []).append(sid)
    out = []
    for _ in range(spec.batch_size):
        if spec.modality_mix == "balanced":
            mods = sorted(by_modality)
            pool = by_modality[mods[int(rng.integers(len(mods)))]]
        else:
            pool = study_ids
        sid = pool[int(rng.integers(len(pool)))]
        by_window = reader.study_entries(sid)
        if Window.MR.name in by_window:
            window = Window.MR.name
        else:
            window = choose_window(sorted(by_window), spec.window_probs, rng, sid)
        out.append((reader.read_volume(by_window[window]), Window[window]))
    return out
