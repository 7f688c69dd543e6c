"""
Parameter checkpoints: one flat blob of little-endian float64 values plus a JSON sidecar
listing `{name, shape, offset}` for each tensor (offset counted in elements).
"""

from __future__ import annotations
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from voxjepa.errors import CorruptionError
from voxjepa.utilities import atomic_write_bytes, canonical_json

log = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f8")


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(
    path: Union[str, Path],
    tensors: Dict[str, npt.NDArray],
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Writes `tensors` (in sorted name order) to `path` and the sidecar to `path + ".json"`.
    Returns the blob path.
    """
    path = Path(path)
    records = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=BLOB_DTYPE)
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    atomic_write_bytes(path, b"".join(chunks))
    sidecar = {"dtype": "<f8", "count": offset, "tensors": records, "meta": meta or {}}
    atomic_write_bytes(sidecar_path(path), (canonical_json(sidecar) + "\n").encode())
    log.debug(f"Wrote {len(records)} tensors ({offset} values) to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path],
) -> Tuple[Dict[str, npt.NDArray], Dict[str, Any]]:
    """
    Returns `(tensors, meta)`.  Raises `CorruptionError` when the blob length disagrees with the
    sidecar or a tensor region runs past the blob.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise CorruptionError(f"checkpoint {path} or its sidecar {side} is missing")
    try:
        sidecar = json.loads(side.read_text())
        records = sidecar["tensors"]
    except (json.JSONDecodeError, KeyError) as err:
        raise CorruptionError(f"checkpoint sidecar {side} is unreadable: {err}") from err
    raw = path.read_bytes()
    if len(raw) % BLOB_DTYPE.itemsize != 0:
        raise CorruptionError(f"checkpoint {path} has {len(raw)} bytes, not a multiple of 8")
    flat = np.frombuffer(raw, dtype=BLOB_DTYPE)
    if "count" in sidecar and flat.size != sidecar["count"]:
        raise CorruptionError(
            f"checkpoint {path} holds {flat.size} values, sidecar expects {sidecar['count']}"
        )
    tensors: Dict[str, npt.NDArray] = {}
    for rec in records:
        shape = tuple(int(s) for s in rec["shape"])
        start = int(rec["offset"])
        stop = start + int(np.prod(shape, dtype=np.int64))
        if start < 0 or stop > flat.size:
            raise CorruptionError(
                f"checkpoint {path}: tensor {rec['name']!r} region [{start}, {stop}) "
                f"exceeds {flat.size} values"
            )
        tensors[rec["name"]] = flat[start:stop].reshape(shape).astype(np.float64)
    return tensors, sidecar.get("meta", {})
