"""Module for general functions: package paths, seed derivation, hashing and atomic output."""

from __future__ import annotations
import contextlib
import hashlib
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Iterator, List, Union

import numpy as np

log = logging.getLogger(__name__)


def package_root() -> Path:
    """
    Returns the package root directory.
    """
    path = Path(__file__).parent
    return path


def resources_root() -> Path:
    """
    Returns the resources root directory.
    """
    path = package_root() / "resources"
    return path


def copy_demo_files(demo_path: Path = Path("demos")) -> List[Path]:
    """
    Copies demo scripts from the package directory into `demo_path`, prefixing each with
    the package version it was copied from.

    # Warning
    Existing files of the same name are overwritten.
    """
    from voxjepa import __version__

    demo_path = Path(demo_path)
    demo_path.mkdir(parents=True, exist_ok=True)
    prepend_str = (
        f"# %% Copied from voxjepa version 'v{__version__}'. "
        "Guaranteed compatibility with this version only.\n"
    )
    copied = []
    for src_file in sorted((package_root() / "demos").glob("*demo*.py")):
        if src_file.name == "test_demos.py":
            continue
        dest_file = demo_path / src_file.name
        shutil.copyfile(src_file, dest_file)
        with open(dest_file, "r+") as file:
            content = file.readlines()
            file.seek(0)
            file.writelines([prepend_str] + content)
        log.info(f"Saved {dest_file.name} to {dest_file}")
        copied.append(dest_file)
    return copied


def show_plots() -> bool:
    """
    Returns true if plots should be displayed based on `SHOW_PLOTS` environment variable.
    `SHOW_PLOTS` defaults to true, and to set it false, run `SHOW_PLOTS=false python your_script.py`
    """
    return (
        os.environ.get(
            # name of environment variable
            "SHOW_PLOTS",
            # defaults to true if not provided
            "true",
            # only true if provided input is exactly "true", case insensitive
        ).lower()
        == "true"
    )


def derive_seed(seed: int, *purpose: Union[str, int]) -> int:
    """
    Returns a 64-bit sub-seed that is a pure function of `seed` and the `purpose` parts.

    Arguments:
    ----------
    seed: global seed
    purpose: any number of strings or integers naming the consumer, e.g.
        `derive_seed(7, "pretrain", "instance", 12)`
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in purpose:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(seed: int, *purpose: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(pydict: Any) -> str:
    """
    Returns hex sha256 of the canonical JSON form of `pydict`.
    """
    return hashlib.sha256(canonical_json(pydict).encode()).hexdigest()


def write_json(path: Path, obj: Any, indent: int = 2) -> None:
    """
    Writes `obj` as JSON with sorted keys so that reruns produce identical bytes.
    """
    path = Path(path)
    with open(path, "w") as file:
        json.dump(obj, file, indent=indent, sort_keys=True)
        file.write("\n")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """
    Writes `data` to a sibling temporary file and renames it over `path`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as file:
            file.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(tmp)
        raise


@contextlib.contextmanager
def atomic_output_dir(dest: Path) -> Iterator[Path]:
    """
    Yields a temporary directory next to `dest`; on clean exit its contents are promoted into
    `dest` (replacing same-named entries), on error the temporary directory is removed and
    `dest` is left untouched.
    """
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=dest.parent, prefix=f".{dest.name}.partial."))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    dest.mkdir(parents=True, exist_ok=True)
    for item in sorted(tmp.iterdir()):
        target = dest / item.name
        if target.is_dir() and not target.is_symlink():
            shutil.rmtree(target)
        os.replace(item, target)
    shutil.rmtree(tmp, ignore_errors=True)
    log.debug(f"Promoted outputs into {dest}")
