"""
Top-level run configuration: output layout plus every module config, driven by one global seed.
"""

from __future__ import annotations
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

from voxjepa.errors import ConfigError, DataError
from voxjepa.evalstats import EvalConfig
from voxjepa.latentlab import LatentLabConfig
from voxjepa.model.config import TrainConfig
from voxjepa.phantom import CorpusConfig
from voxjepa.preprocess import PreprocessConfig
from voxjepa.probe import ProbeConfig
from voxjepa.serde import SerdeAPI
from voxjepa.utilities import config_hash, derive_seed

log = logging.getLogger(__name__)

OUT_DIR_ENV = "VOXJEPA_OUT_DIR"

# sub-seeds are truncated to 32 bits so they stay portable across serde formats
SEED_MASK = 0xFFFFFFFF


@dataclass
class PathsConfig(SerdeAPI):
    """
    Output layout.  Relative stage directories resolve against `out_dir`.

    Attributes:
        - `out_dir`: run root
        - `corpus`: phantom corpus (`phantom-gen`)
        - `preproc`: preprocessed volumes (`preprocess`)
        - `shards`: packed shards and manifest (`shard-pack`)
        - `checkpoints`: pretraining outputs (`pretrain`)
        - `probe`: probe outputs (`probe-train`)
        - `reports`: evaluation and latent-space reports, one subdirectory per subcommand
    """

    out_dir: str = "runs/default"
    corpus: str = "corpus"
    preproc: str = "preproc"
    shards: str = "shards"
    checkpoints: str = "pretrain"
    probe: str = "probe"
    reports: str = "reports"

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name):
                raise ConfigError(f"paths.{f.name} must not be empty")

    def resolve(self, name: str) -> Path:
        """Absolute-or-relative path of stage directory `name` (a field of this class)."""
        if name == "out_dir":
            return Path(self.out_dir)
        try:
            value = Path(getattr(self, name))
        except AttributeError:
            raise ConfigError(f"unknown path entry {name!r}") from None
        return value if value.is_absolute() else Path(self.out_dir) / value

    def report_dir(self, subcommand: str) -> Path:
        return self.resolve("reports") / subcommand


@dataclass
class RunConfig(SerdeAPI):
    """
    Attributes:
        - `seed`: global seed; every module seed is derived from it by purpose name
        - `threads`: worker cap shared by all stages
        - `paths`: output layout
        - `phantom`: corpus generation
        - `preprocess`: preprocessing chain
        - `train`: pretraining
        - `probe`: attentive probe
        - `eval`: evaluation statistics
        - `latentlab`: reconstruction, matching and clustering
    """

    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: CorpusConfig = field(default_factory=CorpusConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    latentlab: LatentLabConfig = field(default_factory=LatentLabConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def sub_seed(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose) & SEED_MASK

    def seeded(self) -> RunConfig:
        """
        Copy whose module seeds and thread counts are derived from the global `seed` and
        `threads`.
        """
        return dataclasses.replace(
            self,
            phantom=dataclasses.replace(self.phantom, seed=self.sub_seed("phantom")),
            train=dataclasses.replace(self.train, seed=self.sub_seed("pretrain"), threads=self.threads),
            probe=dataclasses.replace(self.probe, seed=self.sub_seed("probe")),
            eval=dataclasses.replace(self.eval, seed=self.sub_seed("bootstrap"), threads=self.threads),
            latentlab=dataclasses.replace(self.latentlab, seed=self.sub_seed("latentlab")),
        )

    def with_overrides(
        self,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
        out_dir: Optional[Union[str, Path]] = None,
    ) -> RunConfig:
        """Flag overrides win over the config file; the environment wins over the file only."""
        env_out = os.environ.get(OUT_DIR_ENV)
        out = out_dir if out_dir is not None else env_out
        paths = self.paths if out is None else dataclasses.replace(self.paths, out_dir=str(out))
        return dataclasses.replace(
            self,
            seed=self.seed if seed is None else seed,
            threads=self.threads if threads is None else threads,
            paths=paths,
        )

    def hash(self) -> str:
        """Hash of the config with the output location removed."""
        pydict = self.to_pydict()
        pydict["paths"] = {k: v for k, v in pydict["paths"].items() if k != "out_dir"}
        return config_hash(pydict)


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Reads a run config file (`.json`, `.yaml`, `.msgpack`); defaults without a path."""
    if path is None:
        return RunConfig()
    return RunConfig.from_file(path)


def require_inputs(inputs: Dict[str, Path]) -> None:
    """Raises `DataError` naming every missing input of a subcommand."""
    missing = {name: str(p) for name, p in inputs.items() if not Path(p).exists()}
    if missing:
        raise DataError(f"missing input(s): {missing}")
