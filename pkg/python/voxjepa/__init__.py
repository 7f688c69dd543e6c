from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("voxjepa")
except PackageNotFoundError:
    # running from a source checkout without an install
    __version__ = "0.0.0"

from voxjepa.utilities import copy_demo_files  # noqa: F401
from voxjepa.utilities import package_root, resources_root  # noqa: F401
from voxjepa import utilities as utils  # noqa: F401
from voxjepa import defaults  # noqa: F401
from voxjepa.errors import (  # noqa: F401
    BootstrapError,
    ConfigError,
    CorruptionError,
    DataError,
    EmptyVolumeError,
    FitError,
    ManifestError,
    NoStudiesError,
    NumericalError,
    PlacementError,
    ShapeError,
    UndefinedMetricError,
    VoxJepaError,
)
from voxjepa.volume import Modality, RawVolume, Window, read_volume, write_volume  # noqa: F401
from voxjepa.phantom import (  # noqa: F401
    CorpusConfig,
    LesionSpec,
    PhantomSpec,
    SyntheticStudy,
    build_corpus,
    flip_study,
    generate_head,
    load_corpus,
    synthesize_study,
)
from voxjepa.preprocess import PreprocessConfig, PreprocVolume, preprocess_volume  # noqa: F401
from voxjepa.shardstore import BatchSpec, ShardReader, ShardWriter, sample_batch  # noqa: F401
from voxjepa.tokenmask import (  # noqa: F401
    MaskConfig,
    MaskPlan,
    MaskScheme,
    PatchGrid,
    crop_foreground,
    patchify,
    sample_mask_plan,
)
from voxjepa.run_config import RunConfig, load_run_config  # noqa: F401
