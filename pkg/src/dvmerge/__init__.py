"""Task-vector model merging with iterative, block-wise scaled difference vectors."""

from .dvbasi import (
    RunConfig,
    RunReport,
    dvbasi_run,
    isotropic_run,
    merge_initial,
    negation_run,
    random_perturbation_run,
    single_task_boost,
    tta_run,
)
from .errors import (
    ConfigError,
    ConstraintError,
    DegenerateInputError,
    DVMergeError,
    FormatError,
    NonFiniteError,
    ShapeMismatchError,
)
from .paramspace import BlockShape, BlockVector, Checkpoint

__version__ = "0.1.0"
