"""Python bindings for the mitst glucose-prediction core."""

from ._core import (
    CheckpointError,
    InvalidInput,
    Pipeline,
    Predictor,
    UsageError,
    __version__,
    auprc,
    auroc,
    classify,
    generate_manifest,
    select_cutpoint,
    time_encoding,
)

__all__ = [
    "CheckpointError",
    "InvalidInput",
    "Pipeline",
    "Predictor",
    "UsageError",
    "__version__",
    "auprc",
    "auroc",
    "classify",
    "generate_manifest",
    "select_cutpoint",
    "time_encoding",
]
