"""Covariate-dependent HMM for defensive marking at corner kicks."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("cornermark")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .kernels import BACKEND
from .model import CdhmmParams, MarkingBinGrid, TransitionWeights, infer_sequence
from .tracking import CornerSequence, Dataset, load_dataset, save_dataset
from .training import EmConfig, batch_train, em_fit, load_model, save_model

__all__ = [
    "BACKEND", "CdhmmParams", "CornerSequence", "Dataset", "EmConfig", "MarkingBinGrid",
    "TransitionWeights", "__version__", "batch_train", "em_fit", "infer_sequence",
    "load_dataset", "load_model", "save_dataset", "save_model",
]
