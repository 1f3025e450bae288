"""Multi-modal activity recognition with spatial/temporal transformer streams,
fusion-token mid-fusion and teacher-to-student distillation, on numpy."""

from . import data, distill, model, nn, tensor
from .data import Protocol, SyntheticSpec, generate_synthetic, load_encoded, make_split
from .distill import KDConfig, evaluate, train
from .errors import (
    BoundsError,
    ConfigurationError,
    ContractError,
    DimensionError,
    IngestionError,
    MMFuseError,
    NumericError,
)
from .model import ModalitySpec, ModelConfig, StudentModel, TeacherModel, load_checkpoint, save_checkpoint
from .tensor import Tensor

__version__ = "0.1.0"
