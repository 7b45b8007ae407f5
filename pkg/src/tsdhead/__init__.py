"""Task-aware spatially disentangled detection head on a numpy autodiff engine."""

from .detector import MODES, Detector, DetectorConfig, infer, infer_batch
from .evaluation import EvalReport, evaluate
from .geometry import Box, Detection
from .losses import PcConfig
from .tensor import ShapeError, Tensor, no_grad
from .train import TrainConfig, TrainingDiverged, train

__version__ = "0.1.0"
