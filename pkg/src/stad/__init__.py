"""End-to-end spatio-temporal action detection with semi-supervised training.

Modules, bottom up: ``geometry`` (boxes, IoU, NMS), ``losses``, ``assignment``
(dense targets and proposal matching), ``model``, ``tla`` (pseudo-label
assignment and baselines), ``data`` (synthetic benchmark and CSV I/O),
``evaluation`` (frame-mAP), ``trainer``, ``config`` and ``cli``.
"""

from .data import CLASS_NAMES, DataConfig, generate_synthetic
from .evaluation import EvalResult, frame_map
from .geometry import Box, Detection, giou, iou, nms
from .model import ActionDetector, ModelConfig
from .tla import PseudoLabelSet, hungarian, tla_assign
from .trainer import SSADConfig, TrainConfig, burn_in, evaluate, run_ssad

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "DataConfig", "generate_synthetic", "EvalResult", "frame_map",
    "Box", "Detection", "giou", "iou", "nms", "ActionDetector", "ModelConfig",
    "PseudoLabelSet", "hungarian", "tla_assign", "SSADConfig", "TrainConfig",
    "burn_in", "evaluate", "run_ssad",
]
