"""Single-stage instance segmentation with spatial coefficients, at toy scale."""
from .config import Config, ConfigError
from .geometry import Box
from .heads import SipMaskNet
from .inference import infer, infer_batch, nms, select_top
from .smp import InstanceMask, assemble_masks, smp_oracle

__version__ = "0.1.0"

__all__ = [
    "Box", "Config", "ConfigError", "InstanceMask", "SipMaskNet", "assemble_masks", "infer", "infer_batch",
    "nms", "select_top", "smp_oracle",
]
