"""Two-input multi-focus image fusion with attention, built on a small numpy autodiff engine."""

from .network import ABLATION_MODES, AttentionMaps, FusionNetwork, dump_attention, forward
from .tensor import ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["ABLATION_MODES", "AttentionMaps", "FusionNetwork", "ShapeError", "Tensor", "dump_attention", "forward"]
