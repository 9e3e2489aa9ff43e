"""SAM-style encoder / mask decoder at configurable scale."""

from . import checkpoint
from .config import PRESETS, ModelConfig, preset
from .decoder import attention_names, base_tokens, decode_masks, dense_pe
from .encoder import encode_image, encoder_block, window_merge, window_partition
from .model import SamModel, build_model, forward_segment, infer_shapes, predict_masks
from .registry import GROUPS, ParamEntry, ParamRegistry
