from .config import ConfigError, ModelConfig, desk_config, paper_config, tiny_config
from .layers import (
    AbsolutePositionalEmbedding,
    GlobalAttentionBlock,
    PatchEmbed,
    PatchMerge,
    RelativePositionBias,
    SwinBlock,
    WindowAttention,
    add_positional_embedding,
)
from .network import PooledHead, SwiFT, build_model
from .windows import (
    WindowGrid,
    build_attention_mask,
    relative_position_index,
    window_partition,
    window_reverse,
)

__all__ = [
    "AbsolutePositionalEmbedding",
    "ConfigError",
    "GlobalAttentionBlock",
    "ModelConfig",
    "PatchEmbed",
    "PatchMerge",
    "PooledHead",
    "RelativePositionBias",
    "SwiFT",
    "SwinBlock",
    "WindowAttention",
    "WindowGrid",
    "add_positional_embedding",
    "build_attention_mask",
    "build_model",
    "desk_config",
    "paper_config",
    "relative_position_index",
    "tiny_config",
    "window_partition",
    "window_reverse",
]
