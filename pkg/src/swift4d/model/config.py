"""Architectural hyperparameters and the per-stage shapes they imply."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

POS_EMBED_MODES = ("absolute", "relative")
HEAD_KINDS = ("binary_logit", "scalar_regression", "embedding")
PRECISIONS = {"single": np.float32, "double": np.float64}
NUM_STAGES = 4


class ConfigError(ValueError):
    """A configuration violates one of the model's structural invariants."""


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, int, int, int] = (8, 24, 24, 24)
    patch_size: int = 3
    channels: int = 8
    depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    window: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (2, 2, 4, 4)
    mlp_ratio: float = 4.0
    pos_embed_mode: str = "absolute"
    head_kind: str = "binary_logit"
    embed_dim: int = 32
    head_hidden: int | None = None
    drop_rate: float = 0.0
    ln_eps: float = 1e-5
    precision: str = "single"

    def __post_init__(self):
        for name in ("input_dims", "depths", "window", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    # ------------------------------------------------------------ validation
    def validate(self) -> None:
        for name in ("input_dims", "depths", "window", "heads"):
            if len(getattr(self, name)) != NUM_STAGES:
                raise ConfigError(f"{name} must have 4 entries, got {getattr(self, name)}")
        if min(self.input_dims) < 1 or min(self.window) < 1 or min(self.heads) < 1:
            raise ConfigError("input_dims, window and heads must be positive")
        if min(self.depths) < 0 or self.depths[-1] < 1:
            raise ConfigError(f"depths must be non-negative with a global final stage, got {self.depths}")
        if self.patch_size < 1 or self.channels < 1:
            raise ConfigError("patch_size and channels must be positive")
        for axis, extent in zip("HWD", self.input_dims[1:]):
            if extent % self.patch_size:
                raise ConfigError(f"{axis}={extent} is not divisible by patch_size={self.patch_size}")
            tokens = extent // self.patch_size
            if tokens % 2 ** (NUM_STAGES - 1):
                raise ConfigError(
                    f"{axis} token extent {tokens} cannot be halved {NUM_STAGES - 1} times by patch merging"
                )
        for s in range(NUM_STAGES):
            if self.stage_channels(s) % self.heads[s]:
                raise ConfigError(
                    f"stage {s + 1}: channels {self.stage_channels(s)} not divisible by heads {self.heads[s]}"
                )
        if self.pos_embed_mode not in POS_EMBED_MODES:
            raise ConfigError(f"pos_embed_mode must be one of {POS_EMBED_MODES}, got {self.pos_embed_mode!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.mlp_ratio <= 0 or not 0.0 <= self.drop_rate < 1.0 or self.embed_dim < 1:
            raise ConfigError("mlp_ratio > 0, 0 <= drop_rate < 1 and embed_dim >= 1 are required")

    # ------------------------------------------------------------ geometry
    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def stage_channels(self, stage: int) -> int:
        """Channel width of 0-based ``stage``."""
        return self.channels * 2**stage

    def stage_token_dims(self, stage: int) -> tuple[int, int, int, int]:
        t, h, w, d = self.input_dims
        div = self.patch_size * 2**stage
        return (t, h // div, w // div, d // div)

    def stage_tokens(self, stage: int) -> int:
        return int(np.prod(self.stage_token_dims(stage)))

    def mlp_hidden(self, stage: int) -> int:
        return int(round(self.stage_channels(stage) * self.mlp_ratio))

    @property
    def final_channels(self) -> int:
        return self.stage_channels(NUM_STAGES - 1)

    @property
    def out_dim(self) -> int:
        return self.embed_dim if self.head_kind == "embedding" else 1

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.final_channels

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def paper_config(**overrides) -> ModelConfig:
    """The published architecture: 20x96^3 input, P=6, C=36, depths 2/2/6/2, 4^4 windows."""
    base = dict(
        input_dims=(20, 96, 96, 96),
        patch_size=6,
        channels=36,
        depths=(2, 2, 6, 2),
        window=(4, 4, 4, 4),
        heads=(3, 6, 12, 24),
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config that still supports three merges; used for gradient checks."""
    base = dict(
        input_dims=(8, 16, 16, 16),
        patch_size=2,
        channels=4,
        depths=(2, 2, 2, 2),
        window=(2, 2, 2, 2),
        heads=(1, 2, 2, 4),
        precision="double",
    )
    base.update(overrides)
    return ModelConfig(**base)
