"""The four-stage 4D windowed transformer with a pooled MLP head."""

from __future__ import annotations

import numpy as np

from ..nn import MLP, LayerNorm, Module
from ..tensor import Tensor
from .config import NUM_STAGES, ModelConfig
from .layers import (
    AbsolutePositionalEmbedding,
    GlobalAttentionBlock,
    PatchEmbed,
    PatchMerge,
    SwinBlock,
)


class Stage(Module):
    def __init__(self, cfg: ModelConfig, index: int, rng):
        dtype = cfg.dtype
        dim = cfg.stage_channels(index)
        tokens = cfg.stage_token_dims(index)
        self.index = index
        self.merge = PatchMerge(dim // 2, rng, eps=cfg.ln_eps, dtype=dtype) if index > 0 else None
        self.pos = (
            AbsolutePositionalEmbedding(tokens, dim, dtype=dtype) if cfg.pos_embed_mode == "absolute" else None
        )
        common = dict(
            relative_bias=cfg.pos_embed_mode == "relative",
            mlp_ratio=cfg.mlp_ratio,
            drop=cfg.drop_rate,
            eps=cfg.ln_eps,
            dtype=dtype,
        )
        if index == NUM_STAGES - 1:
            self.blocks = [
                GlobalAttentionBlock(dim, cfg.heads[index], tokens, rng, **common) for _ in range(cfg.depths[index])
            ]
        else:
            # even positions W-MSA, odd positions SW-MSA
            self.blocks = [
                SwinBlock(dim, cfg.heads[index], tokens, cfg.window, i % 2 == 1, rng, **common)
                for i in range(cfg.depths[index])
            ]

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if self.merge is not None:
            x = self.merge(x)
        if self.pos is not None:
            x = self.pos(x)
        for block in self.blocks:
            x = block(x, rng=rng)
        return x


class PooledHead(Module):
    """Final LayerNorm, global average pool over (T, H', W', D'), then an MLP."""

    def __init__(self, cfg: ModelConfig, rng):
        dim = cfg.final_channels
        self.norm = LayerNorm(dim, cfg.ln_eps, dtype=cfg.dtype)
        self.mlp = MLP(dim, cfg.head_width, cfg.out_dim, rng, dtype=cfg.dtype)

    def pool(self, features: Tensor) -> Tensor:
        return self.norm(features).mean(axis=(1, 2, 3, 4))

    def forward(self, features: Tensor) -> Tensor:
        return self.mlp(self.pool(features))


class SwiFT(Module):
    """Patch embedding, three windowed stages, a global-attention stage, pooled head.

    ``forward`` takes ``(B, T, H, W, D, 1)`` (or a single ``(T, H, W, D, 1)``
    volume) and returns ``(B, out_dim)``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.channels, rng, dtype=cfg.dtype)
        self.stages = [Stage(cfg, s, rng) for s in range(NUM_STAGES)]
        self.head = PooledHead(cfg, rng)

    @property
    def dtype(self):
        return self.cfg.dtype

    def _prepare(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 5:
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:5]) != self.cfg.input_dims or x.shape[-1] != 1:
            raise ValueError(f"input {x.shape} does not match config input_dims {self.cfg.input_dims}")
        return x

    def features(self, x, rng=None) -> Tensor:
        x = self.patch_embed(self._prepare(x))
        for stage in self.stages:
            x = stage(x, rng=rng)
        return x

    def forward(self, x, rng=None) -> Tensor:
        return self.head(self.features(x, rng=rng))

    def astype(self, dtype) -> "SwiFT":
        super().astype(dtype)
        precision = "double" if np.dtype(dtype) == np.float64 else "single"
        self.cfg = self.cfg.with_(precision=precision)
        return self


def build_model(cfg: ModelConfig, seed: int = 0) -> SwiFT:
    return SwiFT(cfg, seed=seed)
