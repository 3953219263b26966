"""Building blocks: patch embedding/merging, positional terms, attention, blocks."""

from __future__ import annotations

import numpy as np

from ..nn import MLP, LayerNorm, Linear, Module, parameter
from ..tensor import Tensor
from ..tensor import functional as F
from .windows import (
    WindowGrid,
    build_attention_mask,
    relative_position_index,
    relative_table_size,
    window_partition,
    window_reverse,
)


class PatchEmbed(Module):
    """Non-overlapping p^3 voxel cubes -> C channels through one shared linear map."""

    def __init__(self, patch_size: int, channels: int, rng, dtype=np.float64):
        self.patch_size = patch_size
        self.proj = Linear(patch_size**3, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        p = self.patch_size
        b, t, h, w, d, c = x.shape
        if c != 1 or h % p or w % p or d % p:
            raise ValueError(f"input {x.shape} is not (B,T,H,W,D,1) with spatial extents divisible by {p}")
        x = x.reshape(b, t, h // p, p, w // p, p, d // p, p)
        x = x.permute(0, 1, 2, 4, 6, 3, 5, 7)
        x = x.reshape(b, t, h // p, w // p, d // p, p**3)
        return self.proj(x)


class PatchMerge(Module):
    """Concatenate 2x2x2 spatial neighbours (time untouched), LayerNorm, project 8C' -> 2C'.

    Gather order along the 8C' axis is (dh, dw, dd) row-major with channels
    innermost: neighbour k = 4*dh + 2*dw + dd occupies ``[k*C', (k+1)*C')``.
    The normalisation keeps the residual stream at unit scale from stage to
    stage; the projection has no bias since the norm's shift provides one.
    """

    def __init__(self, dim: int, rng, eps: float = 1e-5, dtype=np.float64):
        self.dim = dim
        self.norm = LayerNorm(8 * dim, eps, dtype=dtype)
        self.proj = Linear(8 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def gather(self, x: Tensor) -> Tensor:
        b, t, h, w, d, c = x.shape
        if h % 2 or w % 2 or d % 2:
            raise ValueError(f"patch merging needs even spatial extents, got {(h, w, d)}")
        x = x.reshape(b, t, h // 2, 2, w // 2, 2, d // 2, 2, c)
        x = x.permute(0, 1, 2, 4, 6, 3, 5, 7, 8)
        return x.reshape(b, t, h // 2, w // 2, d // 2, 8 * c)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.norm(self.gather(x)))


class AbsolutePositionalEmbedding(Module):
    """Learnable spatial (1,H',W',D',C') and temporal (T,1,1,1,C') tables, broadcast-added."""

    def __init__(self, token_dims, dim: int, dtype=np.float64):
        t, h, w, d = token_dims
        self.spatial = parameter(np.zeros((1, h, w, d, dim), dtype=dtype))
        self.temporal = parameter(np.zeros((t, 1, 1, 1, dim), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return add_positional_embedding(x, self.spatial, self.temporal)


def add_positional_embedding(x: Tensor, spatial: Tensor, temporal: Tensor) -> Tensor:
    tokens = x.shape[-5:]
    t, h, w, d, c = tokens
    if spatial.shape != (1, h, w, d, c) or temporal.shape != (t, 1, 1, 1, c):
        raise ValueError(
            f"embeddings {spatial.shape}/{temporal.shape} do not fit tokens {tokens}"
        )
    return x + spatial + temporal


class RelativePositionBias(Module):
    """Per-head table over coordinate differences, expanded to an (h, L, L) bias."""

    def __init__(self, window, heads: int, dtype=np.float64):
        self.window = tuple(window)
        self.table = parameter(np.zeros((heads, relative_table_size(self.window)), dtype=dtype))
        self._index = relative_position_index(self.window)

    def forward(self) -> Tensor:
        return self.table[:, self._index]


class WindowAttention(Module):
    """Multi-head self-attention applied independently inside each window."""

    def __init__(self, dim: int, heads: int, rng, bias_window=None, drop: float = 0.0, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.rel_bias = RelativePositionBias(bias_window, heads, dtype=dtype) if bias_window else None
        self.drop = drop

    def _split(self, x: Tensor) -> Tensor:
        b, nw, L, _ = x.shape
        return x.reshape(b, nw, L, self.heads, self.head_dim).permute(0, 1, 3, 2, 4)

    def attention_weights(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = self._split(self.q(windows)) * self.scale
        k = self._split(self.k(windows))
        scores = F.matmul(q, F.swap_last(k))
        if self.rel_bias is not None:
            scores = scores + self.rel_bias()
        if mask is not None:
            scores = scores + Tensor(mask[:, None].astype(scores.dtype, copy=False))
        return F.softmax(scores, axis=-1)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None, rng=None) -> Tensor:
        squeeze = windows.ndim == 3
        if squeeze:
            windows = windows.reshape((1,) + windows.shape)
        b, nw, L, c = windows.shape
        attn = self.attention_weights(windows, mask)
        if self.training:
            attn = F.dropout(attn, self.drop, rng)
        out = F.matmul(attn, self._split(self.v(windows)))
        out = out.permute(0, 1, 3, 2, 4).reshape(b, nw, L, c)
        out = self.proj(out)
        return out.reshape(out.shape[1:]) if squeeze else out


class SwinBlock(Module):
    """Pre-LN block: z = A(LN(z)) + z; z = MLP(LN(z)) + z with windowed attention A."""

    def __init__(
        self,
        dim: int,
        heads: int,
        token_dims,
        window,
        shifted: bool,
        rng,
        relative_bias: bool = False,
        mlp_ratio: float = 4.0,
        drop: float = 0.0,
        eps: float = 1e-5,
        dtype=np.float64,
    ):
        self.grid = WindowGrid.build(token_dims, window, shifted=shifted)
        self.norm1 = LayerNorm(dim, eps, dtype=dtype)
        self.attn = WindowAttention(
            dim, heads, rng, bias_window=self.grid.window if relative_bias else None, drop=drop, dtype=dtype
        )
        self.norm2 = LayerNorm(dim, eps, dtype=dtype)
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), dim, rng, drop=drop, dtype=dtype)
        self.drop = drop
        self._masks: dict = {}

    def mask(self, dtype) -> np.ndarray | None:
        key = np.dtype(dtype)
        if key not in self._masks:
            self._masks[key] = build_attention_mask(self.grid, key)
        return self._masks[key]

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = window_partition(self.norm1(x), self.grid)
        h = self.attn(h, self.mask(x.dtype), rng=rng)
        h = window_reverse(h, self.grid)
        if self.training:
            h = F.dropout(h, self.drop, rng)
        x = x + h
        h = self.mlp(self.norm2(x), rng=rng)
        if self.training:
            h = F.dropout(h, self.drop, rng)
        return x + h


class GlobalAttentionBlock(SwinBlock):
    """Same residual structure with one window spanning every token (no mask, no shift)."""

    def __init__(self, dim: int, heads: int, token_dims, rng, **kwargs):
        super().__init__(dim, heads, token_dims, token_dims, False, rng, **kwargs)
