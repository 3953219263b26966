"""4D window partitioning, cyclic-shift masks and relative-position indexing.

Token tensors are laid out ``(B, T, H, W, D, C)``; windows come out as
``(B, num_windows, L, C)`` with ``L = prod(window)`` and tokens inside a window
in row-major (t, h, w, d) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor
from ..tensor import functional as F

SPATIAL_AXES = (1, 2, 3, 4)
MASK_VALUE = {np.dtype(np.float32): -1e4, np.dtype(np.float64): -1e9}


@dataclass(frozen=True)
class WindowGrid:
    token_dims: tuple[int, int, int, int]
    window: tuple[int, int, int, int]
    shift: tuple[int, int, int, int]

    @classmethod
    def build(cls, token_dims, window, shifted: bool = False, clip: bool = True) -> "WindowGrid":
        """Grid for one block.

        With ``clip`` (the model's behaviour) an axis whose token extent does
        not exceed the window uses the whole extent as window and is never
        shifted; otherwise the shifted grid is displaced by ``window // 2``.
        """
        token_dims = tuple(int(n) for n in token_dims)
        win, shift = [], []
        for n, w in zip(token_dims, window):
            w = int(w)
            if clip and n <= w:
                win.append(n)
                shift.append(0)
            else:
                win.append(w)
                shift.append(w // 2 if shifted else 0)
        return cls(token_dims, tuple(win), tuple(shift))

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(math.ceil(n / w) for n, w in zip(self.token_dims, self.window))

    @property
    def padded_dims(self) -> tuple[int, ...]:
        return tuple(c * w for c, w in zip(self.counts, self.window))

    @property
    def pad(self) -> tuple[int, ...]:
        return tuple(p - n for p, n in zip(self.padded_dims, self.token_dims))

    @property
    def num_windows(self) -> int:
        return int(np.prod(self.counts))

    @property
    def window_len(self) -> int:
        return int(np.prod(self.window))

    @property
    def shifted(self) -> bool:
        return any(self.shift)

    @property
    def needs_mask(self) -> bool:
        return self.shifted or any(self.pad)


def _with_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 5:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 6:
        raise ValueError(f"expected (B,) T, H, W, D, C tokens, got shape {x.shape}")
    return x, False


def window_partition(x: Tensor, grid: WindowGrid) -> Tensor:
    """Pad, cyclically shift by -shift and tile into windows."""
    x, squeeze = _with_batch(x)
    b, c = x.shape[0], x.shape[-1]
    if tuple(x.shape[1:5]) != grid.token_dims:
        raise ValueError(f"tokens {x.shape[1:5]} do not match grid {grid.token_dims}")
    x = F.pad_trailing(x, (0,) + grid.pad + (0,))
    x = F.roll(x, tuple(-s for s in grid.shift), SPATIAL_AXES)
    (nt, nh, nw, nd), (wt, wh, ww, wd) = grid.counts, grid.window
    x = x.reshape(b, nt, wt, nh, wh, nw, ww, nd, wd, c)
    x = x.permute(0, 1, 3, 5, 7, 2, 4, 6, 8, 9)
    x = x.reshape(b, grid.num_windows, grid.window_len, c)
    return x.reshape(x.shape[1:]) if squeeze else x


def window_reverse(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    squeeze = windows.ndim == 3
    if squeeze:
        windows = windows.reshape((1,) + windows.shape)
    b, c = windows.shape[0], windows.shape[-1]
    (nt, nh, nw, nd), (wt, wh, ww, wd) = grid.counts, grid.window
    x = windows.reshape(b, nt, nh, nw, nd, wt, wh, ww, wd, c)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4, 8, 9)
    x = x.reshape((b,) + grid.padded_dims + (c,))
    x = F.roll(x, grid.shift, SPATIAL_AXES)
    if any(grid.pad):
        t, h, w, d = grid.token_dims
        x = x[:, :t, :h, :w, :d, :]
    return x.reshape(x.shape[1:]) if squeeze else x


def _partition_array(arr: np.ndarray, grid: WindowGrid) -> np.ndarray:
    """Window-tile a (padded, already rolled) 4D label array -> (num_windows, L)."""
    (nt, nh, nw, nd), (wt, wh, ww, wd) = grid.counts, grid.window
    a = arr.reshape(nt, wt, nh, wh, nw, ww, nd, wd)
    a = a.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return a.reshape(grid.num_windows, grid.window_len)


def region_labels(grid: WindowGrid) -> np.ndarray:
    """Region id per position of the *rolled* padded grid.

    Along a shifted axis the rolled frame splits into [0, n-w), [n-w, n-s)
    and [n-s, n); only the last window mixes regions, and there the ids
    separate tokens that were not neighbours before the roll.
    """
    axes_ids = []
    for extent, w, s in zip(grid.padded_dims, grid.window, grid.shift):
        ids = np.zeros(extent, dtype=np.int64)
        if s:
            ids[extent - w : extent - s] = 1
            ids[extent - s :] = 2
        axes_ids.append(ids)
    t, h, w, d = np.meshgrid(*axes_ids, indexing="ij")
    return ((t * 3 + h) * 3 + w) * 3 + d


def padding_flags(grid: WindowGrid) -> np.ndarray:
    """True at padded positions of the (unrolled) padded grid."""
    real = np.zeros(grid.padded_dims, dtype=bool)
    t, h, w, d = grid.token_dims
    real[:t, :h, :w, :d] = True
    return ~real


def build_attention_mask(grid: WindowGrid, dtype=np.float64) -> np.ndarray | None:
    """Additive (num_windows, L, L) mask: 0 where attention is permitted.

    A pair is forbidden when the tokens were not neighbours before the
    cyclic shift or when either one is padding. Returns None when nothing is
    forbidden.
    """
    if not grid.needs_mask:
        return None
    labels = _partition_array(region_labels(grid), grid)
    back = tuple(-s for s in grid.shift)
    pad = _partition_array(np.roll(padding_flags(grid), back, axis=(0, 1, 2, 3)), grid)
    forbidden = labels[:, :, None] != labels[:, None, :]
    forbidden |= pad[:, :, None] | pad[:, None, :]
    dtype = np.dtype(dtype)
    return np.where(forbidden, MASK_VALUE[dtype], 0.0).astype(dtype)


def relative_table_size(window) -> int:
    return int(np.prod([2 * w - 1 for w in window]))


def relative_position_index(window) -> np.ndarray:
    """(L, L) index into a flattened (2Pt-1)x(2M-1)^3 table by coordinate difference."""
    window = tuple(int(w) for w in window)
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij"), axis=-1).reshape(-1, 4)
    diff = coords[:, None, :] - coords[None, :, :] + (np.array(window) - 1)
    spans = [2 * w - 1 for w in window]
    index = diff[..., 0]
    for axis in range(1, 4):
        index = index * spans[axis] + diff[..., axis]
    return index
