"""Closed-form accounting: window counts, attention/MLP FLOPs, parameters, receptive fields.

All counts are exact Python integers. The FLOPs model per transformer block
with N tokens of width C is::

    12 * N * C**2   (QKV + output projections and a 4x MLP)
    + 2 * L * N * C (windowed attention, L tokens per window)
    + 2 * N**2 * C  (global attention, instead of the windowed term)
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, WindowGrid, build_model
from .model.config import NUM_STAGES
from .model.windows import relative_table_size
from .tensor import Tensor, no_grad

# Published totals for the full-size configuration, reported next to our own
# numbers for comparison only.
REFERENCE_PARAMS = {"absolute": 4_640_000, "relative": 4_660_000}
REFERENCE_FLOPS = 2_620_000_000


# ------------------------------------------------------------------ windows
def _segments(n: int, w: int, s: int) -> int:
    """Number of pieces [0, n) is cut into by boundaries at s + k*w."""
    return len({(x - s) // w for x in range(n)})


def count_windows(token_dims, window) -> tuple[int, int]:
    """(regular, shifted) window counts for a 4D token grid.

    Regular windows tile from the origin (ceil per axis). The shifted
    partition displaces boundaries by ``window // 2``; its pieces are counted
    by enumerating which displaced window each coordinate falls into.
    """
    token_dims, window = tuple(int(n) for n in token_dims), tuple(int(w) for w in window)
    if min(token_dims) < 1 or min(window) < 1:
        raise ValueError("token extents and windows must be positive")
    regular = int(np.prod([-(-n // w) for n, w in zip(token_dims, window)]))
    shifted = int(np.prod([_segments(n, w, w // 2) for n, w in zip(token_dims, window)]))
    return regular, shifted


# ------------------------------------------------------------------ FLOPs
def block_flops(tokens: int, channels: int, window_len: int | None) -> tuple[int, int]:
    """(linear term, attention term); ``window_len=None`` means global attention."""
    linear = 12 * tokens * channels**2
    if window_len is None:
        return linear, 2 * tokens**2 * channels
    return linear, 2 * window_len * tokens * channels


@dataclass(frozen=True)
class BlockFlops:
    stage: int
    block: int
    kind: str  # "W-MSA", "SW-MSA" or "global"
    tokens: int
    channels: int
    window_len: int | None
    term_linear: int
    term_attention: int

    @property
    def total(self) -> int:
        return self.term_linear + self.term_attention


@dataclass
class FlopsReport:
    blocks: list[BlockFlops]
    stage_totals: dict[int, int] = field(default_factory=dict)
    total: int = 0

    def __post_init__(self):
        for b in self.blocks:
            self.stage_totals[b.stage] = self.stage_totals.get(b.stage, 0) + b.total
        self.total = sum(self.stage_totals.values())

    def stage(self, s: int) -> list[BlockFlops]:
        return [b for b in self.blocks if b.stage == s]

    def to_dict(self) -> dict:
        return {
            "blocks": [asdict(b) | {"total": b.total} for b in self.blocks],
            "stage_totals": self.stage_totals,
            "total": self.total,
        }


def flops_estimate(cfg: ModelConfig) -> FlopsReport:
    """Per-block FLOPs for every stage (1-based stage numbers in the report)."""
    blocks = []
    for s in range(NUM_STAGES):
        tokens, channels = cfg.stage_tokens(s), cfg.stage_channels(s)
        for i in range(cfg.depths[s]):
            if s == NUM_STAGES - 1:
                kind, window_len = "global", None
            else:
                grid = WindowGrid.build(cfg.stage_token_dims(s), cfg.window, shifted=i % 2 == 1)
                kind, window_len = ("SW-MSA" if i % 2 else "W-MSA"), grid.window_len
            lin, att = block_flops(tokens, channels, window_len)
            blocks.append(BlockFlops(s + 1, i, kind, tokens, channels, window_len, lin, att))
    return FlopsReport(blocks)


def complexity_ratios(cfg: ModelConfig, stage: int = 1) -> dict[str, float]:
    """Windowed/linear and global/linear term ratios at a 1-based ``stage``."""
    s = stage - 1
    tokens, channels = cfg.stage_tokens(s), cfg.stage_channels(s)
    grid = WindowGrid.build(cfg.stage_token_dims(s), cfg.window)
    lin, win = block_flops(tokens, channels, grid.window_len)
    _, glob = block_flops(tokens, channels, None)
    return {
        "term_linear": lin,
        "term_windowed": win,
        "term_global": glob,
        "windowed_over_linear": win / lin,
        "global_over_linear": glob / lin,
    }


# ------------------------------------------------------------------ parameters
@dataclass
class ParamReport:
    by_name: dict[str, int]
    by_module: dict[str, int] = field(default_factory=dict)
    total: int = 0

    def __post_init__(self):
        for name, n in self.by_name.items():
            parts = name.split(".")
            module = ".".join(parts[:2]) if parts[0] == "stages" else parts[0]
            self.by_module[module] = self.by_module.get(module, 0) + n
        self.total = sum(self.by_name.values())


def _linear(prefix: str, n_in: int, n_out: int) -> dict[str, int]:
    return {f"{prefix}.weight": n_in * n_out, f"{prefix}.bias": n_out}


def _norm(prefix: str, dim: int) -> dict[str, int]:
    return {f"{prefix}.gamma": dim, f"{prefix}.beta": dim}


def param_count(cfg: ModelConfig) -> ParamReport:
    """Closed-form parameter count, named exactly like the instantiated model."""
    counts: dict[str, int] = {}
    counts.update(_linear("patch_embed.proj", cfg.patch_size**3, cfg.channels))
    for s in range(NUM_STAGES):
        c = cfg.stage_channels(s)
        t, h, w, d = cfg.stage_token_dims(s)
        pre = f"stages.{s}"
        if s > 0:
            counts.update(_norm(f"{pre}.merge.norm", 4 * c))
            counts[f"{pre}.merge.proj.weight"] = 4 * c * c
        if cfg.pos_embed_mode == "absolute":
            counts[f"{pre}.pos.spatial"] = h * w * d * c
            counts[f"{pre}.pos.temporal"] = t * c
        hidden = cfg.mlp_hidden(s)
        for i in range(cfg.depths[s]):
            b = f"{pre}.blocks.{i}"
            counts.update(_norm(f"{b}.norm1", c))
            for proj in ("q", "k", "v", "proj"):
                counts.update(_linear(f"{b}.attn.{proj}", c, c))
            if cfg.pos_embed_mode == "relative":
                window = (t, h, w, d) if s == NUM_STAGES - 1 else WindowGrid.build((t, h, w, d), cfg.window).window
                counts[f"{b}.attn.rel_bias.table"] = cfg.heads[s] * relative_table_size(window)
            counts.update(_norm(f"{b}.norm2", c))
            counts.update(_linear(f"{b}.mlp.fc1", c, hidden))
            counts.update(_linear(f"{b}.mlp.fc2", hidden, c))
    counts.update(_norm("head.norm", cfg.final_channels))
    counts.update(_linear("head.mlp.fc1", cfg.final_channels, cfg.head_width))
    counts.update(_linear("head.mlp.fc2", cfg.head_width, cfg.out_dim))
    return ParamReport(counts)


# ------------------------------------------------------------------ receptive field
@dataclass(frozen=True)
class StageSpan:
    stage: int
    spatial: tuple[int, int, int]  # voxels per axis reachable inside one window
    temporal: int  # frames
    global_attention: bool


@dataclass
class ReceptiveField:
    stages: list[StageSpan]
    full_spatial_stage: int | None
    full_temporal_stage: int | None


def receptive_field(cfg: ModelConfig) -> ReceptiveField:
    """Input span one attention window covers at each stage.

    Spatially a window of M tokens spans M * patch_size * 2^(s-1) voxels
    (capped at the input extent); time is never merged, so the span is the
    temporal window until the global final stage sees every frame.
    """
    t_in, *space_in = cfg.input_dims
    stages = []
    for s in range(NUM_STAGES):
        scale = cfg.patch_size * 2**s
        is_global = s == NUM_STAGES - 1
        if is_global:
            spatial = tuple(space_in)
            temporal = t_in
        else:
            spatial = tuple(min(m * scale, n) for m, n in zip(cfg.window[1:], space_in))
            temporal = min(cfg.window[0], t_in)
        stages.append(StageSpan(s + 1, spatial, temporal, is_global))
    full_spatial = next((st.stage for st in stages if all(a >= n for a, n in zip(st.spatial, space_in))), None)
    full_temporal = next((st.stage for st in stages if st.temporal >= t_in), None)
    return ReceptiveField(stages, full_spatial, full_temporal)


# ------------------------------------------------------------------ throughput
@dataclass
class BenchResult:
    samples_per_sec: float
    stddev: float
    repeats: list[float]
    flops_per_sample: int
    n_samples: int
    batch_size: int


def throughput_bench(
    cfg: ModelConfig, n_samples: int = 8, warmup: int = 1, repeats: int = 5, batch_size: int = 1, seed: int = 0
) -> BenchResult:
    """Time forward passes on random inputs; reports mean/stddev samples per second."""
    if n_samples < 1 or repeats < 1 or batch_size < 1:
        raise ValueError("n_samples, repeats and batch_size must be positive")
    model = build_model(cfg, seed=seed).eval()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(batch_size,) + cfg.input_dims + (1,)).astype(cfg.dtype))
    n_batches = -(-n_samples // batch_size)
    rates = []
    with no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(repeats):
            start = time.perf_counter()
            for _ in range(n_batches):
                model(x)
            rates.append(n_batches * batch_size / (time.perf_counter() - start))
    return BenchResult(
        samples_per_sec=statistics.fmean(rates),
        stddev=statistics.stdev(rates) if len(rates) > 1 else 0.0,
        repeats=rates,
        flops_per_sample=flops_estimate(cfg).total,
        n_samples=n_batches * batch_size,
        batch_size=batch_size,
    )
