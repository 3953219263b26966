"""Integrated gradients, its SmoothGrad-squared variant, and group-map aggregation.

Attributions are computed in double precision. A single-precision model is
copied to float64 first, so gradients along the path do not suffer from
float32 round-off and completeness can be checked tightly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import write_container
from .model import SwiFT, build_model
from .tensor import Tensor, no_grad


@dataclass
class AttributionMap:
    values: np.ndarray  # (T, H, W, D)
    baseline: str
    steps: int
    smooth_sigma: float | None = None
    n_samples: int = 1

    def save(self, path) -> None:
        meta = {
            "kind": "attribution",
            "baseline": self.baseline,
            "steps": self.steps,
            "smooth_sigma": self.smooth_sigma,
            "n_samples": self.n_samples,
        }
        write_container(path, {"values": self.values}, meta, dtype="<f8")


def double_precision(model):
    """``model`` itself if already float64, else a float64 copy with the same weights."""
    if not isinstance(model, SwiFT) or model.dtype == np.float64:
        return model
    twin = build_model(model.cfg.with_(precision="double"))
    twin.load_state_dict(model.state_dict())
    return twin.eval()


def default_baseline(x: np.ndarray) -> np.ndarray:
    """All-background volume: every voxel at the input's minimum (the background fill)."""
    return np.full_like(np.asarray(x, dtype=np.float64), np.min(x))


def _as_volume(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 4 else x


def _baseline_like(baseline, x: np.ndarray) -> np.ndarray:
    """Scalar, (T, H, W, D) or (T, H, W, D, 1) baseline as a float64 array shaped like ``x``."""
    b = np.asarray(baseline, dtype=np.float64)
    if b.ndim == 4:
        b = b[..., None]
    if b.ndim and b.shape != x.shape:
        raise ValueError(f"baseline shape {b.shape} does not match input {x.shape}")
    return np.broadcast_to(b, x.shape).copy()


def model_output(model, x, target: int = 0) -> float:
    """Scalar model output for a single (T, H, W, D[, 1]) input."""
    model = double_precision(model)
    with no_grad():
        return float(model(Tensor(_as_volume(x)[None])).data[0, target])


def integrated_gradients(
    model, x, baseline=None, steps: int = 64, target: int = 0, batch: int = 8
) -> AttributionMap:
    """IG_j = (x_j - b_j) * mean_k dF/dx_j at b + (k - 1/2)/steps * (x - b), k = 1..steps.

    ``model`` maps a (B, T, H, W, D, 1) tensor to (B, out_dim); ``target``
    selects the output column.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    model = double_precision(model)
    x = _as_volume(x)
    b = default_baseline(x) if baseline is None else _baseline_like(baseline, x)
    delta = x - b
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    grad_sum = np.zeros_like(x)
    for i in range(0, steps, batch):
        a = alphas[i : i + batch]
        points = Tensor(b[None] + a[:, None, None, None, None, None] * delta[None], requires_grad=True)
        out = model(points)
        out[:, target].sum().backward()
        grad_sum += points.grad.sum(axis=0)
    values = (delta * grad_sum / steps)[..., 0]
    desc = "min-background" if baseline is None else "custom"
    return AttributionMap(values, desc, steps)


def ig_sq(
    model,
    x,
    baseline=None,
    steps: int = 64,
    noise_sigma: float = 0.1,
    n_samples: int = 8,
    rng: np.random.Generator | None = None,
    target: int = 0,
) -> AttributionMap:
    """Mean over ``n_samples`` of IG(x + N(0, noise_sigma^2))**2, elementwise."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = rng or np.random.default_rng(0)
    model = double_precision(model)
    x = _as_volume(x)
    b = default_baseline(x) if baseline is None else baseline
    acc = None
    for _ in range(n_samples):
        noisy = x + rng.normal(scale=noise_sigma, size=x.shape) if noise_sigma > 0 else x
        sq = integrated_gradients(model, noisy, b, steps, target).values ** 2
        acc = sq if acc is None else acc + sq
    desc = "min-background" if baseline is None else "custom"
    return AttributionMap(acc / n_samples, desc, steps, n_samples=n_samples)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = values.min(), values.max()
    return np.zeros_like(values, dtype=np.float64) if hi == lo else (values - lo) / (hi - lo)


def aggregate_maps(maps, correct=None, smooth_sigma: float = 1.0) -> np.ndarray:
    """Group (H, W, D) map from per-subject (T, H, W, D) maps.

    Drops subjects whose prediction was wrong, min-max normalises each map,
    smooths every frame spatially, averages over time and then over subjects.
    """
    maps = [m.values if isinstance(m, AttributionMap) else np.asarray(m) for m in maps]
    keep = [m for m, ok in zip(maps, correct if correct is not None else [True] * len(maps)) if ok]
    if not keep:
        raise ValueError("no correctly predicted subjects left to aggregate")
    processed = []
    for m in keep:
        m = normalize_map(m.astype(np.float64))
        if smooth_sigma:
            m = gaussian_filter(m, (0.0, smooth_sigma, smooth_sigma, smooth_sigma), mode="reflect")
        processed.append(m.mean(axis=0))
    return np.mean(processed, axis=0)


def localization_factor(values: np.ndarray, inside: np.ndarray, region: np.ndarray | None = None) -> float:
    """Mean attribution inside ``inside`` divided by the mean over ``region`` minus ``inside``.

    ``values`` is (H, W, D) or (T, H, W, D); masks are spatial.
    """
    v = values.mean(axis=0) if values.ndim == 4 else values
    region = np.ones_like(inside, dtype=bool) if region is None else region
    outside = region & ~inside
    return float(v[inside].mean() / v[outside].mean())


def write_slice_csvs(values: np.ndarray, directory, axis: int = 2, prefix: str = "slice") -> list[Path]:
    """One CSV grid per slice of a 3D map along ``axis`` (for external plotting)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(values.shape[axis]):
        path = directory / f"{prefix}_{axis}_{i:03d}.csv"
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(np.take(values, i, axis=axis).tolist())
        paths.append(path)
    return paths
