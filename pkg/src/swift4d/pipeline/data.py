"""Synthetic 4D volumes, preprocessing, sub-sequencing, augmentation and dataset files.

A synthetic subject is an ellipsoidal "brain" (zero background) filled with
spatially and temporally smooth noise around a baseline, plus a planted
signature: a Gaussian blob whose intensity oscillates at a label-dependent
period. The per-subject oscillation amplitude drives the two regression
targets, so every task has a known ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..io import read_container, write_container


@dataclass
class SubjectRecord:
    subject_id: str
    volume: np.ndarray  # (T_full, H, W, D, 1)
    sex_label: int
    age_target: float
    intelligence_target: float
    planted_signature: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.volume.shape[0]

    def target(self, task: str):
        if task == "sex":
            return self.sex_label
        if task == "age":
            return self.age_target
        if task == "intelligence":
            return self.intelligence_target
        raise ValueError(f"subject records have no target for task {task!r}")


@dataclass
class SubSequence:
    subject_id: str
    start_frame: int
    frames: np.ndarray  # (T_sub, H, W, D, 1)


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings. Label ``k`` oscillates with period ``periods[k]`` (frames) and phase ``phases[k]``."""

    dims: tuple[int, int, int, int] = (16, 24, 24, 24)
    amplitude: float = 4.0
    amplitude_spread: float = 0.5
    noise_sigma: float = 1.0
    noise_smoothing: tuple[float, float, float, float] = (1.0, 1.5, 1.5, 1.5)
    baseline: float = 100.0
    blob_center: tuple[float, float, float] = (0.3, 0.62, 0.5)
    blob_sigma: float = 5.0
    periods: tuple[float, float] = (8.0, 4.0)
    phases: tuple[float, float] = (0.0, 0.0)
    age_noise: float = 0.3
    intelligence_noise: float = 0.5

    def brain_mask(self) -> np.ndarray:
        _, h, w, d = self.dims
        grid = np.meshgrid(*[(np.arange(n) + 0.5) / n - 0.5 for n in (h, w, d)], indexing="ij")
        return sum((g / 0.45) ** 2 for g in grid) <= 1.0

    def blob_weights(self) -> np.ndarray:
        """Spatial profile of the planted signature, peak 1."""
        _, h, w, d = self.dims
        centre = [c * n for c, n in zip(self.blob_center, (h, w, d))]
        grid = np.meshgrid(*[np.arange(n) + 0.5 for n in (h, w, d)], indexing="ij")
        r2 = sum((g - c) ** 2 for g, c in zip(grid, centre))
        return np.exp(-r2 / (2 * self.blob_sigma**2)) * self.brain_mask()

    def waveform(self, label: int, num_frames: int | None = None) -> np.ndarray:
        t = np.arange(self.dims[0] if num_frames is None else num_frames)
        label = int(label)
        return np.sin(2 * np.pi * t / self.periods[label] + self.phases[label])


def zscore(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    return (values - values.mean()) / (std if std > 0 else 1.0)


def synthesize_dataset(n_subjects: int, dims=None, seed: int = 0, spec: SynthSpec | None = None, **overrides):
    """Deterministic list of ``n_subjects`` SubjectRecords (volumes float32, zero background)."""
    spec = spec or SynthSpec()
    if dims is not None:
        overrides["dims"] = tuple(int(n) for n in dims)
    if overrides:
        spec = SynthSpec(**{**spec.__dict__, **overrides})
    rng = np.random.default_rng(seed)
    mask = spec.brain_mask()
    blob = spec.blob_weights()
    labels = rng.permutation(np.arange(n_subjects) % 2)
    rel_amp = 1.0 + spec.amplitude_spread * rng.uniform(-1.0, 1.0, size=n_subjects)
    age = zscore(rel_amp + spec.age_noise * rng.normal(size=n_subjects))
    intel = zscore(-rel_amp + spec.intelligence_noise * rng.normal(size=n_subjects))
    subjects = []
    for i in range(n_subjects):
        noise = gaussian_filter(rng.normal(size=spec.dims), spec.noise_smoothing, mode="wrap")
        noise *= spec.noise_sigma / max(noise.std(), 1e-12)
        amp = spec.amplitude * rel_amp[i]
        signal = amp * spec.waveform(labels[i])[:, None, None, None] * blob[None]
        vol = (spec.baseline + noise + signal) * mask[None]
        subjects.append(
            SubjectRecord(
                subject_id=f"sub-{i:04d}",
                volume=vol.astype(np.float32)[..., None],
                sex_label=int(labels[i]),
                age_target=float(age[i]),
                intelligence_target=float(intel[i]),
                planted_signature={
                    "pattern": int(labels[i]),
                    "period": float(spec.periods[labels[i]]),
                    "amplitude": float(amp),
                },
            )
        )
    return subjects


# ------------------------------------------------------------------ preprocessing
def fit_to_dims(volume: np.ndarray, target_dims, fill: float = 0.0) -> np.ndarray:
    """Centre-crop / pad the three spatial axes of a (T, H, W, D[, 1]) volume."""
    out = volume
    for axis, target in zip((1, 2, 3), target_dims):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif n < target:
            before = (target - n) // 2
            widths = [(0, 0)] * out.ndim
            widths[axis] = (before, target - n - before)
            out = np.pad(out, widths, constant_values=fill)
    return out


def normalize_and_fit(volume: np.ndarray, target_dims=None, eps: float = 0.0) -> np.ndarray:
    """Z-score the foreground over all four axes, fill background with its minimum, fit spatial dims.

    Background = voxel locations that are zero in every frame. Padding added
    to reach ``target_dims`` uses the same fill value as the background.
    """
    vol = np.asarray(volume)
    squeeze = vol.ndim == 5
    data = vol[..., 0] if squeeze else vol
    fg = np.any(data != 0, axis=0)
    if not fg.any():
        raise ValueError("volume has no foreground voxels")
    values = data[:, fg].astype(np.float64)
    std = values.std()
    if std == 0 and eps == 0:
        raise ValueError("foreground has zero variance; pass eps > 0 to normalise anyway")
    values = (values - values.mean()) / (std + eps)
    fill = values.min()
    out = np.full(data.shape, fill, dtype=np.float64)
    out[:, fg] = values
    if target_dims is not None:
        out = fit_to_dims(out, target_dims, fill=fill)
    out = out.astype(vol.dtype if np.issubdtype(vol.dtype, np.floating) else np.float64)
    return out[..., None] if squeeze else out


def foreground_mask(volume: np.ndarray) -> np.ndarray:
    data = volume[..., 0] if volume.ndim == 5 else volume
    return np.any(data != data.min(), axis=0)


def subsequence_split(subject: SubjectRecord, length: int, stride: int | None = None) -> list[SubSequence]:
    """Contiguous ``length``-frame windows every ``stride`` frames; a short tail is dropped."""
    total = subject.num_frames
    if length < 1 or length > total:
        raise ValueError(f"sub-sequence length {length} does not fit a {total}-frame subject")
    stride = stride or length
    return [
        SubSequence(subject.subject_id, s, subject.volume[s : s + length])
        for s in range(0, total - length + 1, stride)
    ]


# ------------------------------------------------------------------ augmentation
@dataclass(frozen=True)
class AugmentSpec:
    noise_sigma: float = 0.1
    smooth_sigma: float = 0.75
    prob: float = 0.5


def smooth_frames(frames: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3D Gaussian per frame with reflective boundaries (mean-preserving)."""
    spatial = (0.0, sigma, sigma, sigma) + ((0.0,) if frames.ndim == 5 else ())
    return gaussian_filter(frames, spatial, mode="reflect")


def augment(x: SubSequence | np.ndarray, rng: np.random.Generator, spec: AugmentSpec | None = None):
    """Randomly add Gaussian noise and/or smooth each frame, each with probability ``spec.prob``."""
    spec = spec or AugmentSpec()
    frames = x.frames if isinstance(x, SubSequence) else x
    out = frames
    if spec.smooth_sigma > 0 and rng.random() < spec.prob:
        out = smooth_frames(out, spec.smooth_sigma)
    if spec.noise_sigma > 0 and rng.random() < spec.prob:
        out = out + rng.normal(scale=spec.noise_sigma, size=out.shape)
    out = out.astype(frames.dtype, copy=False)
    if isinstance(x, SubSequence):
        return SubSequence(x.subject_id, x.start_frame, out)
    return out


# ------------------------------------------------------------------ splits
@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


def split_subjects(subjects, spec: SplitSpec) -> dict[str, list]:
    """Subject-level train/val/test split; sizes are rounded, test takes the remainder.

    Subjects are shuffled within each sex label and then interleaved, so every
    split of two or more subjects sees both classes (keeps AUC defined on
    small splits).
    """
    n = len(subjects)
    rng = np.random.default_rng(spec.seed)
    labels = np.array([s.sex_label for s in subjects])
    groups = [rng.permutation(np.flatnonzero(labels == k)) for k in np.unique(labels)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    order = [g[j] for j in range(max((len(g) for g in groups), default=0)) for g in groups if j < len(g)]
    n_train = int(round(spec.ratios[0] * n))
    n_val = int(round(spec.ratios[1] * n))
    parts = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    return {name: [subjects[i] for i in sorted(idx)] for name, idx in parts.items()}


# ------------------------------------------------------------------ probes
def mean_intensity_scores(subjects) -> np.ndarray:
    """Per-subject mean foreground intensity (a label-blind linear probe)."""
    return np.array([s.volume[s.volume != 0].mean() for s in subjects])


def band_power_scores(subjects, spec: SynthSpec | None = None) -> np.ndarray:
    """Power at the label-1 period minus power at the label-0 period in the blob time course."""
    spec = spec or SynthSpec(dims=subjects[0].volume.shape[:4])
    blob = spec.blob_weights()
    scores = []
    for s in subjects:
        course = np.tensordot(s.volume[..., 0].astype(np.float64), blob, axes=3) / blob.sum()
        course = course - course.mean()
        t = np.arange(len(course))
        power = [abs(np.sum(course * np.exp(-2j * np.pi * t / p))) ** 2 for p in spec.periods]
        scores.append(power[1] - power[0])
    return np.array(scores)


# ------------------------------------------------------------------ files
MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ("subject_id", "path", "sex_label", "age_target", "intelligence_target")


def save_dataset(subjects, directory) -> Path:
    """One container per subject plus a tab-separated manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in subjects:
        rel = f"{s.subject_id}.s4d"
        write_container(
            directory / rel,
            {"volume": s.volume},
            {"kind": "subject", "subject_id": s.subject_id, "planted_signature": s.planted_signature},
        )
        rows.append((s.subject_id, rel, s.sex_label, repr(s.age_target), repr(s.intelligence_target)))
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    return manifest


def load_dataset(directory) -> list[SubjectRecord]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    subjects = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            tensors, meta = read_container(directory / row["path"])
            subjects.append(
                SubjectRecord(
                    subject_id=row["subject_id"],
                    volume=tensors["volume"],
                    sex_label=int(row["sex_label"]),
                    age_target=float(row["age_target"]),
                    intelligence_target=float(row["intelligence_target"]),
                    planted_signature=meta.get("planted_signature", {}),
                )
            )
    return subjects


def num_subsequences(total_frames: int, length: int, stride: int | None = None) -> int:
    stride = stride or length
    return 0 if length > total_frames else math.floor((total_frames - length) / stride) + 1
