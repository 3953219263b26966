"""Mini-batch training, contrastive pre-training, fine-tuning and subject-level inference."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..io import load_checkpoint, save_checkpoint
from ..model import ModelConfig, build_model
from ..objectives import bce_loss, combined_pretrain_loss, instance_contrastive_loss, local_local_loss, mse_loss
from ..tensor import Tensor, no_grad
from .data import AugmentSpec, SplitSpec, SubjectRecord, augment, normalize_and_fit, split_subjects, subsequence_split
from .metrics import subject_metrics
from .optim import AdamWHyper, adamw_step, init_adamw_state, lr_schedule

TASKS = ("sex", "age", "intelligence", "pretrain")
HEAD_FOR_TASK = {
    "sex": "binary_logit",
    "age": "scalar_regression",
    "intelligence": "scalar_regression",
    "pretrain": "embedding",
}
# metric used to pick the best epoch, and whether larger is better
SELECTION = {"sex": ("auc", True), "age": ("mse", False), "intelligence": ("mse", False), "pretrain": ("loss", False)}


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    schedule: str = "cosine"  # or "constant": base lr at every step
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    augment: bool = False
    augment_spec: AugmentSpec = field(default_factory=AugmentSpec)
    pretrain_subjects: int = 4
    temperature: float = 1.0
    eval_batch: int = 16

    def adamw(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule != "cosine":
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        return lr_schedule(step, total_steps, self.lr, self.warmup_fraction)

    def with_(self, **changes) -> "TrainHyper":
        return replace(self, **changes)


class MetricsLog:
    """Append-only (epoch, split, metric, value) records, mirrored to a JSONL file if given."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, epoch: int, split: str, metric: str, value: float) -> None:
        rec = {"epoch": int(epoch), "split": split, "metric": metric, "value": float(value)}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def value(self, epoch: int, split: str, metric: str) -> float:
        for rec in self.records:
            if (rec["epoch"], rec["split"], rec["metric"]) == (epoch, split, metric):
                return rec["value"]
        raise KeyError((epoch, split, metric))

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


@dataclass
class TrainResult:
    model: object
    task: str
    best_epoch: int
    best_value: float
    log: MetricsLog
    optimizer_state: dict
    splits: dict[str, list[str]]


@dataclass
class SubjectPrediction:
    subject_id: str
    output: np.ndarray  # mean over windows, (out_dim,)
    window_outputs: np.ndarray  # (num_windows, out_dim)

    @property
    def score(self) -> float:
        return float(self.output[0])


# ------------------------------------------------------------------ data plumbing
def prepare_subjects(subjects, spatial_dims) -> list[SubjectRecord]:
    """Normalise every volume once (no-op for records already marked normalised)."""
    out = []
    for s in subjects:
        if s.planted_signature.get("normalized"):
            out.append(s)
            continue
        vol = normalize_and_fit(s.volume, spatial_dims).astype(np.float32)
        sig = {**s.planted_signature, "normalized": True}
        out.append(replace(s, volume=vol, planted_signature=sig))
    return out


def _windows(subject: SubjectRecord, length: int) -> list[int]:
    return [w.start_frame for w in subsequence_split(subject, length)]


def _model_config(cfg: ModelConfig, task: str) -> ModelConfig:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    return cfg.with_(head_kind=HEAD_FOR_TASK[task])


def _check_finite(loss, epoch: int, step: int) -> None:
    value = float(loss.item())
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss is {value} at epoch {epoch}, step {step}; lower the learning rate")


# ------------------------------------------------------------------ inference
def infer_subject(subject: SubjectRecord, model, length: int | None = None, batch: int = 16) -> SubjectPrediction:
    """Forward every sub-sequence of ``subject`` and average the outputs."""
    length = length or model.cfg.input_dims[0]
    windows = subsequence_split(subject, length)
    outs = []
    with no_grad():
        for i in range(0, len(windows), batch):
            x = np.stack([w.frames for w in windows[i : i + batch]]).astype(model.dtype, copy=False)
            outs.append(model(Tensor(x)).data.astype(np.float64))
    window_outputs = np.concatenate(outs, axis=0)
    return SubjectPrediction(subject.subject_id, window_outputs.mean(axis=0), window_outputs)


def evaluate(model, subjects, task: str, batch: int = 16) -> tuple[dict[str, float], list[SubjectPrediction]]:
    """Subject-level metrics after logit/prediction averaging."""
    if not subjects:
        raise ValueError("cannot evaluate on an empty split")
    preds = [infer_subject(s, model, batch=batch) for s in subjects]
    scores = np.array([p.score for p in preds])
    targets = np.array([s.target(task) for s in subjects])
    return subject_metrics(task, scores, targets), preds


# ------------------------------------------------------------------ contrastive batches
def _contrastive_forward(model, subjects, length, rng, aug: AugmentSpec, temperature: float):
    """(loss, representations) for a group of subjects: 2 sub-sequences x 2 views each."""
    frames = []
    for s in subjects:
        starts = _windows(s, length)
        if len(starts) < 2:
            raise ValueError(f"{s.subject_id} has fewer than two sub-sequences for local-local contrast")
        chosen = np.sort(rng.choice(len(starts), size=2, replace=False))
        for idx in chosen:
            clip = s.volume[starts[idx] : starts[idx] + length]
            frames.append(augment(clip, rng, aug))
            frames.append(augment(clip, rng, aug))
    x = Tensor(np.stack(frames).astype(model.dtype, copy=False))
    reps = model(x).reshape(len(subjects), 2, 2, -1)  # subject, sub-sequence, view, E
    ic = instance_contrastive_loss(reps[:, 0, 0], reps[:, 1, 0], temperature=temperature)
    ll = local_local_loss(reps[:, :, 0], reps[:, :, 1], temperature=temperature)
    return combined_pretrain_loss(ic, ll), reps.data


def cosine_gap(reps: np.ndarray) -> float:
    """Mean anchor-positive cosine minus mean anchor-negative cosine (instance pairs)."""
    a = reps[:, 0, 0] / np.linalg.norm(reps[:, 0, 0], axis=-1, keepdims=True)
    b = reps[:, 1, 0] / np.linalg.norm(reps[:, 1, 0], axis=-1, keepdims=True)
    sims = a @ b.T
    n = len(a)
    return float(np.trace(sims) / n - (sims.sum() - np.trace(sims)) / (n * (n - 1)))


def _groups(n: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    groups = [order[i : i + size] for i in range(0, n, size)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2] = np.concatenate([groups[-2], groups.pop()])
    return [g for g in groups if len(g) >= 2]


def evaluate_pretrain(model, subjects, hyper: TrainHyper) -> dict[str, float]:
    rng = np.random.default_rng(hyper.seed + 1_000_003)
    length = model.cfg.input_dims[0]
    losses, gaps = [], []
    with no_grad():
        for g in _groups(len(subjects), hyper.pretrain_subjects, None):
            loss, reps = _contrastive_forward(
                model, [subjects[i] for i in g], length, rng, hyper.augment_spec, hyper.temperature
            )
            losses.append(loss.item())
            gaps.append(cosine_gap(reps))
    return {"loss": float(np.mean(losses)), "cosine_gap": float(np.mean(gaps))}


# ------------------------------------------------------------------ training loop
def _task_loss(task: str, out, targets):
    if task == "sex":
        return bce_loss(out.reshape(-1), targets)
    return mse_loss(out.reshape(-1), targets)


def train(
    subjects,
    cfg: ModelConfig,
    task: str,
    hyper: TrainHyper | None = None,
    model=None,
    log_path=None,
    out_dir=None,
    splits: dict | None = None,
) -> TrainResult:
    """Train ``task`` on the train split, validating (subject-level) after every epoch.

    Epoch 0 in the log is the untrained model. The returned model holds the
    weights of the best validation epoch (ties go to the earliest epoch).
    ``model`` continues from existing weights; ``splits`` reuses a split
    (mapping split name -> subject ids) instead of drawing one.
    """
    hyper = hyper or TrainHyper()
    cfg = _model_config(cfg, task)
    length = cfg.input_dims[0]
    subjects = prepare_subjects(subjects, cfg.input_dims[1:])
    if splits is None:
        parts = split_subjects(subjects, SplitSpec(hyper.seed, hyper.split_ratios))
    else:
        by_id = {s.subject_id: s for s in subjects}
        parts = {name: [by_id[i] for i in ids] for name, ids in splits.items()}
    train_set, val_set = parts["train"], parts["val"]
    if not train_set or not val_set:
        raise ValueError(f"empty split: {len(train_set)} train / {len(val_set)} val subjects")
    if model is None:
        model = build_model(cfg, seed=hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    params = dict(model.named_parameters())
    opt = init_adamw_state(params)
    adam = hyper.adamw()
    log = MetricsLog(log_path or (Path(out_dir) / "metrics.jsonl" if out_dir else None))
    split_ids = {k: [s.subject_id for s in v] for k, v in parts.items()}

    if task == "pretrain":
        steps_per_epoch = len(_groups(len(train_set), hyper.pretrain_subjects, None))
        items = None
    else:
        items = [(i, s) for i, subj in enumerate(train_set) for s in _windows(subj, length)]
        steps_per_epoch = math.ceil(len(items) / hyper.batch_size)
    if steps_per_epoch == 0:
        raise ValueError("training split yields no batches")
    total_steps = hyper.epochs * steps_per_epoch
    metric_name, larger_better = SELECTION[task]

    def validate(epoch: int) -> float:
        model.eval()
        if task == "pretrain":
            metrics = evaluate_pretrain(model, val_set, hyper)
        else:
            metrics, _ = evaluate(model, val_set, task, batch=hyper.eval_batch)
        for name, value in metrics.items():
            log.log(epoch, "val", name, value)
        model.train()
        return metrics[metric_name]

    validate(0)
    best_epoch, best_value, best_state = 0, None, None
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        model.train()
        losses = []
        if task == "pretrain":
            for group in _groups(len(train_set), hyper.pretrain_subjects, rng):
                loss, _ = _contrastive_forward(
                    model, [train_set[i] for i in group], length, rng, hyper.augment_spec, hyper.temperature
                )
                _check_finite(loss, epoch, step)
                model.zero_grad()
                loss.backward()
                step += 1
                adamw_step(params, opt, adam, hyper.lr_at(step, total_steps))
                losses.append(loss.item())
        else:
            order = rng.permutation(len(items))
            for b in range(0, len(order), hyper.batch_size):
                chosen = [items[k] for k in order[b : b + hyper.batch_size]]
                frames = []
                for i, start in chosen:
                    clip = train_set[i].volume[start : start + length]
                    frames.append(augment(clip, rng, hyper.augment_spec) if hyper.augment else clip)
                x = Tensor(np.stack(frames).astype(model.dtype, copy=False))
                targets = np.array([train_set[i].target(task) for i, _ in chosen])
                loss = _task_loss(task, model(x, rng=rng), targets)
                _check_finite(loss, epoch, step)
                model.zero_grad()
                loss.backward()
                step += 1
                adamw_step(params, opt, adam, hyper.lr_at(step, total_steps))
                losses.append(loss.item())
        log.log(epoch, "train", "loss", float(np.mean(losses)))
        value = validate(epoch)
        better = best_value is None or (value > best_value if larger_better else value < best_value)
        if better:
            best_epoch, best_value = epoch, value
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out_dir:
                save_checkpoint(Path(out_dir) / "best.s4d", model, extra=_ckpt_meta(task, epoch, split_ids, hyper))
    if out_dir:
        save_checkpoint(Path(out_dir) / "last.s4d", model, opt, extra=_ckpt_meta(task, hyper.epochs, split_ids, hyper))
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, task, best_epoch, best_value, log, opt, split_ids)


def _ckpt_meta(task, epoch, split_ids, hyper) -> dict:
    return {"task": task, "epoch": epoch, "splits": split_ids, "seed": hyper.seed}


def finetune(pretrained, subjects, cfg: ModelConfig, task: str, hyper: TrainHyper | None = None, **kw) -> TrainResult:
    """Train ``task`` starting from pre-trained weights at a constant tenth of the learning rate.

    ``pretrained`` is a model or a checkpoint path. Every parameter whose
    shape matches is copied. Parameters that do not fit (the task head's
    output layer when the head kind changes) start at zero, so fine-tuning
    begins from a constant prediction rather than a random projection of the
    pre-trained features.
    """
    hyper = hyper or TrainHyper()
    cfg = _model_config(cfg, task)
    model = build_model(cfg, seed=hyper.seed)
    if isinstance(pretrained, (str, Path)):
        pretrained, _, _ = load_checkpoint(pretrained)
    skipped = model.load_state_dict(
        {k: v.astype(model.dtype) for k, v in pretrained.state_dict().items()}, strict=False
    )
    params = dict(model.named_parameters())
    for name in skipped:
        params[name].data = np.zeros_like(params[name].data)
    return train(subjects, cfg, task, hyper.with_(lr=hyper.lr / 10, schedule="constant"), model=model, **kw)
