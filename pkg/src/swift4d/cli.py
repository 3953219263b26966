"""``swin4d`` command-line entry point.

Settings come from a flat ``key = value`` file (``#`` starts a comment),
then ``--set key=value`` pairs, then the dedicated flags; later sources win.
Unknown keys are errors. Exit status: 0 success, 1 invalid input or
configuration, 2 runtime failure (divergence, I/O).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from contextlib import nullcontext
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .io import ContainerError
from .model import ConfigError, ModelConfig

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    """Every setting a subcommand can read, with its default."""

    # model
    input_size: tuple[int, int, int] = (24, 24, 24)
    subseq_len: int = 8
    patch_size: int = 3
    channels: int = 8
    depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    window: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (2, 2, 4, 4)
    mlp_ratio: float = 4.0
    pos_embed_mode: str = "absolute"
    embed_dim: int = 32
    head_hidden: int = 0  # 0 -> final channel width
    drop_rate: float = 0.0
    precision: str = "single"
    # task and data
    task: str = "sex"
    seed: int = 0
    data_dir: str = ""
    n_subjects: int = 200
    total_frames: int = 16
    amplitude: float = 4.0
    split: str = "val"
    # optimisation
    epochs: int = 10
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_fraction: float = 0.05
    # augmentation and pre-training
    augment: bool = False
    aug_noise_sigma: float = 0.1
    aug_smooth_sigma: float = 0.75
    aug_prob: float = 0.5
    pretrain_subjects: int = 4
    temperature: float = 1.0
    # outputs and checkpoints
    out: str = "runs/latest"
    checkpoint: str = ""
    # attribution
    ig_steps: int = 64
    ig_noise_sigma: float = 0.1
    ig_samples: int = 4
    map_smooth_sigma: float = 1.0
    # benchmark
    bench_samples: int = 8
    bench_repeats: int = 5
    bench_warmup: int = 1

    def model_config(self) -> ModelConfig:
        from .pipeline.training import HEAD_FOR_TASK

        return ModelConfig(
            input_dims=(self.subseq_len,) + tuple(self.input_size),
            patch_size=self.patch_size,
            channels=self.channels,
            depths=self.depths,
            window=self.window,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            pos_embed_mode=self.pos_embed_mode,
            head_kind=HEAD_FOR_TASK[self.task],
            embed_dim=self.embed_dim,
            head_hidden=self.head_hidden or None,
            drop_rate=self.drop_rate,
            precision=self.precision,
        )

    def train_hyper(self):
        from .pipeline import AugmentSpec, TrainHyper

        return TrainHyper(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            weight_decay=self.weight_decay,
            warmup_fraction=self.warmup_fraction,
            seed=self.seed,
            augment=self.augment,
            augment_spec=AugmentSpec(self.aug_noise_sigma, self.aug_smooth_sigma, self.aug_prob),
            pretrain_subjects=self.pretrain_subjects,
            temperature=self.temperature,
        )

    def validate(self) -> "RunConfig":
        from .pipeline.training import TASKS

        if self.task not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {self.task!r}")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split: must be train, val or test, got {self.split!r}")
        for key in ("epochs", "batch_size", "n_subjects", "total_frames", "ig_steps", "ig_samples"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be at least 1")
        if self.subseq_len > self.total_frames:
            raise ConfigError(f"subseq_len: {self.subseq_len} exceeds total_frames {self.total_frames}")
        if self.lr < 0:
            raise ConfigError("lr: must be non-negative")
        self.model_config()  # raises ConfigError naming the violated invariant
        return self


# ------------------------------------------------------------------ parsing
def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, float, str):
            return kind(raw)
        if typing.get_origin(kind) is tuple:
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def parse_assignments(lines, source: str = "<flags>") -> dict:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration key ({source}:{lineno})")
        values[key] = _convert(key, raw, types[key])
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values, then ``overrides`` (already typed or raw strings), then validation."""
    values = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file {path} does not exist")
        values.update(parse_assignments(path.read_text().splitlines(), str(path)))
    types = _field_types()
    for key, value in (overrides or {}).items():
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _convert(key, value, types[key]) if isinstance(value, str) else value
    return RunConfig(**values).validate()


def defaults_help() -> str:
    return "\n".join(f"  {f.name} = {_fmt(f.default)}" for f in fields(RunConfig))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# ------------------------------------------------------------------ output helpers
def _emit(args, record: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(record, default=_json_default))
    elif text is not None:
        print(text)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    return str(obj)


def _require(cfg: RunConfig, *keys) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"{key}: required for this command (use --{key.replace('_', '-')} or the config file)")


def _load_subjects(cfg: RunConfig):
    from .pipeline import load_dataset

    _require(cfg, "data_dir")
    return load_dataset(cfg.data_dir)


# ------------------------------------------------------------------ subcommands
def cmd_synth(cfg: RunConfig, args) -> int:
    from .pipeline import save_dataset, synthesize_dataset

    out = Path(cfg.data_dir or cfg.out)
    dims = (cfg.total_frames,) + tuple(cfg.input_size)
    subjects = synthesize_dataset(cfg.n_subjects, dims=dims, seed=cfg.seed, amplitude=cfg.amplitude)
    manifest = save_dataset(subjects, out)
    _emit(args, {"subjects": len(subjects), "manifest": str(manifest)}, f"wrote {len(subjects)} subjects to {out}")
    return EXIT_OK


def _report_training(args, result, out: Path) -> None:
    record = {
        "task": result.task,
        "best_epoch": result.best_epoch,
        "best_value": result.best_value,
        "checkpoint": str(out / "best.s4d"),
        "metrics_log": str(out / "metrics.jsonl"),
    }
    lines = [f"{r['epoch']:>3} {r['split']:<5} {r['metric']:<18} {r['value']:.6f}" for r in result.log.records]
    lines.append(f"best epoch {result.best_epoch}: {result.best_value:.6f} -> {out / 'best.s4d'}")
    _emit(args, record, "\n".join(lines))


def cmd_train(cfg: RunConfig, args) -> int:
    from .pipeline import train

    subjects = _load_subjects(cfg)
    out = Path(cfg.out)
    result = train(subjects, cfg.model_config(), cfg.task, cfg.train_hyper(), out_dir=out)
    _report_training(args, result, out)
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    from .pipeline import finetune

    _require(cfg, "checkpoint")
    if cfg.task == "pretrain":
        raise ConfigError("task: fine-tuning needs a supervised task (sex, age or intelligence)")
    subjects = _load_subjects(cfg)
    out = Path(cfg.out)
    result = finetune(cfg.checkpoint, subjects, cfg.model_config(), cfg.task, cfg.train_hyper(), out_dir=out)
    _report_training(args, result, out)
    return EXIT_OK


def _checkpoint_split(cfg: RunConfig, subjects, meta: dict) -> list:
    from .pipeline import SplitSpec, split_subjects

    if "splits" in meta:
        wanted = set(meta["splits"][cfg.split])
        return [s for s in subjects if s.subject_id in wanted]
    return split_subjects(subjects, SplitSpec(cfg.seed))[cfg.split]


def cmd_eval(cfg: RunConfig, args) -> int:
    from .io import load_checkpoint
    from .pipeline import evaluate, prepare_subjects, window_homogeneity

    _require(cfg, "checkpoint")
    model, _, meta = load_checkpoint(cfg.checkpoint)
    task = meta.get("task", cfg.task)
    if task == "pretrain":
        raise ConfigError("task: a pre-training checkpoint has no supervised head to evaluate")
    subjects = prepare_subjects(_load_subjects(cfg), model.cfg.input_dims[1:])
    chosen = _checkpoint_split(cfg, subjects, meta)
    metrics, preds = evaluate(model.eval(), chosen, task)
    record = {"task": task, "split": cfg.split, "subjects": len(chosen), **metrics}
    lines = [f"{cfg.split} ({len(chosen)} subjects)"] + [f"  {k:<18} {v:.6f}" for k, v in metrics.items()]
    if args.windows and task == "sex":
        window_preds = [(p.window_outputs[:, 0] > 0).astype(int) for p in preds]
        homog = window_homogeneity(window_preds, [s.sex_label for s in chosen])
        record["windows"] = {
            "fraction_identical": homog["fraction_identical"],
            "histogram": {str(k): v for k, v in homog["histogram"].items()},
        }
        lines.append(f"  subjects with identical window predictions: {homog['fraction_identical']:.3f}")
        lines += [f"  accuracy {str(k):>6}: {v} subjects" for k, v in homog["histogram"].items()]
    _emit(args, record, "\n".join(lines))
    return EXIT_OK


def cmd_count(cfg: RunConfig, args) -> int:
    from .analysis import (
        REFERENCE_FLOPS,
        REFERENCE_PARAMS,
        complexity_ratios,
        count_windows,
        flops_estimate,
        param_count,
        receptive_field,
    )

    mcfg = cfg.model_config()
    params, flops = param_count(mcfg), flops_estimate(mcfg)
    ratios = complexity_ratios(mcfg)
    rf = receptive_field(mcfg)
    demo = count_windows((4, 8, 8, 8), (2, 4, 4, 4))
    stage1 = count_windows(mcfg.stage_token_dims(0), mcfg.window)
    record = {
        "window_demo": {"token_dims": [4, 8, 8, 8], "window": [2, 4, 4, 4], "regular": demo[0], "shifted": demo[1]},
        "stage1_windows": {"regular": stage1[0], "shifted": stage1[1]},
        "params": {"total": params.total, "by_module": params.by_module, "reference": REFERENCE_PARAMS},
        "flops": {"total": flops.total, "stage_totals": flops.stage_totals, "reference": REFERENCE_FLOPS},
        "ratios": ratios,
        "receptive_field": [dataclasses.asdict(s) for s in rf.stages],
        "full_spatial_stage": rf.full_spatial_stage,
        "full_temporal_stage": rf.full_temporal_stage,
    }
    lines = [
        f"windows on 4x8x8x8 tokens, window 2x4x4x4: {demo[0]} regular, {demo[1]} shifted",
        f"stage-1 windows: {stage1[0]} regular, {stage1[1]} shifted",
        f"parameters: {params.total:,} (reference {REFERENCE_PARAMS[mcfg.pos_embed_mode]:,} for the full-size model)",
    ]
    lines += [f"  {name:<12} {n:>12,}" for name, n in params.by_module.items()]
    lines += [
        f"FLOPs (12NC^2 + attention terms): {flops.total:,} (reference {REFERENCE_FLOPS:,}; conventions differ)",
        *[f"  stage {s}: {n:,}" for s, n in flops.stage_totals.items()],
        f"stage-1 windowed/linear term ratio: {ratios['windowed_over_linear']:.3f} (~{ratios['windowed_over_linear']:.2f})",
        f"stage-1 global/linear term ratio:   {ratios['global_over_linear']:.2f} (~{ratios['global_over_linear']:.0f})",
        "receptive field per stage (voxels, frames):",
        *[
            f"  stage {s.stage}: {'x'.join(map(str, s.spatial))} voxels, {s.temporal} frames"
            + (" (global)" if s.global_attention else "")
            for s in rf.stages
        ],
        f"full spatial coverage from stage {rf.full_spatial_stage}, full temporal from stage {rf.full_temporal_stage}",
    ]
    _emit(args, record, "\n".join(lines))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    from .analysis import throughput_bench

    res = throughput_bench(
        cfg.model_config(), n_samples=cfg.bench_samples, warmup=cfg.bench_warmup, repeats=cfg.bench_repeats
    )
    text = (
        f"throughput {res.samples_per_sec:.3f} +/- {res.stddev:.3f} samples/s over {len(res.repeats)} repeats; "
        f"{res.flops_per_sample:,} FLOPs/sample (analytic)"
    )
    _emit(args, dataclasses.asdict(res), text)
    return EXIT_OK


def cmd_attribute(cfg: RunConfig, args) -> int:
    from .attribution import aggregate_maps, ig_sq, write_slice_csvs
    from .io import load_checkpoint, write_container
    from .pipeline import infer_subject, prepare_subjects, subsequence_split

    _require(cfg, "checkpoint")
    model, _, meta = load_checkpoint(cfg.checkpoint)
    task = meta.get("task", cfg.task)
    if task != "sex":
        raise ConfigError("task: attribution maps are produced for the classification task only")
    subjects = prepare_subjects(_load_subjects(cfg), model.cfg.input_dims[1:])
    chosen = _checkpoint_split(cfg, subjects, meta)
    rng = np.random.default_rng(cfg.seed)
    maps, correct = [], []
    for s in chosen:
        pred = infer_subject(s, model)
        first = subsequence_split(s, model.cfg.input_dims[0])[0]
        maps.append(ig_sq(model, first.frames, None, cfg.ig_steps, cfg.ig_noise_sigma, cfg.ig_samples, rng))
        correct.append(int(pred.score > 0) == s.sex_label)
    group = aggregate_maps(maps, correct, cfg.map_smooth_sigma)
    out = Path(cfg.out)
    write_container(out / "group_map.s4d", {"values": group}, {"kind": "group_map", "subjects": sum(correct)}, "<f8")
    csvs = write_slice_csvs(group, out / "slices")
    record = {"subjects": len(chosen), "correct": int(sum(correct)), "map": str(out / "group_map.s4d"),
              "slices": len(csvs)}
    _emit(args, record, f"group map from {sum(correct)}/{len(chosen)} correct subjects -> {out}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset"),
    "train": (cmd_train, "train a task (or contrastive pre-training with --task pretrain)"),
    "eval": (cmd_eval, "subject-level metrics of a checkpoint on a split"),
    "finetune": (cmd_finetune, "fine-tune a pre-trained checkpoint at lr/10"),
    "count": (cmd_count, "parameter, FLOPs, window and receptive-field accounting"),
    "bench": (cmd_bench, "forward-pass throughput"),
    "attribute": (cmd_attribute, "IG-SQ group attribution map for a split"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swin4d",
        description="4D windowed-attention transformer toolkit.",
        epilog="configuration keys and defaults:\n" + defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat 'key = value' settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--task", choices=("sex", "age", "intelligence", "pretrain"))
        p.add_argument("--pos-embed", dest="pos_embed_mode", choices=("absolute", "relative"))
        p.add_argument("--subseq-len", dest="subseq_len", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", dest="data_dir", help="dataset directory (manifest.tsv + subject files)")
        p.add_argument("--checkpoint", help="checkpoint file to load")
        p.add_argument("--split", choices=("train", "val", "test"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--windows", action="store_true", help="eval: per-window prediction homogeneity")
    return parser


FLAG_KEYS = ("seed", "task", "pos_embed_mode", "subseq_len", "out", "data_dir", "checkpoint", "split")


def _thread_limit():
    value = os.environ.get("SWIN4D_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = parse_assignments(args.set)
        overrides.update({k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k) is not None})
        cfg = parse_config(args.config, overrides)
        with _thread_limit():
            return COMMANDS[args.command][0](cfg, args)
    except (OSError, RuntimeError, ContainerError) as exc:  # I/O failures, divergence
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:  # configuration / input validation (incl. ConfigError)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
