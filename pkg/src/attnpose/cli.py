"""Command-line entry point: train, finetune, eval, attn, and ablate.

A run is described by one INI-style config file with four sections
([model], [train], [augment], [data]) mirroring the config dataclasses;
``--set section.key=value`` flags override file values. Unknown sections or
keys are hard errors. Every command writes the fully resolved config into
the output directory so runs can be reproduced from their artifacts.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    ListingParseError,
    PoseDataset,
    SyntheticScene,
    generate_synthetic_dataset,
    load_dataset,
)
from .evaluation import (
    PAPER_ORIENTATION_RESOLUTION,
    PAPER_POSITION_RESOLUTION,
    MethodTable,
    aggregate_and_rank,
    baseline_comparison,
    evaluate_dataset,
    export_heatmap,
    load_method_tables,
    scene_medians,
    write_results_csv,
)
from .imageops import load_image
from .model import ConfigError, ModelConfig, TransPoseNet, extract_token_attention
from .train import (
    AugmentConfig,
    TrainConfig,
    TrainingDiverged,
    augment,
    train_stage1,
    train_stage2,
    write_loss_csv,
    write_manifest,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

ABLATION_GRIDS = {
    "layers": [2, 4, 6, 8],
    "dim": [64, 128, 256, 512],
    "routing": [("rdct3", "rdct3"), ("rdct3", "rdct4"), ("rdct4", "rdct3"), ("rdct4", "rdct4")],
    "backbone_width": [0.5, 1.0, 2.0],
}


@dataclass
class DataConfig:
    synthetic: bool = True
    scene_seed: int = 0
    n_landmarks: int = 10
    split_seed: int = 1
    train_samples: int = 8
    test_samples: int = 8
    root: str = ""
    train_listing: str = "train.txt"
    test_listing: str = "test.txt"


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    data: DataConfig


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig, "data": DataConfig}


def _coerce(text: str, annotation) -> object:
    origin = typing.get_origin(annotation)
    if origin is typing.Union or str(origin) == "types.UnionType":
        members = [a for a in typing.get_args(annotation) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        return _coerce(text, members[0])
    if annotation is bool:
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is str:
        return text
    if origin is tuple:
        parts = [p for p in text.replace(",", " ").split() if p]
        args = typing.get_args(annotation)
        elem = args[0] if args else int
        return tuple(_coerce(p, elem) for p in parts)
    raise ConfigError(f"unsupported config field type {annotation!r}")


def parse_run_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    """Merge file values and --set overrides over the dataclass defaults."""
    values: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                values[section][key] = value
    for override in overrides:
        if "=" not in override or "." not in override.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {override!r}")
        target, value = override.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {override!r}")
        values[section][key.strip()] = value.strip()

    built = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        fields = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values[section].items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kwargs[key] = _coerce(raw, fields[key])
        built[section] = cls(**kwargs)
    run = RunConfig(**built)
    run.model.validate()
    return run


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved_config(path, run: RunConfig) -> None:
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(run, section)):
            lines.append(f"{f.name} = {_format_value(getattr(getattr(run, section), f.name))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def _config_echo(run: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(run, name)) for name in _SECTIONS}


# ---- dataset assembly ----------------------------------------------------------


def build_dataset(run: RunConfig, split: str) -> PoseDataset:
    data = run.data
    if data.synthetic:
        scene = SyntheticScene(seed=data.scene_seed, n_landmarks=data.n_landmarks)
        n = data.train_samples if split == "train" else data.test_samples
        stream = 0 if split == "train" else 1
        return generate_synthetic_dataset(
            scene, n, rng=np.random.default_rng([data.split_seed, stream]),
            size=run.model.input_size, split=split)
    if not data.root:
        raise ConfigError("data.root must point at the dataset for non-synthetic runs")
    listing = data.train_listing if split == "train" else data.test_listing
    return load_dataset(data.root, listing, split=split)


def build_transform(run: RunConfig):
    """Train-time augmentation closure for file-backed datasets."""
    if run.data.synthetic or not run.augment.enabled:
        return None
    if run.augment.crop != run.model.input_size:
        raise ConfigError(
            f"augment.crop {run.augment.crop} must equal model.input_size {run.model.input_size}")
    return lambda img, rng: augment(img, "train", rng, run.augment)


def _prepare_out(args, run: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "config.ini", run)
    return out


# ---- subcommands -----------------------------------------------------------------


def cmd_train(args) -> int:
    run = parse_run_config(args.config, args.set or [])
    if args.synthetic:
        run.data.synthetic = True
    if args.epochs is not None:
        run.train.epochs = args.epochs
    if args.seed is not None:
        run.train.seed = args.seed
    out = _prepare_out(args, run)
    dataset = build_dataset(run, "train")
    model = TransPoseNet(run.model)
    result = train_stage1(model, dataset, run.train, transform=build_transform(run))
    extra = {"loss.s_x": result.weights.s_x.data, "loss.s_q": result.weights.s_q.data}
    model.save(out / "stage1.ckpt", extra=extra)
    write_loss_csv(out / "loss.csv", result.loss_curve)
    write_manifest(out / "manifest.json", _config_echo(run), run.train.seed, dataset)
    last = result.loss_curve[-1]
    print(f"stage1 done: {result.steps} steps, final loss {last.l_p:.6f} -> {out / 'stage1.ckpt'}")
    return EXIT_OK


def _adopt_checkpoint_model(run: RunConfig, model: TransPoseNet) -> RunConfig:
    """Evaluate/fine-tune against the checkpoint's own model configuration;
    an explicitly configured model section must agree with it."""
    if run.model not in (ModelConfig(), model.config):
        raise ConfigError(
            "model section of the config disagrees with the checkpoint; "
            "drop the [model] section or fix the mismatch")
    return dataclasses.replace(run, model=model.config)


def cmd_finetune(args) -> int:
    run = parse_run_config(args.config, args.set or [])
    if args.epochs is not None:
        run.train.epochs = args.epochs
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {ckpt}")
    model, extras = TransPoseNet.load(ckpt)
    run = _adopt_checkpoint_model(run, model)
    out = _prepare_out(args, run)
    dataset = build_dataset(run, "train")
    result = train_stage2(model, dataset, run.train, head=args.head, transform=build_transform(run))
    target = out / f"stage2_{args.head}.ckpt"
    model.save(target, extra=extras)
    write_loss_csv(out / f"loss_stage2_{args.head}.csv", result.loss_curve)
    write_manifest(out / "manifest.json", _config_echo(run), run.train.seed, dataset)
    print(f"stage2 {args.head} done: {result.steps} steps -> {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = parse_run_config(args.config, args.set or [])
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _ = TransPoseNet.load(ckpt)
    run = _adopt_checkpoint_model(run, model)
    out = _prepare_out(args, run)
    dataset = build_dataset(run, args.split)
    records = evaluate_dataset(model, dataset)
    pos_med, ang_med = scene_medians(records)
    write_results_csv(out / "results.csv", [(dataset.scene, args.method_name, pos_med, ang_med)])
    print(f"{dataset.scene}: median position {pos_med:.4f} units, median orientation {ang_med:.3f} deg")

    if args.reference_tables:
        tables = load_method_tables(args.reference_tables)
        ours = MethodTable(args.method_name, {dataset.scene: (pos_med, ang_med)})
        ranked = aggregate_and_rank(
            [t for t in tables if t.method != args.baseline_method],
            position_resolution=PAPER_POSITION_RESOLUTION,
            orientation_resolution=PAPER_ORIENTATION_RESOLUTION,
        )
        with open(out / "ranks.csv", "w") as fh:
            fh.write("method,avg_pos_m,avg_ang_deg,pos_rank,ang_rank,final_rank\n")
            for row in ranked:
                fh.write(f"{row.method},{row.avg_position:.4f},{row.avg_orientation:.4f},"
                         f"{row.position_rank},{row.orientation_rank},{row.final_rank}\n")
        by_method = {t.method: t for t in tables}
        if args.baseline_method in by_method:
            target = by_method.get(args.method_name, ours if set(ours.scenes) == set(
                by_method[args.baseline_method].scenes) else None)
            if target is not None:
                cmp = baseline_comparison(target, by_method[args.baseline_method])
                print(f"under baseline: {cmp.cells_under}/{cmp.cells_total} cells, "
                      f"{cmp.results_under}/{cmp.results_total} with the dataset average")
        print(f"rank table -> {out / 'ranks.csv'}")
    return EXIT_OK


def cmd_attn(args) -> int:
    run = parse_run_config(args.config, args.set or [])
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _ = TransPoseNet.load(ckpt)
    run = _adopt_checkpoint_model(run, model)
    out = _prepare_out(args, run)
    size = model.config.input_size
    if args.image:
        image = load_image(args.image)
        if image.shape[1:] != (size, size):
            aug = AugmentConfig(resize_to=max(size, round(size * 256 / 224)), crop=size, jitter=0.0)
            image = augment(image, "test", cfg=aug)
        image_id = Path(args.image).stem
    else:
        dataset = build_dataset(run, "test")
        idx = args.index
        if not 0 <= idx < len(dataset):
            raise ConfigError(f"--index {idx} outside the {len(dataset)}-sample test split")
        image = dataset.image(idx)
        image_id = dataset[idx].image_id
    _, _, attn_x, attn_q = model.forward(image)
    for branch_name, attn, branch in (
        ("position", attn_x, model.position_branch),
        ("orientation", attn_q, model.orientation_branch),
    ):
        heat = extract_token_attention(attn, branch.h_m, branch.w_m)
        export_heatmap(heat, target_size=size, out_dir=out, image_id=image_id, branch=branch_name)
        print(f"{branch_name} heatmap {heat.shape[0]}x{heat.shape[1]} -> "
              f"{out / f'{image_id}.{branch_name}.png'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = parse_run_config(args.config, args.set or [])
    if args.epochs is not None:
        run.train.epochs = args.epochs
    out = _prepare_out(args, run)
    train_ds = build_dataset(run, "train")
    test_ds = build_dataset(run, "test")
    rows = []
    for value in ABLATION_GRIDS[args.axis]:
        if args.axis == "layers":
            cfg = dataclasses.replace(run.model, n_blocks=value)
            label = str(value)
        elif args.axis == "dim":
            cfg = dataclasses.replace(run.model, embed_dim=value)
            label = str(value)
        elif args.axis == "routing":
            cfg = dataclasses.replace(run.model, position_map=value[0], orientation_map=value[1])
            label = f"{value[0]}/{value[1]}"
        else:
            widths = tuple(max(1, round(w * value)) for w in run.model.backbone_widths)
            cfg = dataclasses.replace(run.model, backbone_widths=widths)
            label = f"x{value}"
        model = TransPoseNet(cfg)
        train_stage1(model, train_ds, run.train, transform=build_transform(run))
        pos_med, ang_med = scene_medians(evaluate_dataset(model, test_ds))
        rows.append((label, pos_med, ang_med))
        print(f"{args.axis}={label}: position {pos_med:.4f}, orientation {ang_med:.3f}")
    path = out / f"ablation_{args.axis}.csv"
    with open(path, "w") as fh:
        fh.write(f"{args.axis},pos_median,ang_median_deg\n")
        for label, p, a in rows:
            fh.write(f"{label},{p},{a}\n")
    print(f"ablation table -> {path}")
    return EXIT_OK


# ---- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="stage-1 training")
    common(p_train)
    p_train.add_argument("--synthetic", action="store_true", help="force the synthetic scene")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.set_defaults(func=cmd_train)

    p_ft = sub.add_parser("finetune", help="stage-2 head fine-tuning")
    common(p_ft)
    p_ft.add_argument("--checkpoint", required=True)
    p_ft.add_argument("--head", required=True, choices=["position", "orientation"])
    p_ft.add_argument("--epochs", type=int)
    p_ft.set_defaults(func=cmd_finetune)

    p_eval = sub.add_parser("eval", help="median errors and optional rank table")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "test"])
    p_eval.add_argument("--reference-tables", help="results CSV with published per-scene rows")
    p_eval.add_argument("--baseline-method", default="IRBaseline")
    p_eval.add_argument("--method-name", default="ours")
    p_eval.set_defaults(func=cmd_eval)

    p_attn = sub.add_parser("attn", help="export attention heatmaps")
    common(p_attn)
    p_attn.add_argument("--checkpoint", required=True)
    p_attn.add_argument("--image", help="image file; defaults to a synthetic test sample")
    p_attn.add_argument("--index", type=int, default=0)
    p_attn.set_defaults(func=cmd_attn)

    p_abl = sub.add_parser("ablate", help="sweep one architecture axis")
    common(p_abl)
    p_abl.add_argument("--axis", required=True, choices=sorted(ABLATION_GRIDS))
    p_abl.add_argument("--epochs", type=int)
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ListingParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures keep a stable exit code
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
