"""Command-line entry point: prepare, toy, train, finetune, translate, evaluate, report."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig, load_config, write_frozen
from .evaluation import (
    aggregate_rows,
    evaluate_translation,
    read_rows_csv,
    write_rows_csv,
    write_tables,
)
from .losses import DivergenceError
from .models import CheckpointError, ConfigError, load_checkpoint, make_model, numpy_translator
from .toybench import oracle_score, read_truth, toy_splits, write_truth
from .training import LossHistory, fine_tune, train_from_scratch

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
DOMAIN_NAMES = ("X", "Y")


class CLIError(Exception):
    pass


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _outdir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CLIError(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.output_dir:
        cfg.output_dir = str(args.output_dir)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.model.seed = args.seed
        cfg.toy.spec = dataclasses.replace(cfg.toy.spec, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.finetune = dataclasses.replace(cfg.finetune, seed=args.seed)
    if args.deterministic:
        cfg.train = dataclasses.replace(cfg.train, deterministic=True)
        cfg.finetune = dataclasses.replace(cfg.finetune, deterministic=True)
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        section = "finetune" if args.command == "finetune" else "train"
        try:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), epochs=epochs))
        except ValueError as exc:
            raise ConfigError(f"[{section}] with --epochs {epochs}: {exc}") from exc
    return cfg


def _data_dir(args, cfg) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(cfg.output_dir) / "data"


# --------------------------------------------------------------------------- commands


def cmd_prepare(args, cfg: ExperimentConfig) -> int:
    dc = cfg.data
    if not dc.x_paths or not dc.y_paths:
        raise CLIError("[data] x_paths and y_paths must both list at least one volume")
    for p in list(dc.x_paths) + list(dc.y_paths):
        if not Path(p).exists():
            raise CLIError(f"input path does not exist: {p}")
    vx = [data_mod.load_volume(p, "X") for p in dc.x_paths]
    vy = [data_mod.load_volume(p, "Y") for p in dc.y_paths]
    splits = data_mod.build_dataset(vx, vy, dc)
    out = _outdir(Path(cfg.output_dir) / "data", args.force)
    manifest = data_mod.save_dataset(out, splits, dc, {"sources": {"x": list(dc.x_paths), "y": list(dc.y_paths)}})
    write_frozen(cfg, out)
    _emit({"event": "prepared", "manifest": str(manifest), **splits.report["counts"]})
    return EXIT_OK


def cmd_toy(args, cfg: ExperimentConfig) -> int:
    splits, full = toy_splits(cfg.toy.spec, cfg.toy.n_test)
    out = _outdir(Path(cfg.output_dir) / "data", args.force)
    crop = cfg.toy.spec.image_size
    dc = dataclasses.replace(cfg.data, crop_size=crop, normalization="minmax", axes=["axial"])
    manifest = data_mod.save_dataset(out, splits, dc, {"sources": {"x": ["toy"], "y": ["toy"]}})
    truth = write_truth(Path(cfg.output_dir) / "toy_truth.json", full)
    write_frozen(cfg, out)
    _emit({"event": "toy", "manifest": str(manifest), "truth": str(truth), **splits.report["counts"]})
    return EXIT_OK


def _train_outputs(out: Path, result, cfg) -> None:
    result.history.to_csv(out / "history.csv")
    from .plotting import plot_loss_curves

    plot_loss_curves(result.history, out / "loss_curves.png", DOMAIN_NAMES)


def _run_training(args, cfg: ExperimentConfig, phase: str) -> int:
    ddir = _data_dir(args, cfg)
    data_mod.load_manifest(ddir)
    train_ds = data_mod.load_split(ddir, "train")
    ckpt = None
    if phase == "finetune":
        ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "train/checkpoints/scratch_final.pt"
        load_checkpoint(ckpt, cfg.model.generator, cfg.model.discriminator)
    out = _outdir(Path(cfg.output_dir) / phase, args.force)
    write_frozen(cfg, out)
    info = {"phase": phase, "data": str(ddir), "manifest_sha256": _sha256(ddir / data_mod.MANIFEST_NAME),
            "slices": train_ds.counts()}
    try:
        if phase == "train":
            tc = cfg.train
            model = make_model(cfg.model.generator, cfg.model.discriminator, cfg.model.seed)
            result = train_from_scratch(model, train_ds, tc, out / "checkpoints", _emit)
        else:
            tc = cfg.finetune
            info["init_checkpoint"] = str(ckpt)
            result = fine_tune(ckpt, train_ds, tc, out / "checkpoints", _emit)
    except DivergenceError as exc:
        last = getattr(exc, "last_checkpoint", None)
        print(f"error: training diverged: {exc}; last checkpoint: {last}", file=sys.stderr)
        return EXIT_DIVERGED
    _train_outputs(out, result, cfg)
    final = result.checkpoints[-1]
    info.update({"final_checkpoint": str(final), "final_checkpoint_sha256": _sha256(final),
                 "iterations": len(result.history)})
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _emit({"event": "done", **info})
    return EXIT_OK


def cmd_train(args, cfg):
    return _run_training(args, cfg, "train")


def cmd_finetune(args, cfg):
    return _run_training(args, cfg, "finetune")


def _read_inputs(path: Path, size: int, axis: str):
    """Return (kind, names, preprocessed slices, volume-or-None)."""
    if path.is_dir() or path.suffix.lower() == ".png":
        from PIL import Image

        files = sorted(path.glob("*.png")) if path.is_dir() else [path]
        if not files:
            raise CLIError(f"no PNG slices in {path}")
        slices = []
        for f in files:
            with Image.open(f) as im:
                slices.append(data_mod.preprocess_slice(np.array(im), size, "minmax")[0])
        return "png", [f.name for f in files], slices, None
    vol = data_mod.load_volume(path)
    bounds = data_mod.percentile_bounds(vol.voxels)
    raw = data_mod.slice_volume(vol, axis)
    slices = [data_mod.preprocess_slice(r, size, "percentile", bounds)[0] for r in raw]
    return "nifti", [f"{vol.volume_id}_{i:04d}" for i in range(len(slices))], slices, vol


def cmd_translate(args, cfg: ExperimentConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    src = Path(args.input)
    if not src.exists():
        raise CLIError(f"input not found: {src}")
    kind, names, slices, vol = _read_inputs(src, model.gen_spec.image_size, args.axis)
    stem = data_mod._volume_id(src) if src.is_file() else src.name
    out = _outdir(Path(cfg.output_dir) / "translate" / f"{stem}_{args.direction}", args.force)
    translated = numpy_translator(model)(np.stack(slices), args.direction)
    if kind == "png":
        from PIL import Image

        for name, img in zip(names, translated):
            Image.fromarray(data_mod.to_uint16(img)).save(out / name)
    else:
        data_mod.save_nifti(out / f"{stem}_{args.direction}.nii.gz",
                            data_mod.stack_slices(list(translated.astype(np.float32)), args.axis), vol.spacing)
    from .plotting import plot_contact_sheet

    k = min(8, len(slices))
    plot_contact_sheet(slices[:k], translated[:k], out / "panel.png", ("input", f"translated ({args.direction})"))
    _emit({"event": "translated", "count": len(slices), "output": str(out)})
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    ddir = _data_dir(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "train/checkpoints/scratch_final.pt"
    model, _ = load_checkpoint(ckpt)
    test = data_mod.load_split(ddir, "test")
    if not test.domain_x or not test.domain_y:
        raise CLIError(f"test split in {ddir} is empty")
    out = _outdir(Path(cfg.output_dir) / "eval", args.force)
    write_frozen(cfg, out)
    translator = numpy_translator(model)
    report = evaluate_translation(
        translator,
        [r.pixels for r in test.domain_x], [r.pixels for r in test.domain_y], cfg.eval,
        ids_x=[r.key for r in test.domain_x], ids_y=[r.key for r in test.domain_y],
        domain_names=DOMAIN_NAMES, manifest=str(ddir / data_mod.MANIFEST_NAME),
    )
    write_rows_csv(out / "rows.csv", report.rows)
    write_tables(out, report)
    (out / "aggregates.json").write_text(json.dumps(report.aggregates, indent=2, sort_keys=True) + "\n")
    (out / "tables.json").write_text(json.dumps(report.tables, indent=2, sort_keys=True) + "\n")
    from .plotting import plot_ssim_panel

    for direction, records in (("x_to_y", test.domain_x), ("y_to_x", test.domain_y)):
        chosen = records[: cfg.eval.panel_count]
        if not chosen:
            continue
        src = np.stack([r.pixels for r in chosen])
        tr = translator(src, direction)
        panel = [(r.key, s, t, report.ssim_maps[f"{direction}/{r.key}"]) for r, s, t in zip(chosen, src, tr)]
        plot_ssim_panel(panel, out / f"ssim_{direction}.png")
    if args.truth:
        truth = read_truth(args.truth)
        scores = oracle_score(translator, np.stack([r.pixels for r in test.domain_x]),
                              np.stack([r.pixels for r in test.domain_y]), truth, cfg.eval.bins)
        (out / "oracle.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    info = {"checkpoint": str(ckpt), "checkpoint_sha256": _sha256(ckpt), "manifest": report.manifest,
            "manifest_sha256": _sha256(ddir / data_mod.MANIFEST_NAME), "rows": len(report.rows)}
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _emit({"event": "evaluated", **info})
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    root = Path(cfg.output_dir)
    out = _outdir(root / "report", args.force)
    from .plotting import plot_loss_curves

    lines = ["# Run report", ""]
    found = False
    for phase in ("train", "finetune"):
        hist_path = root / phase / "history.csv"
        if hist_path.is_file():
            found = True
            hist = LossHistory.from_csv(hist_path)
            plot_loss_curves(hist, out / f"loss_curves_{phase}.png", DOMAIN_NAMES)
            gen = hist.column("gen_total")
            lines += [f"## {phase}", "",
                      f"- iterations: {len(hist)}",
                      f"- generator total: first {gen[0]:.4f}, last {gen[-1]:.4f}",
                      f"- discriminator losses finite: {bool(np.isfinite(hist.column('disc_x_loss')).all() and np.isfinite(hist.column('disc_y_loss')).all())}",
                      ""]
    rows_path = root / "eval" / "rows.csv"
    if rows_path.is_file():
        found = True
        rows = read_rows_csv(rows_path)
        agg = aggregate_rows(rows)
        stored = json.loads((root / "eval" / "aggregates.json").read_text())
        lines += ["## evaluation", "", f"- rows: {len(rows)}",
                  f"- aggregates match rows.csv: {agg == stored}", ""]
        md = root / "eval" / "tables.md"
        if md.is_file():
            lines += [md.read_text()]
    if not found:
        raise CLIError(f"nothing to report under {root}")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _emit({"event": "report", "output": str(out / "report.md")})
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "toy": cmd_toy,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--deterministic", action="store_true", help="deterministic execution backend")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="cycletrans", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="slice volumes into an unpaired dataset")
    sub.add_parser("toy", parents=[common], help="generate the synthetic two-domain dataset")
    for name in ("train", "finetune"):
        p = sub.add_parser(name, parents=[common], help=f"{name} the translation model")
        p.add_argument("--epochs", type=int)
        p.add_argument("--data", help="prepared dataset directory (default: <output_dir>/data)")
        if name == "finetune":
            p.add_argument("--checkpoint", help="initial checkpoint (default: scratch final)")
    p = sub.add_parser("translate", parents=[common], help="translate PNG slices or a NIfTI volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--direction", required=True, choices=["x_to_y", "y_to_x"])
    p.add_argument("--axis", default="axial", choices=sorted(data_mod.AXES))
    p = sub.add_parser("evaluate", parents=[common], help="SSIM / BD / HC report on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--truth", help="toy ground-truth JSON for oracle scoring")
    sub.add_parser("report", parents=[common], help="render loss curves and summary from run outputs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (CLIError, ConfigError, CheckpointError, data_mod.LoadError, data_mod.DatasetConfigError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
