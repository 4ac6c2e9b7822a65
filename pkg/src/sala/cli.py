"""``sala`` command line: train, eval, profile, gradcheck and gen-data.

Every subcommand resolves its configuration, writes it to
``<output_dir>/resolved_config`` and keeps all artifacts inside that directory.
Failures exit non-zero with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import load_checkpoint
from .config import ConfigParseError, ExperimentConfig, emit_config, parse_config, parse_config_text
from .cost import benchmark_point_counts, count_macs, format_report, weight_footprint, write_report_json
from .geometry import PointCloud, read_sptc
from .gradcheck import format_results, run_suite
from .network import SegmentationNet
from .synthetic import generate_synthetic, write_dataset
from .training import ConfusionMatrix, miou, train, vote_inference

log = logging.getLogger("sala")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["training.seed"] = args.seed
        if args.command == "gen-data":
            overrides["data.seed"] = args.seed
    if args.workers is not None:
        overrides["training.workers"] = args.workers
    if args.neighbor_select is not None:
        overrides["network.neighbor_select"] = args.neighbor_select
    if args.output_dir is not None:
        overrides["output.dir"] = args.output_dir
    defaults = {"training.workers": os.cpu_count() or 1}
    if args.config is None:
        # without a file everything is built in; the seed defaults to 0
        defaults["training.seed"] = 0
        if args.output_dir is None:
            raise ConfigParseError("either --config or --output-dir is required")
        return parse_config_text("", overrides, defaults=defaults, source="<defaults>")
    return parse_config(args.config, overrides, defaults=defaults)


def write_resolved(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config").write_text(emit_config(cfg))
    return out


def _read_dir(directory: str) -> list[PointCloud]:
    paths = sorted(Path(directory).glob("*.sptc"))
    if not paths:
        raise CommandError(f"no .sptc files in {directory}")
    return [read_sptc(p) for p in paths]


def load_scenes(cfg: ExperimentConfig) -> tuple[list[PointCloud], list[PointCloud]]:
    """Training and validation scenes from SPTC1 directories or the synthetic generator."""
    d = cfg.data
    if d.train_dir is not None:
        train_scenes = _read_dir(d.train_dir)
        val_scenes = _read_dir(d.val_dir) if d.val_dir is not None else []
    else:
        scenes = generate_synthetic(d.synthetic)
        if not 0 <= d.val_rooms < len(scenes):
            raise CommandError(f"val_rooms={d.val_rooms} must leave training rooms out of {len(scenes)}")
        cut = len(scenes) - d.val_rooms
        train_scenes, val_scenes = scenes[:cut], scenes[cut:]
    for s in train_scenes + val_scenes:
        s.validate(cfg.network.num_classes)
    return train_scenes, val_scenes


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / "best.salaw"


def load_model(cfg: ExperimentConfig, path: Path | None = None) -> SegmentationNet:
    path = path or checkpoint_path(cfg)
    if not path.exists():
        raise CommandError(f"checkpoint {path} not found")
    model = SegmentationNet(cfg.network, cfg.aggregator, seed=cfg.training.seed)
    buffers_path = path.with_suffix(".buffers.salaw")
    buffers = load_checkpoint(buffers_path) if buffers_path.exists() else None
    model.load_state_dict(load_checkpoint(path), buffers)
    return model.eval()


def iou_table(per_class: np.ndarray, mean: float, method: str, class_names: Sequence[str] | None = None) -> str:
    """Markdown table: method, mIoU, then one IoU column per class (percent)."""
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(len(per_class))]
    head = ["Method", "mIoU"] + names
    cells = [method, f"{100 * mean:.1f}"] + ["-" if np.isnan(v) else f"{100 * v:.1f}" for v in per_class]
    return "\n".join(["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(cells) + " |"])


def evaluation_report(cm: ConfusionMatrix, method: str) -> dict:
    per_class, mean = miou(cm)
    return {"method": method, "miou": mean, "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
            "confusion": cm.counts.tolist(), "table": iou_table(per_class, mean, method)}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = write_resolved(cfg)
    train_scenes, val_scenes = load_scenes(cfg)
    result = train(train_scenes, val_scenes, cfg.network, cfg.aggregator, cfg.training, out)
    summary = {"best_val_miou": result.best_miou, "checkpoint": str(result.checkpoint) if result.checkpoint else None,
               "epochs": len(result.history)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = write_resolved(cfg)
    model = load_model(cfg)
    _, val_scenes = load_scenes(cfg)
    if not val_scenes:
        raise CommandError("no validation scenes to evaluate")
    cm = ConfusionMatrix(cfg.network.num_classes)
    for scene in val_scenes:
        pred = vote_inference(scene, model, cfg.training.sphere_radius, cfg.training.vote_stride,
                              cfg.feature_recipe)
        cm.update(scene.labels, pred)
    report = evaluation_report(cm, cfg.aggregator.family.value)
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    (out / "iou_table.md").write_text(report["table"] + "\n")
    print(report["table"])
    return EXIT_OK


def cmd_profile(cfg: ExperimentConfig, args) -> int:
    out = write_resolved(cfg)
    counts = benchmark_point_counts(cfg.network, args.points, seed=cfg.training.seed)
    report = count_macs(cfg.network, cfg.aggregator, counts, k=cfg.network.k_max)
    ckpt = checkpoint_path(cfg)
    if ckpt.exists():
        fp = weight_footprint(ckpt)
        report.notes.append(f"checkpoint {ckpt.name}: {fp['file_bytes']:,} bytes ({fp['params']:,} scalars)")
    write_report_json(report, out / "profile.json")
    text = format_report(report, f"{cfg.aggregator.family.value} C={cfg.network.C} S={cfg.aggregator.groups}")
    (out / "profile.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    out = write_resolved(cfg)
    results = run_suite(seeds=args.seeds, eps=args.eps)
    text = format_results(results, args.tol)
    (out / "gradcheck.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK if all(r.passed(args.tol) for r in results) else EXIT_FAILURE


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = write_resolved(cfg)
    scenes = generate_synthetic(cfg.data.synthetic)
    cut = len(scenes) - cfg.data.val_rooms
    if cut < 1:
        raise CommandError(f"val_rooms={cfg.data.val_rooms} leaves no training rooms")
    paths = write_dataset(scenes[:cut], out / "train") + write_dataset(scenes[cut:], out / "val")
    print(json.dumps({"train": str(out / "train"), "val": str(out / "val"), "files": len(paths),
                      "points": [len(s) for s in scenes]}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "profile": cmd_profile, "gradcheck": cmd_gradcheck,
            "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="overrides training.seed (and data.seed for gen-data)")
    common.add_argument("--workers", type=int, help="data preparation threads (default: logical cores)")
    common.add_argument("--neighbor-select", choices=("nearest", "random"), help="ball query overflow policy")
    common.add_argument("--output-dir", help="overrides output.dir")
    parser = argparse.ArgumentParser(prog="sala", description="soft-assignment local aggregation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and keep the best-validation checkpoint")
    sub.add_parser("eval", parents=[common], help="per-class IoU of a checkpoint on the validation scenes")
    p = sub.add_parser("profile", parents=[common], help="parameter and MAC report")
    p.add_argument("--points", type=int, default=15000, help="level-0 points of the benchmark crop")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all operators")
    g.add_argument("--seeds", type=int, default=100)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-3)
    sub.add_parser("gen-data", parents=[common], help="write synthetic SPTC1 scenes to <output_dir>/{train,val}")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SALA_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigParseError(f"SALA_LOG must be one of {', '.join(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
    except (ConfigParseError, ValueError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_CONFIG)
    try:
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # reported as structured error, not a traceback
        log.debug("command failed", exc_info=True)
        return _fail(type(exc).__name__, exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
