"""Command-line pipeline: generate | train | calibrate | score | evaluate | bench.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numeric
error, 5 calibration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as _data
from . import maps as _maps
from . import report as _report
from .artifacts import StatisticsArtifact, calibrate_pipeline, file_sha256
from .config import PipelineConfig, load_config, resolve_epsilon
from .errors import ConfigurationError, InputError, ToolkitError
from .networks import (
    ArchSpec,
    TrainHParams,
    init_networks,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .scoring import bench_stages, evaluate, score_image


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config file (key=value)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output path (meaning depends on command)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(
        prog="twobranch",
        description="Two-branch image anomaly detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common],
                   help="write the synthetic dataset as a directory tree")

    p_train = sub.add_parser("train", parents=[common],
                             help="train the backbone, write a checkpoint")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_cal = sub.add_parser("calibrate", parents=[common],
                           help="fit all calibrations, write the statistics file")
    p_cal.add_argument("--checkpoint", required=True)

    p_score = sub.add_parser("score", parents=[common], help="score a single image")
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--statistics", required=True)
    p_score.add_argument("--image", required=True)
    p_score.add_argument("--heatmap", default=None, help="write the combined map as a PNG")
    p_score.add_argument("--raw-map", default=None, help="write the combined map as raw floats")
    p_score.add_argument("--allow-mismatch", action="store_true",
                         help="skip the checkpoint hash check")

    p_eval = sub.add_parser("evaluate", parents=[common],
                            help="score the test split, write report files")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--statistics", required=True)
    p_eval.add_argument("--branch", default="both",
                        choices=["both", "picturable", "unpicturable",
                                 "picturable-only", "unpicturable-only"])
    p_eval.add_argument("--allow-mismatch", action="store_true")

    p_bench = sub.add_parser("bench", parents=[common],
                             help="print the per-stage latency table")
    p_bench.add_argument("--checkpoint", required=True)
    p_bench.add_argument("--statistics", required=True)
    p_bench.add_argument("--warmup", type=int, default=None)
    p_bench.add_argument("--repeats", type=int, default=None)
    p_bench.add_argument("--allow-mismatch", action="store_true")
    return parser


def _effective_config(args) -> PipelineConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.values["seed"] = args.seed
    return config


def _arch_for_dataset(config: PipelineConfig, dataset) -> ArchSpec:
    first = dataset.split(_data.Split.TRAIN)[0].pixels
    h, w, c = first.shape
    return ArchSpec.for_size(
        config["backbone.size_tag"], h_in=h, w_in=w, c_in=c,
        c_out=config.get("backbone.out_channels"),
    )


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigurationError("this command requires --out")
    return Path(args.out)


def _check_statistics(args, stats: StatisticsArtifact) -> None:
    if getattr(args, "allow_mismatch", False):
        return
    recorded = stats.provenance.get("checkpoint_sha256")
    actual = file_sha256(args.checkpoint)
    if recorded != actual:
        raise InputError(
            "statistics file was calibrated against a different checkpoint "
            f"(recorded {recorded}, got {actual}); pass --allow-mismatch to override"
        )


def cmd_generate(args) -> int:
    config = _effective_config(args)
    if config["dataset.source"] != "synthetic":
        raise ConfigurationError("generate requires dataset.source=synthetic")
    out = _require_out(args)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"output directory {out} is not empty; use --force to overwrite")
    bundle = _data.generate_synthetic(_data.SynthConfig.from_pipeline_config(config))
    written = _data.export_loco_layout(bundle, out)
    test = bundle.split(_data.Split.TEST)
    by_label = {label: sum(1 for s in test if s.label is label) for label in _data.Label}
    print(f"wrote {written} images to {out}")
    print(
        f"train={len(bundle.split(_data.Split.TRAIN))} "
        f"validation={len(bundle.split(_data.Split.VALIDATION))} "
        f"test={len(test)} (normal={by_label[_data.Label.NORMAL]} "
        f"structural={by_label[_data.Label.STRUCTURAL]} "
        f"logical={by_label[_data.Label.LOGICAL]})"
    )
    return 0


def cmd_train(args) -> int:
    config = _effective_config(args)
    out = _require_out(args)
    dataset = _data.load_dataset(config)
    steps = config["backbone.steps"]
    if args.resume:
        nets = load_checkpoint(args.resume)
        if steps == 0:
            save_checkpoint(nets, out)
            print(f"resumed {args.resume} for 0 steps; checkpoint rewritten to {out}")
            return 0
    else:
        nets = init_networks(_arch_for_dataset(config, dataset), seed=config.seed)
    hparams = TrainHParams(
        steps=steps,
        learning_rate=config["backbone.learning_rate"],
        batch_size=config["backbone.batch_size"],
        seed=config.seed,
        teacher_mode=config["backbone.teacher_mode"],
    )
    train(nets, dataset.split(_data.Split.TRAIN), hparams)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(nets, out)
    losses_path = out.with_name(out.name + ".losses.csv")
    with open(losses_path, "w", encoding="utf-8") as fh:
        fh.write("step,loss_student,loss_autoencoder,loss_latter,total\n")
        for row in nets.loss_trace:
            fh.write(",".join(repr(v) for v in row) + "\n")
    final = nets.loss_trace[-1][4] if nets.loss_trace else float("nan")
    print(f"trained {steps} steps; final loss {final:.6g}")
    print(f"checkpoint: {out}")
    print(f"loss trace: {losses_path}")
    return 0


def cmd_calibrate(args) -> int:
    config = _effective_config(args)
    out = _require_out(args)
    dataset = _data.load_dataset(config)
    nets = load_checkpoint(args.checkpoint)
    artifact = calibrate_pipeline(
        nets,
        dataset,
        source=config["unpicturable.source"],
        epsilon=resolve_epsilon(config),
        q_low=config["picturable.q_low"],
        q_high=config["picturable.q_high"],
        provenance={
            "config_sha256": config.sha256(),
            "seed": config.seed,
            "checkpoint_sha256": file_sha256(args.checkpoint),
        },
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    artifact.save(out)
    calib = artifact.calibration
    print(f"statistics: {out}")
    print(
        f"gaussian: source={calib.source} dim={calib.gaussian.mean.shape[0]} "
        f"samples={calib.gaussian.sample_count} epsilon={calib.gaussian.epsilon:.6g}"
    )
    print(
        f"map quantiles: local=({calib.map_normalizer.local_low:.6g}, "
        f"{calib.map_normalizer.local_high:.6g}) global=({calib.map_normalizer.global_low:.6g}, "
        f"{calib.map_normalizer.global_high:.6g})"
    )
    return 0


def cmd_score(args) -> int:
    _effective_config(args)  # validates the config file
    image_path = Path(args.image)
    if not image_path.is_file():
        raise InputError(f"image file not found: {image_path}")
    nets = load_checkpoint(args.checkpoint)
    stats = StatisticsArtifact.load(args.statistics)
    _check_statistics(args, stats)
    image = _data.load_image(image_path)
    scores = score_image(nets, stats.calibration, image, keep_map=True)
    print(f"fused_score: {scores.fused!r}")
    print(f"picturable: raw={scores.raw_picturable!r} z={scores.z_picturable!r}")
    print(f"unpicturable: raw={scores.raw_unpicturable!r} z={scores.z_unpicturable!r}")
    if args.heatmap:
        _maps.save_heatmap_png(scores.combined_map, args.heatmap)
        print(f"heatmap: {args.heatmap}")
    if args.raw_map:
        _maps.save_map_raw(scores.combined_map, args.raw_map)
        print(f"raw map: {args.raw_map}")
    return 0


def cmd_evaluate(args) -> int:
    config = _effective_config(args)
    out = Path(args.out) if args.out else None
    if out is None and config.get("eval.out_dir"):
        out = Path(config["eval.out_dir"])
    if out is None:
        raise ConfigurationError("evaluate requires --out (or eval.out_dir in the config)")
    dataset = _data.load_dataset(config)
    nets = load_checkpoint(args.checkpoint)
    stats = StatisticsArtifact.load(args.statistics)
    _check_statistics(args, stats)
    branch = args.branch.removesuffix("-only")
    result = evaluate(
        nets,
        stats.calibration,
        dataset.split(_data.Split.TEST),
        branch=branch,
        workers=config["eval.workers"],
    )
    paths = _report.write_report(result, out)
    print(f"report: {paths['report']}")
    print(f"records: {paths['records']}")
    block = result.aurocs["fused" if branch == "both" else branch]
    for subset, value in block.items():
        print(f"auroc.{subset}: {'absent' if value is None else f'{value:.4f}'}")
    print(f"latency.total.mean_ms: {result.latency_ms['total']['mean']:.3f}")
    return 0


def cmd_bench(args) -> int:
    config = _effective_config(args)
    dataset = _data.load_dataset(config)
    nets = load_checkpoint(args.checkpoint)
    stats = StatisticsArtifact.load(args.statistics)
    _check_statistics(args, stats)
    validation = dataset.split(_data.Split.VALIDATION)
    image = validation[0].pixels
    warmup = args.warmup if args.warmup is not None else config["eval.warmup"]
    repeats = args.repeats if args.repeats is not None else config["eval.repeats"]
    medians = bench_stages(nets, stats.calibration, image, warmup=warmup, repeats=repeats)
    total = medians["total"]
    lines = [f"{'stage':<14}{'median_ms':>12}{'share':>9}"]
    for stage in (*("forward", "picturable", "unpicturable", "fusion"), "total"):
        share = medians[stage] / total if total else 0.0
        lines.append(f"{stage:<14}{medians[stage]:>12.4f}{share:>8.1%}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n", encoding="utf-8")
        print(f"table written to {args.out}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    # single compute thread keeps scores bit-reproducible across runs
    torch.set_num_threads(1)
    try:
        return _COMMANDS[args.command](args)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
