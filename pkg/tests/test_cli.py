import csv

import numpy as np
import pytest

from twobranch.cli import main
from twobranch.data import Split, load_loco_layout
from twobranch.networks import load_checkpoint

CONFIG_TEXT = """
seed = 11
dataset.source = synthetic
dataset.image_size = 32
dataset.object_count_min = 2
dataset.object_count_max = 2
dataset.disc_radius = 4
dataset.defect_radius = 2
dataset.train_count = 32
dataset.validation_count = 8
dataset.test_normal_count = 8
dataset.test_structural_count = 6
dataset.test_logical_count = 6
backbone.steps = 150
backbone.learning_rate = 0.01
backbone.batch_size = 8
"""


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """One full CLI pipeline: generate -> train -> calibrate -> evaluate."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.cfg"
    config.write_text(CONFIG_TEXT)
    paths = {
        "root": root,
        "config": config,
        "data": root / "data",
        "checkpoint": root / "model.ckpt",
        "statistics": root / "stats.bin",
        "eval": root / "eval",
    }
    assert main(["generate", "--config", str(config), "--out", str(paths["data"])]) == 0
    assert main(["train", "--config", str(config), "--out", str(paths["checkpoint"])]) == 0
    assert main([
        "calibrate", "--config", str(config),
        "--checkpoint", str(paths["checkpoint"]), "--out", str(paths["statistics"]),
    ]) == 0
    assert main([
        "evaluate", "--config", str(config),
        "--checkpoint", str(paths["checkpoint"]),
        "--statistics", str(paths["statistics"]),
        "--out", str(paths["eval"]),
    ]) == 0
    return paths


def read_records(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_refuses_nonempty_without_force(cli_run, capsys):
    code = main([
        "generate", "--config", str(cli_run["config"]), "--out", str(cli_run["data"]),
    ])
    assert code == 3
    assert "--force" in capsys.readouterr().err


def test_generate_force_is_byte_identical(cli_run, tmp_path):
    other = tmp_path / "data2"
    assert main([
        "generate", "--config", str(cli_run["config"]), "--out", str(other),
    ]) == 0
    originals = sorted(cli_run["data"].rglob("*.png"))
    copies = sorted(other.rglob("*.png"))
    assert len(originals) == len(copies) > 0
    for a, b in zip(originals, copies):
        assert a.relative_to(cli_run["data"]) == b.relative_to(other)
        assert a.read_bytes() == b.read_bytes()
    assert main([
        "generate", "--config", str(cli_run["config"]), "--out", str(other), "--force",
    ]) == 0


def test_generated_directory_loads_back(cli_run):
    bundle = load_loco_layout(cli_run["data"])
    assert len(bundle.split(Split.TRAIN)) == 32
    assert len(bundle.split(Split.VALIDATION)) == 8
    assert len(bundle.split(Split.TEST)) == 20


def test_missing_count_names_key(cli_run, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(CONFIG_TEXT.replace("dataset.test_logical_count = 6\n", ""))
    code = main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "dataset.test_logical_count" in capsys.readouterr().err


def test_trained_checkpoint_reloads(cli_run):
    nets = load_checkpoint(cli_run["checkpoint"])
    assert nets.trained
    assert nets.arch.h_in == 32


def test_resume_zero_steps_keeps_bytes(cli_run, tmp_path):
    config = tmp_path / "resume.cfg"
    config.write_text(CONFIG_TEXT.replace("backbone.steps = 150", "backbone.steps = 0"))
    out = tmp_path / "resumed.ckpt"
    assert main([
        "train", "--config", str(config),
        "--resume", str(cli_run["checkpoint"]), "--out", str(out),
    ]) == 0
    assert out.read_bytes() == cli_run["checkpoint"].read_bytes()


def test_loss_trace_smoothed_non_increasing(cli_run):
    losses_path = cli_run["checkpoint"].with_name(cli_run["checkpoint"].name + ".losses.csv")
    rows = read_records(losses_path)
    assert len(rows) == 150
    totals = np.array([float(r["total"]) for r in rows])
    windows = totals.reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_calibrate_is_deterministic(cli_run, tmp_path):
    again = tmp_path / "stats2.bin"
    assert main([
        "calibrate", "--config", str(cli_run["config"]),
        "--checkpoint", str(cli_run["checkpoint"]), "--out", str(again),
    ]) == 0
    assert again.read_bytes() == cli_run["statistics"].read_bytes()


def test_statistics_provenance(cli_run):
    from twobranch.artifacts import StatisticsArtifact, file_sha256

    artifact = StatisticsArtifact.load(cli_run["statistics"])
    assert artifact.provenance["train_samples"] == 32
    assert artifact.provenance["validation_samples"] == 8
    assert artifact.provenance["checkpoint_sha256"] == file_sha256(cli_run["checkpoint"])
    assert artifact.provenance["seed"] == 11


def test_score_prints_and_writes_heatmap(cli_run, tmp_path, capsys):
    image = cli_run["data"] / "test" / "good" / "000.png"
    heatmap = tmp_path / "heat.png"
    raw = tmp_path / "map.amap"
    code = main([
        "score", "--config", str(cli_run["config"]),
        "--checkpoint", str(cli_run["checkpoint"]),
        "--statistics", str(cli_run["statistics"]),
        "--image", str(image), "--heatmap", str(heatmap), "--raw-map", str(raw),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "fused_score:" in out
    assert heatmap.is_file()
    assert raw.is_file()


def test_score_missing_image_is_input_error(cli_run, capsys):
    code = main([
        "score", "--config", str(cli_run["config"]),
        "--checkpoint", str(cli_run["checkpoint"]),
        "--statistics", str(cli_run["statistics"]),
        "--image", str(cli_run["root"] / "ghost.png"),
    ])
    assert code == 3
    assert "ghost.png" in capsys.readouterr().err


def test_score_matches_evaluate_record(cli_run, capsys):
    records = read_records(cli_run["eval"] / "records.csv")
    target = next(r for r in records if r["sample_id"] == "test/good/000")
    image = cli_run["data"] / "test" / "good" / "000.png"
    assert main([
        "score", "--config", str(cli_run["config"]),
        "--checkpoint", str(cli_run["checkpoint"]),
        "--statistics", str(cli_run["statistics"]), "--image", str(image),
    ]) == 0
    out = capsys.readouterr().out
    printed = next(l for l in out.splitlines() if l.startswith("fused_score:"))
    assert float(printed.split(":")[1]) == float(target["fused"])


def test_evaluate_outputs(cli_run):
    records = read_records(cli_run["eval"] / "records.csv")
    assert len(records) == 20
    report_text = (cli_run["eval"] / "report.txt").read_text()
    assert "schema_version: 1" in report_text
    assert "auroc.fused.overall:" in report_text
    assert (cli_run["eval"] / "latency.txt").is_file()
    figures = cli_run["eval"] / "figures"
    for name in ("score_distribution.png", "roc_curves.png",
                 "branch_scatter.png", "latency_stages.png"):
        assert (figures / name).stat().st_size > 0


def test_evaluate_branch_flag(cli_run, tmp_path, capsys):
    out = tmp_path / "eval_p"
    assert main([
        "evaluate", "--config", str(cli_run["config"]),
        "--checkpoint", str(cli_run["checkpoint"]),
        "--statistics", str(cli_run["statistics"]),
        "--out", str(out), "--branch", "picturable-only",
    ]) == 0
    text = (out / "report.txt").read_text()
    assert "branch: picturable" in text
    records = read_records(out / "records.csv")
    assert len(records) == 20


def test_mismatched_statistics_rejected(cli_run, tmp_path, capsys):
    other_ckpt = tmp_path / "other.ckpt"
    assert main([
        "train", "--config", str(cli_run["config"]), "--seed", "99",
        "--out", str(other_ckpt),
    ]) == 0
    args = [
        "evaluate", "--config", str(cli_run["config"]),
        "--checkpoint", str(other_ckpt),
        "--statistics", str(cli_run["statistics"]),
        "--out", str(tmp_path / "eval_mismatch"),
    ]
    assert main(args) == 3
    assert "--allow-mismatch" in capsys.readouterr().err
    assert main(args + ["--allow-mismatch"]) == 0


def test_unknown_config_key_is_exit_2(cli_run, tmp_path, capsys):
    bad = tmp_path / "typo.cfg"
    bad.write_text(CONFIG_TEXT + "backbone.mystery = 1\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert "backbone.mystery" in capsys.readouterr().err


def test_bench_prints_stage_table(cli_run, capsys):
    assert main([
        "bench", "--config", str(cli_run["config"]),
        "--checkpoint", str(cli_run["checkpoint"]),
        "--statistics", str(cli_run["statistics"]),
        "--warmup", "2", "--repeats", "10",
    ]) == 0
    out = capsys.readouterr().out
    for stage in ("forward", "picturable", "unpicturable", "fusion", "total"):
        assert stage in out
    assert "median_ms" in out
