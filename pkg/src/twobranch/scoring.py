"""Score normalization, fusion, AUROC, and the evaluation harness.

Each branch's raw scores are standardized by the mean and population standard
deviation of its validation-split scores; the final score is the sum of the
two z-scores. AUROC follows the Mann-Whitney convention with half credit for
ties.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import maps as _maps
from .data import ImageSample
from .errors import CalibrationError, EvaluationError, InputError, NumericError
from .features import GaussianModel, gap, mahalanobis, select_feature_map
from .networks import NetworkBundle, forward

BRANCHES = ("picturable", "unpicturable")
STAGES = ("forward", "picturable", "unpicturable", "fusion")


@dataclass
class ScoreNormalizer:
    """Per-branch mean and population standard deviation from validation scores."""

    stats: dict[str, tuple[float, float]]

    def __post_init__(self):
        for branch, (_, sigma) in self.stats.items():
            if sigma <= 0:
                raise CalibrationError(f"{branch} branch has sigma <= 0")


def calibrate_score_normalizer(validation_scores: dict[str, Sequence[float]]) -> ScoreNormalizer:
    stats = {}
    for branch in BRANCHES:
        if branch not in validation_scores:
            raise InputError(f"missing validation scores for branch {branch!r}")
        scores = np.asarray(validation_scores[branch], dtype=np.float64)
        if scores.size < 2:
            raise InputError(
                f"{branch} branch needs at least 2 validation scores, got {scores.size}"
            )
        mu = float(scores.mean())
        sigma = float(scores.std(ddof=0))
        if sigma == 0.0:
            raise CalibrationError(
                f"{branch} branch validation scores are all equal; "
                "cannot standardize a zero-variance branch"
            )
        stats[branch] = (mu, sigma)
    return ScoreNormalizer(stats=stats)


def normalize(normalizer: ScoreNormalizer, branch: str, score: float) -> float:
    if branch not in normalizer.stats:
        raise InputError(f"unknown branch: {branch!r}")
    mu, sigma = normalizer.stats[branch]
    return (score - mu) / sigma


def fuse(z_picturable: float, z_unpicturable: float) -> float:
    if not (math.isfinite(z_picturable) and math.isfinite(z_unpicturable)):
        raise NumericError(
            f"branch scores must be finite, got {z_picturable} and {z_unpicturable}"
        )
    return z_picturable + z_unpicturable


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: P(anomalous > normal) + 0.5 P(tie) over cross pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise InputError(
            f"scores and labels lengths differ: {scores.shape} vs {labels.shape}"
        )
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = float(np.sum(ranks[labels == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) arrays for plotting, thresholds swept over unique scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    tps = np.cumsum(sorted_labels == 1)
    fps = np.cumsum(sorted_labels == 0)
    distinct = np.r_[np.nonzero(np.diff(sorted_scores))[0], len(sorted_scores) - 1]
    tpr = np.r_[0.0, tps[distinct] / max(tps[-1], 1)]
    fpr = np.r_[0.0, fps[distinct] / max(fps[-1], 1)]
    return fpr, tpr


@dataclass
class CalibrationSet:
    """Everything needed to score an image against a trained backbone."""

    gaussian: GaussianModel
    map_normalizer: _maps.MapNormalizer
    score_normalizer: ScoreNormalizer
    source: str


@dataclass
class SampleScores:
    raw_picturable: float
    raw_unpicturable: float
    z_picturable: float
    z_unpicturable: float
    fused: float
    stage_seconds: dict[str, float] = field(default_factory=dict)
    combined_map: np.ndarray | None = None


def score_image(
    nets: NetworkBundle,
    calibration: CalibrationSet,
    image: np.ndarray,
    keep_map: bool = False,
) -> SampleScores:
    """One image through both branches with per-stage wall-clock timing."""
    t0 = time.perf_counter()
    outputs = forward(nets, image)
    t1 = time.perf_counter()
    local = _maps.local_map(outputs.teacher_map, outputs.student_former)
    global_ = _maps.global_map(outputs.student_latter, outputs.ae_map)
    combined = _maps.combined_map(local, global_, calibration.map_normalizer)
    raw_p = _maps.picturable_score(combined)
    t2 = time.perf_counter()
    vector = gap(select_feature_map(outputs, calibration.source))
    raw_u = mahalanobis(calibration.gaussian, vector)
    t3 = time.perf_counter()
    z_p = normalize(calibration.score_normalizer, "picturable", raw_p)
    z_u = normalize(calibration.score_normalizer, "unpicturable", raw_u)
    fused = fuse(z_p, z_u)
    t4 = time.perf_counter()
    return SampleScores(
        raw_picturable=raw_p,
        raw_unpicturable=raw_u,
        z_picturable=z_p,
        z_unpicturable=z_u,
        fused=fused,
        stage_seconds={
            "forward": t1 - t0,
            "picturable": t2 - t1,
            "unpicturable": t3 - t2,
            "fusion": t4 - t3,
        },
        combined_map=combined if keep_map else None,
    )


@dataclass
class SampleRecord:
    sample_id: str
    label: str
    anomaly_family: str
    raw_picturable: float
    raw_unpicturable: float
    z_picturable: float
    z_unpicturable: float
    fused: float


@dataclass
class ScoreReport:
    schema_version: int
    category: str
    branch: str
    records: list[SampleRecord]
    aurocs: dict[str, dict[str, float | None]]
    latency_ms: dict[str, dict[str, float]]

    def score_column(self, branch: str | None = None) -> np.ndarray:
        branch = branch or self.branch
        key = {
            "both": "fused",
            "picturable": "z_picturable",
            "unpicturable": "z_unpicturable",
        }[branch]
        return np.asarray([getattr(r, key) for r in self.records])


def _subset_auroc(records: list[SampleRecord], score_key: str, keep) -> float | None:
    subset = [r for r in records if r.label == "normal" or keep(r)]
    labels = [0 if r.label == "normal" else 1 for r in subset]
    if len(set(labels)) < 2:
        return None
    scores = [getattr(r, score_key) for r in subset]
    return auroc(scores, labels)


def _auroc_block(records: list[SampleRecord], score_key: str) -> dict[str, float | None]:
    return {
        "overall": _subset_auroc(records, score_key, lambda r: True),
        "logical": _subset_auroc(records, score_key, lambda r: r.label == "logical"),
        "structural": _subset_auroc(records, score_key, lambda r: r.label == "structural"),
        "family_picturable": _subset_auroc(
            records, score_key, lambda r: r.anomaly_family == "picturable"
        ),
        "family_unpicturable": _subset_auroc(
            records, score_key, lambda r: r.anomaly_family == "unpicturable"
        ),
    }


def evaluate(
    nets: NetworkBundle,
    calibration: CalibrationSet,
    testset: Sequence[ImageSample],
    branch: str = "both",
    workers: int = 1,
) -> ScoreReport:
    """Score the test split, aggregate AUROCs per subset and stage latencies."""
    if branch not in ("both", "picturable", "unpicturable"):
        raise InputError(f"unknown branch selector: {branch!r}")
    if not testset:
        raise EvaluationError("test set is empty")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(
                pool.map(lambda s: score_image(nets, calibration, s.pixels), testset)
            )
    else:
        scored = [score_image(nets, calibration, s.pixels) for s in testset]

    records = []
    for sample, scores in zip(testset, scored):
        records.append(
            SampleRecord(
                sample_id=sample.sample_id,
                label=sample.label.value,
                anomaly_family=sample.anomaly_family.value if sample.anomaly_family else "",
                raw_picturable=scores.raw_picturable,
                raw_unpicturable=scores.raw_unpicturable,
                z_picturable=scores.z_picturable,
                z_unpicturable=scores.z_unpicturable,
                fused=scores.fused,
            )
        )
    labels = [0 if r.label == "normal" else 1 for r in records]
    if len(set(labels)) < 2:
        raise EvaluationError("test set must contain both normal and anomalous samples")

    aurocs = {
        "fused": _auroc_block(records, "fused"),
        "picturable": _auroc_block(records, "z_picturable"),
        "unpicturable": _auroc_block(records, "z_unpicturable"),
    }
    latency_ms: dict[str, dict[str, float]] = {}
    stage_samples = {
        stage: np.asarray([s.stage_seconds[stage] for s in scored]) * 1e3
        for stage in STAGES
    }
    stage_samples["total"] = sum(stage_samples[stage] for stage in STAGES)
    for stage, values in stage_samples.items():
        latency_ms[stage] = {
            "mean": float(values.mean()),
            "p95": float(np.percentile(values, 95)),
        }
    return ScoreReport(
        schema_version=1,
        category=testset[0].category,
        branch=branch,
        records=records,
        aurocs=aurocs,
        latency_ms=latency_ms,
    )


def bench_stages(
    nets: NetworkBundle,
    calibration: CalibrationSet,
    image: np.ndarray,
    warmup: int = 10,
    repeats: int = 100,
) -> dict[str, float]:
    """Median per-stage latency (ms) over repeated single-image scoring."""
    if warmup < 0 or repeats < 1:
        raise InputError("bench needs warmup >= 0 and repeats >= 1")
    for _ in range(warmup):
        score_image(nets, calibration, image)
    collected: dict[str, list[float]] = {stage: [] for stage in STAGES}
    for _ in range(repeats):
        scores = score_image(nets, calibration, image)
        for stage in STAGES:
            collected[stage].append(scores.stage_seconds[stage])
    medians = {stage: float(np.median(values)) * 1e3 for stage, values in collected.items()}
    medians["total"] = sum(medians[stage] for stage in STAGES)
    return medians
