"""Single statistics artifact bundling all calibrations with provenance.

Layout (all integers little-endian):
  magic b"TBST" | u32 version | u32 json_len | json header (sorted keys) |
  float64 LE mean vector (C) | float64 LE covariance matrix (C*C, row-major)

The header carries the feature-source tag, epsilon, sample count, both
normalizers, and provenance (config hash, seed, checkpoint hash, split
sizes). The Cholesky factorization is recomputed on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import maps as _maps
from .data import DatasetBundle, Split
from .errors import InputError
from .features import fit_gaussian, gap, mahalanobis, select_feature_map
from .networks import NetworkBundle, forward
from .scoring import CalibrationSet, calibrate_score_normalizer

_MAGIC = b"TBST"
_VERSION = 1


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class StatisticsArtifact:
    calibration: CalibrationSet
    provenance: dict

    def save(self, path: str | Path) -> None:
        calib = self.calibration
        header = {
            "version": _VERSION,
            "source": calib.source,
            "epsilon": calib.gaussian.epsilon,
            "sample_count": calib.gaussian.sample_count,
            "feature_dim": int(calib.gaussian.mean.shape[0]),
            "map_normalizer": {
                "q_levels": [calib.map_normalizer.q_low_level,
                             calib.map_normalizer.q_high_level],
                "local": [calib.map_normalizer.local_low,
                          calib.map_normalizer.local_high],
                "global": [calib.map_normalizer.global_low,
                           calib.map_normalizer.global_high],
            },
            "score_normalizer": {
                branch: list(stats)
                for branch, stats in calib.score_normalizer.stats.items()
            },
            "provenance": self.provenance,
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(np.ascontiguousarray(calib.gaussian.mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(calib.gaussian.covariance, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "StatisticsArtifact":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"statistics file not found: {path}")
        data = path.read_bytes()
        if data[:4] != _MAGIC:
            raise InputError(f"not a statistics file (bad magic): {path}")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != _VERSION:
            raise InputError(f"unsupported statistics version {version} in {path}")
        (header_len,) = struct.unpack_from("<I", data, 8)
        offset = 12
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
        offset += header_len
        dim = header["feature_dim"]
        mean = np.frombuffer(data, dtype="<f8", count=dim, offset=offset).copy()
        offset += 8 * dim
        covariance = (
            np.frombuffer(data, dtype="<f8", count=dim * dim, offset=offset)
            .reshape(dim, dim)
            .copy()
        )
        # refit path recomputes the factorization from the stored arrays
        regularized = covariance + header["epsilon"] * np.eye(dim)
        try:
            factor = np.linalg.cholesky(regularized)
        except np.linalg.LinAlgError as exc:
            raise InputError(
                f"stored covariance in {path} is not positive definite after ridge"
            ) from exc
        from .features import GaussianModel
        from .scoring import ScoreNormalizer

        gaussian = GaussianModel(
            mean=mean,
            covariance=covariance,
            factor=factor,
            epsilon=header["epsilon"],
            source=header["source"],
            sample_count=header["sample_count"],
        )
        mn = header["map_normalizer"]
        map_normalizer = _maps.MapNormalizer(
            local_low=mn["local"][0],
            local_high=mn["local"][1],
            global_low=mn["global"][0],
            global_high=mn["global"][1],
            q_low_level=mn["q_levels"][0],
            q_high_level=mn["q_levels"][1],
        )
        score_normalizer = ScoreNormalizer(
            stats={k: tuple(v) for k, v in header["score_normalizer"].items()}
        )
        calibration = CalibrationSet(
            gaussian=gaussian,
            map_normalizer=map_normalizer,
            score_normalizer=score_normalizer,
            source=header["source"],
        )
        return cls(calibration=calibration, provenance=header["provenance"])


def calibrate_pipeline(
    nets: NetworkBundle,
    dataset: DatasetBundle,
    source: str = "student_former",
    epsilon: float | None = None,
    q_low: float = 0.9,
    q_high: float = 0.995,
    provenance: dict | None = None,
) -> StatisticsArtifact:
    """Run all three calibrations in dependency order.

    Gaussian statistics come from the train split only; map quantiles and
    branch score moments come from the validation split only.
    """
    if not nets.trained:
        raise InputError("calibration requires a trained backbone")
    train_samples = dataset.split(Split.TRAIN)
    validation_samples = dataset.split(Split.VALIDATION)
    if len(validation_samples) < 2:
        raise InputError("validation split needs at least 2 samples")

    vectors = []
    for sample in train_samples:
        outputs = forward(nets, sample.pixels)
        vectors.append(gap(select_feature_map(outputs, source)))
    gaussian = fit_gaussian(vectors, epsilon=epsilon, source=source)

    validation_outputs = [forward(nets, s.pixels) for s in validation_samples]
    local_maps = [
        _maps.local_map(o.teacher_map, o.student_former) for o in validation_outputs
    ]
    global_maps = [
        _maps.global_map(o.student_latter, o.ae_map) for o in validation_outputs
    ]
    map_normalizer = _maps.calibrate_map_normalizer(
        local_maps, global_maps, q_low=q_low, q_high=q_high
    )

    picturable_scores = []
    unpicturable_scores = []
    for outputs, lmap, gmap in zip(validation_outputs, local_maps, global_maps):
        combined = _maps.combined_map(lmap, gmap, map_normalizer)
        picturable_scores.append(_maps.picturable_score(combined))
        unpicturable_scores.append(
            mahalanobis(gaussian, gap(select_feature_map(outputs, source)))
        )
    score_normalizer = calibrate_score_normalizer(
        {"picturable": picturable_scores, "unpicturable": unpicturable_scores}
    )

    base_provenance = {
        "source": source,
        "train_samples": len(train_samples),
        "validation_samples": len(validation_samples),
        "category": dataset.category,
    }
    if provenance:
        base_provenance.update(provenance)
    calibration = CalibrationSet(
        gaussian=gaussian,
        map_normalizer=map_normalizer,
        score_normalizer=score_normalizer,
        source=source,
    )
    return StatisticsArtifact(calibration=calibration, provenance=base_provenance)
