"""Unpicturable branch: pooled feature vectors scored by Mahalanobis distance.

Global average pooling collapses a feature map to one vector per image; a
Gaussian (mean + ridge-regularized covariance) fit on the training split
turns that vector into a covariance-whitened distance from normality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigurationError, InputError, NumericError
from .networks import NetworkBundle, RawOutputs, forward

FEATURE_SOURCES = ("teacher", "student_former")


def gap(feature_map: np.ndarray) -> np.ndarray:
    """Spatial mean per channel of a C x H x W map."""
    feature_map = np.asarray(feature_map)
    if feature_map.ndim != 3:
        raise InputError(f"feature map must be rank-3 (CxHxW), got {feature_map.shape}")
    if feature_map.shape[1] == 0 or feature_map.shape[2] == 0:
        raise InputError("feature map has empty spatial extent")
    return feature_map.astype(np.float64).mean(axis=(1, 2))


@dataclass
class GaussianModel:
    mean: np.ndarray
    covariance: np.ndarray
    factor: np.ndarray  # lower-triangular Cholesky factor of covariance + eps*I
    epsilon: float
    source: str
    sample_count: int


def default_epsilon(covariance: np.ndarray) -> float:
    """Scale-aware ridge: 1e-3 * trace / dim (plus a tiny floor for zero data)."""
    dim = covariance.shape[0]
    return 1e-3 * float(np.trace(covariance)) / dim + 1e-12


def fit_gaussian(
    vectors: Sequence[np.ndarray],
    epsilon: float | None = None,
    source: str = "student_former",
) -> GaussianModel:
    """Sample mean and covariance (divisor n-1) with a stored factorization."""
    if source not in FEATURE_SOURCES:
        raise ConfigurationError(f"unknown feature source: {source!r}")
    if len(vectors) < 2:
        raise InputError(f"need at least 2 feature vectors, got {len(vectors)}")
    matrix = np.asarray([np.asarray(v, dtype=np.float64) for v in vectors])
    if matrix.ndim != 2:
        raise InputError("feature vectors must share a single length")
    mean = matrix.mean(axis=0)
    covariance = np.cov(matrix, rowvar=False, ddof=1)
    covariance = np.atleast_2d(covariance)
    covariance = 0.5 * (covariance + covariance.T)
    if epsilon is None:
        epsilon = default_epsilon(covariance)
    if epsilon < 0:
        raise InputError(f"epsilon must be >= 0, got {epsilon}")
    regularized = covariance + epsilon * np.eye(covariance.shape[0])
    try:
        factor = np.linalg.cholesky(regularized)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"covariance factorization failed at epsilon={epsilon}; "
            "increase epsilon (fewer samples than feature channels?)"
        ) from exc
    return GaussianModel(
        mean=mean,
        covariance=covariance,
        factor=factor,
        epsilon=float(epsilon),
        source=source,
        sample_count=len(vectors),
    )


def mahalanobis(model: GaussianModel, vector: np.ndarray) -> float:
    """sqrt((v - mu)^T (Sigma + eps I)^{-1} (v - mu)) via one triangular solve."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != model.mean.shape:
        raise InputError(
            f"feature vector length {vector.shape} does not match model "
            f"dimension {model.mean.shape}"
        )
    residual = vector - model.mean
    whitened = solve_triangular(model.factor, residual, lower=True)
    return float(np.sqrt(np.dot(whitened, whitened)))


def select_feature_map(outputs: RawOutputs, source: str) -> np.ndarray:
    if source == "teacher":
        return outputs.teacher_map
    if source == "student_former":
        return outputs.student_former
    raise ConfigurationError(f"unknown feature source: {source!r}")


@dataclass
class FeatureSourceConfig:
    source: str = "student_former"
    size_tag: str = "S"


def unpicturable_score(
    nets: NetworkBundle,
    model: GaussianModel,
    image: np.ndarray,
    cfg: FeatureSourceConfig,
) -> float:
    """Forward the image, pool the configured map, return the distance."""
    if cfg.source not in FEATURE_SOURCES:
        raise ConfigurationError(f"unknown feature source: {cfg.source!r}")
    if model.source != cfg.source:
        raise ConfigurationError(
            f"feature source mismatch: model was fit on {model.source!r} "
            f"but config asks for {cfg.source!r}"
        )
    outputs = forward(nets, image)
    return mahalanobis(model, gap(select_feature_map(outputs, cfg.source)))
