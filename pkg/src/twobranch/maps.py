"""Anomaly maps and the picturable score (map maximum).

Local map: channel-mean squared difference between teacher and the student's
former half. Global map: same construction over the student's latter half and
the autoencoder. Each map is rescaled so the validation q_low quantile lands
at 0 and q_high at 0.1, clamped below at 0, then the two are averaged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, InputError

_RAW_MAGIC = b"AMAP"
_RAW_VERSION = 1


def _squared_diff_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 3 or b.ndim != 3:
        raise InputError(f"feature maps must be rank-3 (CxHxW), got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise InputError(f"feature map shapes differ: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return np.mean(diff * diff, axis=0)


def local_map(teacher_map: np.ndarray, student_former: np.ndarray) -> np.ndarray:
    """Per-location mean over channels of (teacher - student_former)^2."""
    return _squared_diff_map(teacher_map, student_former)


def global_map(student_latter: np.ndarray, ae_map: np.ndarray) -> np.ndarray:
    """Per-location mean over channels of (student_latter - autoencoder)^2."""
    return _squared_diff_map(student_latter, ae_map)


@dataclass
class MapNormalizer:
    """Pooled validation quantiles per map kind, used for affine rescaling."""

    local_low: float
    local_high: float
    global_low: float
    global_high: float
    q_low_level: float = 0.9
    q_high_level: float = 0.995

    def bounds(self, kind: str) -> tuple[float, float]:
        if kind == "local":
            return self.local_low, self.local_high
        if kind == "global":
            return self.global_low, self.global_high
        raise InputError(f"unknown map kind: {kind!r}")


def calibrate_map_normalizer(
    local_maps: list[np.ndarray],
    global_maps: list[np.ndarray],
    q_low: float = 0.9,
    q_high: float = 0.995,
) -> MapNormalizer:
    """Empirical quantiles of all map entries pooled across validation images."""
    if len(local_maps) < 2 or len(global_maps) < 2:
        raise InputError("map normalizer calibration needs at least 2 validation images")
    if not 0.0 <= q_low < q_high <= 1.0:
        raise InputError(f"need 0 <= q_low < q_high <= 1, got {q_low}, {q_high}")
    bounds = {}
    for kind, maps in (("local", local_maps), ("global", global_maps)):
        pooled = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
        lo = float(np.quantile(pooled, q_low))
        hi = float(np.quantile(pooled, q_high))
        if hi <= lo:
            raise CalibrationError(
                f"{kind} map quantiles are degenerate (q_low == q_high == {lo}); "
                "validation maps carry no spread"
            )
        bounds[kind] = (lo, hi)
    return MapNormalizer(
        local_low=bounds["local"][0],
        local_high=bounds["local"][1],
        global_low=bounds["global"][0],
        global_high=bounds["global"][1],
        q_low_level=q_low,
        q_high_level=q_high,
    )


def _rescale(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = 0.1 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.maximum(scaled, 0.0)


def combined_map(local: np.ndarray, global_: np.ndarray,
                 normalizer: MapNormalizer) -> np.ndarray:
    """Average of the two rescaled maps (q_low -> 0, q_high -> 0.1, clamp at 0)."""
    if not isinstance(normalizer, MapNormalizer):
        raise InputError("combined_map needs a calibrated MapNormalizer")
    local = np.asarray(local, dtype=np.float64)
    global_ = np.asarray(global_, dtype=np.float64)
    if local.shape != global_.shape:
        raise InputError(f"map shapes differ: {local.shape} vs {global_.shape}")
    scaled_local = _rescale(local, normalizer.local_low, normalizer.local_high)
    scaled_global = _rescale(global_, normalizer.global_low, normalizer.global_high)
    return 0.5 * (scaled_local + scaled_global)


def picturable_score(anomaly_map: np.ndarray) -> float:
    """Maximum entry of the anomaly map."""
    anomaly_map = np.asarray(anomaly_map)
    if anomaly_map.size == 0:
        raise InputError("anomaly map is empty")
    return float(anomaly_map.max())


def save_map_raw(anomaly_map: np.ndarray, path: str | Path) -> None:
    """Raw float container: magic, version, height, width, row-major f32 LE."""
    anomaly_map = np.asarray(anomaly_map)
    if anomaly_map.ndim != 2:
        raise InputError(f"anomaly map must be rank-2, got shape {anomaly_map.shape}")
    height, width = anomaly_map.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<III", _RAW_VERSION, height, width))
        fh.write(np.ascontiguousarray(anomaly_map, dtype="<f4").tobytes())


def load_map_raw(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _RAW_MAGIC:
        raise InputError(f"not a raw anomaly-map file (bad magic): {path}")
    version, height, width = struct.unpack_from("<III", data, 4)
    if version != _RAW_VERSION:
        raise InputError(f"unsupported raw map version {version} in {path}")
    values = np.frombuffer(data, dtype="<f4", count=height * width, offset=16)
    return values.reshape(height, width).astype(np.float32)


def save_heatmap_png(anomaly_map: np.ndarray, path: str | Path,
                     vmax: float | None = None) -> None:
    """Render the map through a perceptual colormap to a PNG file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    anomaly_map = np.asarray(anomaly_map, dtype=np.float64)
    if anomaly_map.ndim != 2:
        raise InputError(f"anomaly map must be rank-2, got shape {anomaly_map.shape}")
    if vmax is None:
        vmax = float(anomaly_map.max()) or 1.0
    plt.imsave(path, anomaly_map, cmap="magma", vmin=0.0, vmax=vmax)
