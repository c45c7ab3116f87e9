"""Plain-text key=value pipeline configuration.

One file configures the whole pipeline. Keys are section-prefixed
(``dataset.train_count``, ``backbone.steps``, ...), values are scalars.
Unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

_REQUIRED = object()


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default). _REQUIRED defaults must be present for the
# commands that consume them; presence is checked lazily per section.
_SCHEMA = {
    "seed": (int, _REQUIRED),
    "dataset.source": (str, _REQUIRED),
    "dataset.loco_root": (str, None),
    "dataset.image_size": (int, 64),
    "dataset.object_count_min": (int, 3),
    "dataset.object_count_max": (int, 3),
    "dataset.defect_intensity": (float, 1.0),
    "dataset.train_count": (int, None),
    "dataset.validation_count": (int, None),
    "dataset.test_normal_count": (int, None),
    "dataset.test_structural_count": (int, None),
    "dataset.test_logical_count": (int, None),
    "dataset.disc_radius": (int, 5),
    "dataset.disc_intensity": (float, 0.8),
    "dataset.background_level": (float, 0.4),
    "dataset.noise_amplitude": (float, 0.05),
    "dataset.defect_radius": (int, 2),
    "backbone.size_tag": (str, "S"),
    "backbone.out_channels": (int, None),
    "backbone.steps": (int, 2000),
    "backbone.learning_rate": (float, 1e-3),
    "backbone.batch_size": (int, 8),
    "backbone.teacher_mode": (str, "frozen_random"),
    "unpicturable.source": (str, "student_former"),
    "unpicturable.epsilon": (str, "auto"),
    "picturable.q_low": (float, 0.9),
    "picturable.q_high": (float, 0.995),
    "eval.out_dir": (str, None),
    "eval.workers": (int, 1),
    "eval.warmup": (int, 10),
    "eval.repeats": (int, 100),
}

_SYNTH_COUNT_KEYS = (
    "dataset.train_count",
    "dataset.validation_count",
    "dataset.test_normal_count",
    "dataset.test_structural_count",
    "dataset.test_logical_count",
)


@dataclass
class PipelineConfig:
    """Resolved configuration: raw values plus the file they came from."""

    values: dict = field(default_factory=dict)
    path: str | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def require(self, key: str):
        value = self.values.get(key)
        if value is None:
            raise ConfigurationError(f"missing required config key: {key}")
        return value

    def sha256(self) -> str:
        """Hash of the resolved configuration (defaults applied)."""
        lines = [f"{k}={self.values[k]!r}" for k in sorted(self.values)]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def parse_config_text(text: str, path: str | None = None) -> PipelineConfig:
    values: dict = {}
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{path or '<config>'}:{lineno}: expected key=value, got {raw_line!r}"
            )
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigurationError(f"{path or '<config>'}:{lineno}: unknown config key: {key}")
        if key in seen:
            raise ConfigurationError(f"{path or '<config>'}:{lineno}: duplicate config key: {key}")
        seen.add(key)
        parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigurationError(
                f"{path or '<config>'}:{lineno}: bad value for {key}: {exc}"
            ) from exc
    for key, (_, default) in _SCHEMA.items():
        if key not in values and default is not _REQUIRED and default is not None:
            values[key] = default
    config = PipelineConfig(values=values, path=path)
    _validate(config)
    return config


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), path=str(path))


def _validate(config: PipelineConfig) -> None:
    values = config.values
    if "seed" not in values:
        raise ConfigurationError("missing required config key: seed")
    source = values.get("dataset.source")
    if source not in ("synthetic", "loco"):
        raise ConfigurationError(
            f"dataset.source must be 'synthetic' or 'loco', got {source!r}"
        )
    if source == "loco":
        if not values.get("dataset.loco_root"):
            raise ConfigurationError("dataset.source=loco requires dataset.loco_root")
        for key in _SYNTH_COUNT_KEYS:
            if key in values:
                raise ConfigurationError(
                    f"{key} only applies to dataset.source=synthetic"
                )
    else:
        if values.get("dataset.loco_root"):
            raise ConfigurationError(
                "dataset.loco_root conflicts with dataset.source=synthetic"
            )
        for key in _SYNTH_COUNT_KEYS:
            if values.get(key) is None:
                raise ConfigurationError(f"missing required config key: {key}")
    if values["backbone.size_tag"] not in ("S", "M"):
        raise ConfigurationError(
            f"backbone.size_tag must be 'S' or 'M', got {values['backbone.size_tag']!r}"
        )
    if values["backbone.teacher_mode"] not in ("frozen_random", "distilled"):
        raise ConfigurationError(
            f"unknown backbone.teacher_mode: {values['backbone.teacher_mode']!r}"
        )
    if values["unpicturable.source"] not in ("teacher", "student_former"):
        raise ConfigurationError(
            f"unpicturable.source must be 'teacher' or 'student_former', "
            f"got {values['unpicturable.source']!r}"
        )
    epsilon = values["unpicturable.epsilon"]
    if epsilon != "auto":
        try:
            parsed = float(epsilon)
        except ValueError as exc:
            raise ConfigurationError(
                f"unpicturable.epsilon must be 'auto' or a float, got {epsilon!r}"
            ) from exc
        if parsed < 0:
            raise ConfigurationError("unpicturable.epsilon must be >= 0")
    if not 0.0 <= values["picturable.q_low"] < values["picturable.q_high"] <= 1.0:
        raise ConfigurationError(
            "picturable quantiles must satisfy 0 <= q_low < q_high <= 1, got "
            f"{values['picturable.q_low']} / {values['picturable.q_high']}"
        )
    if values["backbone.learning_rate"] <= 0:
        raise ConfigurationError("backbone.learning_rate must be positive")
    if values["backbone.batch_size"] < 1:
        raise ConfigurationError("backbone.batch_size must be >= 1")
    if values["eval.workers"] < 1:
        raise ConfigurationError("eval.workers must be >= 1")


def resolve_epsilon(config: PipelineConfig) -> float | None:
    """None means scale-aware automatic ridge."""
    raw = config["unpicturable.epsilon"]
    return None if raw == "auto" else float(raw)
