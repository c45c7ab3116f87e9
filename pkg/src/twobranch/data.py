"""Dataset handling: synthetic generation, LOCO-layout I/O, batch iteration.

The synthetic generator reproduces the structural/logical dichotomy at desk
scale: normal images hold k uniform-intensity discs at random non-overlapping
positions on a textured background, structural anomalies invert a small patch
inside one disc, and logical (count) anomalies draw k outside the normal
range while every disc stays locally indistinguishable from a normal one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigurationError,
    DecodeError,
    GenerationError,
    InputError,
    LayoutError,
)


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class Label(enum.Enum):
    NORMAL = "normal"
    STRUCTURAL = "structural"
    LOGICAL = "logical"


class AnomalyFamily(enum.Enum):
    PICTURABLE = "picturable"
    UNPICTURABLE = "unpicturable"


# directory names of the on-disk layout
_TEST_DIRS = {
    "good": (Label.NORMAL, None),
    "structural_anomalies": (Label.STRUCTURAL, AnomalyFamily.PICTURABLE),
    "logical_anomalies": (Label.LOGICAL, AnomalyFamily.UNPICTURABLE),
}
FAMILY_MAP_FILENAME = "anomaly_family_map.txt"


@dataclass
class ImageSample:
    """One image with its ground-truth label and split tag.

    pixels is float32, height x width x channels, values in [0, 1] on the
    8-bit grid (multiples of 1/255) so that PNG export round-trips exactly.
    """

    pixels: np.ndarray
    label: Label
    split: Split
    category: str
    sample_id: str
    anomaly_family: AnomalyFamily | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise InputError(
                f"sample {self.sample_id}: pixels must be rank-3 (HxWxC), "
                f"got shape {self.pixels.shape}"
            )
        if (self.anomaly_family is None) != (self.label is Label.NORMAL):
            raise InputError(
                f"sample {self.sample_id}: anomaly_family must be present "
                "iff label is not normal"
            )

    @property
    def is_normal(self) -> bool:
        return self.label is Label.NORMAL


@dataclass
class DatasetBundle:
    category: str
    splits: dict[Split, list[ImageSample]]
    generator_config: dict | None = None

    def split(self, split: Split | str) -> list[ImageSample]:
        split = _coerce_split(split)
        if split not in self.splits:
            raise InputError(f"unknown split: {split.value}")
        return self.splits[split]


@dataclass
class SynthConfig:
    """Synthetic benchmark parameters. All counts are per split."""

    image_size: tuple[int, int] = (64, 64)
    object_count_range: tuple[int, int] = (3, 3)
    defect_intensity: float = 1.0
    train_count: int = 200
    validation_count: int = 50
    test_normal_count: int = 40
    test_structural_count: int = 30
    test_logical_count: int = 30
    seed: int = 0
    disc_radius: int = 5
    disc_intensity: float = 0.8
    background_level: float = 0.4
    noise_amplitude: float = 0.05
    defect_radius: int = 2

    def counts(self) -> dict[str, int]:
        return {
            "train_count": self.train_count,
            "validation_count": self.validation_count,
            "test_normal_count": self.test_normal_count,
            "test_structural_count": self.test_structural_count,
            "test_logical_count": self.test_logical_count,
        }

    def as_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "object_count_range": list(self.object_count_range),
            "defect_intensity": self.defect_intensity,
            **self.counts(),
            "seed": self.seed,
            "disc_radius": self.disc_radius,
            "disc_intensity": self.disc_intensity,
            "background_level": self.background_level,
            "noise_amplitude": self.noise_amplitude,
            "defect_radius": self.defect_radius,
        }

    @classmethod
    def from_pipeline_config(cls, config) -> "SynthConfig":
        size = config["dataset.image_size"]
        return cls(
            image_size=(size, size),
            object_count_range=(
                config["dataset.object_count_min"],
                config["dataset.object_count_max"],
            ),
            defect_intensity=config["dataset.defect_intensity"],
            train_count=config.require("dataset.train_count"),
            validation_count=config.require("dataset.validation_count"),
            test_normal_count=config.require("dataset.test_normal_count"),
            test_structural_count=config.require("dataset.test_structural_count"),
            test_logical_count=config.require("dataset.test_logical_count"),
            seed=config.seed,
            disc_radius=config["dataset.disc_radius"],
            disc_intensity=config["dataset.disc_intensity"],
            background_level=config["dataset.background_level"],
            noise_amplitude=config["dataset.noise_amplitude"],
            defect_radius=config["dataset.defect_radius"],
        )


def _coerce_split(split) -> Split:
    if isinstance(split, Split):
        return split
    try:
        return Split(str(split))
    except ValueError:
        raise InputError(f"unknown split: {split!r}") from None


def _norm_seed(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG export/load round-trips bit-exactly."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _place_discs(rng: np.random.Generator, count: int, size, radius: int):
    """Random non-overlapping disc centers, margin of one pixel everywhere."""
    height, width = size
    low_h, high_h = radius + 1, height - radius - 1
    low_w, high_w = radius + 1, width - radius - 1
    if count > 0 and (low_h >= high_h or low_w >= high_w):
        raise GenerationError(
            f"disc radius {radius} does not fit a {height}x{width} image"
        )
    min_sq_dist = (2 * radius + 2) ** 2
    centers: list[tuple[int, int]] = []
    attempts = 0
    while len(centers) < count:
        attempts += 1
        if attempts > 1000:
            raise GenerationError(
                f"cannot place {count} discs of radius {radius} in a "
                f"{height}x{width} image; object_count_range exceeds capacity"
            )
        cy = int(rng.integers(low_h, high_h))
        cx = int(rng.integers(low_w, high_w))
        if all((cy - y) ** 2 + (cx - x) ** 2 >= min_sq_dist for y, x in centers):
            centers.append((cy, cx))
    return centers


def _render(rng: np.random.Generator, cfg: SynthConfig, count: int, defect: bool):
    height, width = cfg.image_size
    img = cfg.background_level + cfg.noise_amplitude * rng.uniform(-1.0, 1.0, (height, width))
    centers = _place_discs(rng, count, cfg.image_size, cfg.disc_radius)
    yy, xx = np.ogrid[:height, :width]
    for cy, cx in centers:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= cfg.disc_radius**2
        img[mask] = cfg.disc_intensity
    if defect:
        cy, cx = centers[int(rng.integers(0, len(centers)))]
        # contiguous inverted patch strictly inside the host disc, with a
        # two-pixel ring so the disc stays a single connected object
        max_off = cfg.disc_radius - cfg.defect_radius - 2
        while True:
            dy = int(rng.integers(-max_off, max_off + 1))
            dx = int(rng.integers(-max_off, max_off + 1))
            if dy * dy + dx * dx <= max_off * max_off:
                break
        patch = (yy - (cy + dy)) ** 2 + (xx - (cx + dx)) ** 2 <= cfg.defect_radius**2
        inverted = 1.0 - cfg.disc_intensity
        value = cfg.disc_intensity + cfg.defect_intensity * (inverted - cfg.disc_intensity)
        img[patch] = value
    return _quantize(img[:, :, None])


def _anomalous_count(rng: np.random.Generator, cfg: SynthConfig) -> int:
    lo, hi = cfg.object_count_range
    candidates = [k for k in (lo - 1, hi + 1) if k >= 0]
    if not candidates:
        raise GenerationError(
            f"no feasible object count outside range [{lo}, {hi}]"
        )
    return int(candidates[int(rng.integers(0, len(candidates)))])


def generate_synthetic(config: SynthConfig) -> DatasetBundle:
    """Deterministically generate the desk-scale benchmark for one seed."""
    lo, hi = config.object_count_range
    if not 1 <= lo <= hi:
        raise ConfigurationError(
            f"object_count_range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
        )
    for name, value in config.counts().items():
        if value <= 0:
            raise ConfigurationError(f"{name} must be positive, got {value}")
    if config.validation_count < 2:
        raise ConfigurationError("validation_count must be >= 2")
    if not 0.0 < config.defect_intensity <= 1.0:
        raise ConfigurationError(
            f"defect_intensity must be in (0, 1], got {config.defect_intensity}"
        )
    if config.defect_radius > config.disc_radius - 2:
        raise ConfigurationError("defect_radius must be at most disc_radius - 2")

    # (split, subdir, label, family, count)
    plan = [
        (Split.TRAIN, "good", Label.NORMAL, None, config.train_count),
        (Split.VALIDATION, "good", Label.NORMAL, None, config.validation_count),
        (Split.TEST, "good", Label.NORMAL, None, config.test_normal_count),
        (
            Split.TEST,
            "structural_anomalies",
            Label.STRUCTURAL,
            AnomalyFamily.PICTURABLE,
            config.test_structural_count,
        ),
        (
            Split.TEST,
            "logical_anomalies",
            Label.LOGICAL,
            AnomalyFamily.UNPICTURABLE,
            config.test_logical_count,
        ),
    ]
    total = sum(entry[4] for entry in plan)
    children = np.random.SeedSequence(_norm_seed(config.seed)).spawn(total)
    splits: dict[Split, list[ImageSample]] = {s: [] for s in Split}
    child_index = 0
    for split, subdir, label, family, count in plan:
        for i in range(count):
            rng = np.random.default_rng(children[child_index])
            child_index += 1
            if label is Label.LOGICAL:
                k = _anomalous_count(rng, config)
            else:
                k = int(rng.integers(lo, hi + 1))
            pixels = _render(rng, config, k, defect=label is Label.STRUCTURAL)
            splits[split].append(
                ImageSample(
                    pixels=pixels,
                    label=label,
                    split=split,
                    category="synthetic",
                    sample_id=f"{split.value}/{subdir}/{i:03d}",
                    anomaly_family=family,
                )
            )
    return DatasetBundle(
        category="synthetic",
        splits=splits,
        generator_config=config.as_dict(),
    )


def export_loco_layout(bundle: DatasetBundle, root: str | Path) -> int:
    """Write the bundle as a LOCO-style directory tree of PNG files."""
    root = Path(root)
    written = 0
    for split, samples in bundle.splits.items():
        for sample in samples:
            rel = Path(sample.sample_id + ".png")
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            _write_png(sample.pixels, path)
            written += 1
    return written


def _write_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.round(pixels * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    elif arr.shape[2] == 3:
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        raise InputError(f"cannot export {arr.shape[2]}-channel image to PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read one image file to a float32 HxWxC array in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image file not found: {path}")
    return _read_png(path)


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image file: {path}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _load_family_map(root: Path) -> dict[str, AnomalyFamily]:
    """Optional per-category override of the directory -> family mapping."""
    mapping = {
        "structural_anomalies": AnomalyFamily.PICTURABLE,
        "logical_anomalies": AnomalyFamily.UNPICTURABLE,
    }
    path = root / FAMILY_MAP_FILENAME
    if not path.is_file():
        return mapping
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in mapping:
            raise ConfigurationError(f"{path}:{lineno}: unknown mapping entry {raw!r}")
        try:
            mapping[key] = AnomalyFamily(value)
        except ValueError:
            raise ConfigurationError(
                f"{path}:{lineno}: unknown anomaly family {value!r}"
            ) from None
    return mapping


def load_loco_layout(root: str | Path) -> DatasetBundle:
    """Load a category directory tree with the published LOCO structure."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root not found: {root}")
    mandatory = [
        (Split.TRAIN, "train/good", Label.NORMAL),
        (Split.VALIDATION, "validation/good", Label.NORMAL),
        (Split.TEST, "test/good", Label.NORMAL),
        (Split.TEST, "test/structural_anomalies", Label.STRUCTURAL),
        (Split.TEST, "test/logical_anomalies", Label.LOGICAL),
    ]
    for _, rel, _ in mandatory:
        if not (root / rel).is_dir():
            raise LayoutError(f"missing mandatory directory: {root / rel}")
    family_map = _load_family_map(root)
    splits: dict[Split, list[ImageSample]] = {s: [] for s in Split}
    shape = None
    for split, rel, label in mandatory:
        directory = root / rel
        subdir = directory.name
        family = family_map.get(subdir) if label is not Label.NORMAL else None
        for name in sorted(p.name for p in directory.iterdir() if p.suffix.lower() == ".png"):
            pixels = _read_png(directory / name)
            if shape is None:
                shape = pixels.shape
            elif pixels.shape != shape:
                raise InputError(
                    f"{directory / name}: shape {pixels.shape} differs from "
                    f"category shape {shape}"
                )
            splits[split].append(
                ImageSample(
                    pixels=pixels,
                    label=label,
                    split=split,
                    category=root.name,
                    sample_id=f"{split.value}/{subdir}/{Path(name).stem}",
                    anomaly_family=family,
                )
            )
    return DatasetBundle(category=root.name, splits=splits)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order as a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([_norm_seed(seed), epoch]))
    return rng.permutation(n)


def iterate_batches(
    bundle: DatasetBundle,
    split: Split | str,
    batch_size: int,
    seed: int,
    epochs: int | None = 1,
) -> Iterator[list[ImageSample]]:
    """Yield shuffled batches; every sample appears exactly once per epoch.

    epochs=None cycles forever, reshuffling per epoch index.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    samples = bundle.split(split)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = epoch_order(len(samples), seed, epoch)
        for start in range(0, len(order), batch_size):
            yield [samples[i] for i in order[start : start + batch_size]]
        epoch += 1


def load_dataset(config) -> DatasetBundle:
    """Materialize the dataset named by a pipeline config."""
    if config["dataset.source"] == "synthetic":
        return generate_synthetic(SynthConfig.from_pipeline_config(config))
    return load_loco_layout(config.require("dataset.loco_root"))
