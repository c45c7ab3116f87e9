"""Teacher / double-width student / autoencoder backbone at desk scale.

The teacher is a fixed randomly-initialized patch descriptor with a limited
receptive field. The student shares its trunk layout but emits twice the
channels; channels [0, C) regress the teacher, channels [C, 2C) regress the
autoencoder. The autoencoder squeezes the image through a 1x1 spatial
bottleneck and decodes back to the shared output shape.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import ImageSample
from .errors import ConfigurationError, InputError, TrainingError
from . import data as _data

_MAGIC = b"TBCK"
_VERSION = 1

# trunk width / autoencoder width / bottleneck dim / default out channels
_SIZE_PRESETS = {
    "S": {"width": 32, "ae_width": 32, "latent": 32, "c_out": 16},
    "M": {"width": 48, "ae_width": 48, "latent": 48, "c_out": 24},
}


@dataclass
class ArchSpec:
    c_in: int
    h_in: int
    w_in: int
    c_out: int
    h_out: int
    w_out: int
    size_tag: str = "S"

    @classmethod
    def for_size(cls, size_tag: str, h_in: int = 64, w_in: int = 64,
                 c_in: int = 1, c_out: int | None = None) -> "ArchSpec":
        if size_tag not in _SIZE_PRESETS:
            raise ConfigurationError(f"size_tag must be 'S' or 'M', got {size_tag!r}")
        if c_out is None:
            c_out = _SIZE_PRESETS[size_tag]["c_out"]
        return cls(
            c_in=c_in, h_in=h_in, w_in=w_in, c_out=c_out,
            h_out=h_in // 4, w_out=w_in // 4, size_tag=size_tag,
        )

    def validate(self) -> None:
        for name in ("c_in", "h_in", "w_in", "c_out", "h_out", "w_out"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"arch dimension {name} must be positive")
        if self.size_tag not in _SIZE_PRESETS:
            raise ConfigurationError(
                f"size_tag must be 'S' or 'M', got {self.size_tag!r}"
            )
        if self.h_in % 4 or self.w_in % 4:
            raise ConfigurationError("input height/width must be divisible by 4")
        if (self.h_out, self.w_out) != (self.h_in // 4, self.w_in // 4):
            raise ConfigurationError(
                "output spatial size must be input size / 4, got "
                f"{self.h_out}x{self.w_out} for {self.h_in}x{self.w_in}"
            )


class PatchNet(nn.Module):
    """Strided conv descriptor, 4 layers, receptive field well under the image."""

    def __init__(self, c_in: int, c_out: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, stride=1, padding=1)
        self.conv4 = nn.Conv2d(2 * width, c_out, 3, stride=1, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        x = self.act(self.conv3(x))
        return self.conv4(x)


class BottleneckAutoencoder(nn.Module):
    """Encodes the image to a single spatial position, decodes to C x H/4 x W/4."""

    def __init__(self, c_in: int, c_out: int, width: int, latent: int,
                 h_out: int, w_out: int):
        super().__init__()
        self.h_out = h_out
        self.w_out = w_out
        self.enc1 = nn.Conv2d(c_in, width, 4, stride=2, padding=1)
        self.enc2 = nn.Conv2d(width, width, 4, stride=2, padding=1)
        self.enc3 = nn.Conv2d(width, 2 * width, 4, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.enc4 = nn.Conv2d(2 * width, latent, 4, stride=1, padding=0)
        self.dec1 = nn.Conv2d(latent, width, 3, padding=1)
        self.dec2 = nn.Conv2d(width, width, 3, padding=1)
        self.dec3 = nn.Conv2d(width, width, 3, padding=1)
        self.dec4 = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, c_out, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        x = self.act(self.enc1(x))
        x = self.act(self.enc2(x))
        x = self.act(self.enc3(x))
        x = self.enc4(self.pool(x))
        for layer in (self.dec1, self.dec2, self.dec3):
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = self.act(layer(x))
        x = nn.functional.interpolate(x, size=(self.h_out, self.w_out), mode="nearest")
        x = self.act(self.dec4(x))
        return self.out(x)


@dataclass
class RawOutputs:
    """Four same-shape feature maps (C_out x H_out x W_out, float32)."""

    teacher_map: np.ndarray
    student_former: np.ndarray
    student_latter: np.ndarray
    ae_map: np.ndarray


@dataclass
class TrainHParams:
    steps: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    teacher_mode: str = "frozen_random"


@dataclass
class NetworkBundle:
    teacher: PatchNet
    student: PatchNet
    autoencoder: BottleneckAutoencoder
    arch: ArchSpec
    trained: bool = False
    loss_trace: list = field(default_factory=list)
    # float64 twin used for scoring; rebuilt after parameters change
    _double_cache: tuple | None = field(default=None, repr=False, compare=False)

    def modules_in_order(self):
        return (
            ("teacher", self.teacher),
            ("student", self.student),
            ("autoencoder", self.autoencoder),
        )


def _rich_random_init(teacher: PatchNet, weight_gain: float = 2.0,
                      bias_spread: float = 0.5) -> None:
    """High-variance hidden-layer init for the frozen teacher.

    Default conv init is nearly affine over a [0, 1] pixel range, and an
    affine teacher can be imitated globally by the student, erasing the
    off-manifold discrepancy the local map depends on. Larger hidden weights
    and biases place many ReLU kinks inside the realistic activation range,
    so the trained student only matches the teacher on normal patterns. The
    final layer keeps unit scale so the output maps stay O(1).
    """
    with torch.no_grad():
        for layer in (teacher.conv1, teacher.conv2, teacher.conv3):
            fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
            layer.weight.normal_(0.0, weight_gain / fan_in**0.5)
            layer.bias.uniform_(-bias_spread, bias_spread)
        final = teacher.conv4
        fan_in = final.in_channels * final.kernel_size[0] * final.kernel_size[1]
        final.weight.normal_(0.0, 1.0 / fan_in**0.5)
        final.bias.uniform_(-0.1, 0.1)


def init_networks(arch: ArchSpec, seed: int) -> NetworkBundle:
    """Build the three networks with a deterministic initialization."""
    arch.validate()
    preset = _SIZE_PRESETS[arch.size_tag]
    torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    teacher = PatchNet(arch.c_in, arch.c_out, preset["width"])
    student = PatchNet(arch.c_in, 2 * arch.c_out, preset["width"])
    autoencoder = BottleneckAutoencoder(
        arch.c_in, arch.c_out, preset["ae_width"], preset["latent"],
        arch.h_out, arch.w_out,
    )
    _rich_random_init(teacher)
    for p in teacher.parameters():
        p.requires_grad_(False)
    for module in (teacher, student, autoencoder):
        module.eval()
    return NetworkBundle(teacher, student, autoencoder, arch)


def _samples_to_tensor(samples: Sequence[ImageSample], arch: ArchSpec) -> torch.Tensor:
    arrays = []
    for sample in samples:
        pixels = sample.pixels
        if pixels.shape != (arch.h_in, arch.w_in, arch.c_in):
            raise InputError(
                f"sample {sample.sample_id}: expected shape "
                f"{(arch.h_in, arch.w_in, arch.c_in)}, got {pixels.shape}"
            )
        arrays.append(np.moveaxis(pixels, -1, 0))
    return torch.from_numpy(np.stack(arrays).astype(np.float32))


def train(nets: NetworkBundle, trainset: Sequence[ImageSample],
          hparams: TrainHParams) -> NetworkBundle:
    """Fit student and autoencoder to the frozen teacher on normal data.

    Objectives: student's former half regresses the teacher, the autoencoder
    regresses the teacher through its global bottleneck, and the student's
    latter half regresses the autoencoder. Plain MSE, SGD with momentum 0.9.
    """
    if hparams.steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {hparams.steps}")
    if hparams.learning_rate <= 0:
        raise ConfigurationError("learning_rate must be positive")
    if hparams.batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if hparams.teacher_mode == "distilled":
        raise ConfigurationError(
            "teacher_mode=distilled is a reserved extension; only frozen_random "
            "is implemented"
        )
    if hparams.teacher_mode != "frozen_random":
        raise ConfigurationError(f"unknown teacher_mode: {hparams.teacher_mode!r}")
    if not trainset:
        raise InputError("trainset is empty")
    for sample in trainset:
        if not sample.is_normal:
            raise InputError(
                f"trainset must contain only normal samples; "
                f"{sample.sample_id} has label {sample.label.value}"
            )

    c_out = nets.arch.c_out
    nets._double_cache = None
    nets.student.train()
    nets.autoencoder.train()
    optimizer = torch.optim.SGD(
        list(nets.student.parameters()) + list(nets.autoencoder.parameters()),
        lr=hparams.learning_rate,
        momentum=0.9,
    )
    mse = nn.MSELoss()
    n = len(trainset)
    nets.loss_trace = []
    step = 0
    epoch = 0
    while step < hparams.steps:
        order = _data.epoch_order(n, hparams.seed, epoch)
        epoch += 1
        for start in range(0, n, hparams.batch_size):
            if step >= hparams.steps:
                break
            batch = [trainset[i] for i in order[start : start + hparams.batch_size]]
            images = _samples_to_tensor(batch, nets.arch)
            with torch.no_grad():
                teacher_out = nets.teacher(images)
            student_out = nets.student(images)
            ae_out = nets.autoencoder(images)
            loss_st = mse(student_out[:, :c_out], teacher_out)
            loss_ae = mse(ae_out, teacher_out)
            loss_stae = mse(student_out[:, c_out:], ae_out.detach())
            loss = loss_st + loss_ae + loss_stae
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            nets.loss_trace.append(
                (step, loss_st.item(), loss_ae.item(), loss_stae.item(), loss.item())
            )
            step += 1
    nets.student.eval()
    nets.autoencoder.eval()
    nets.trained = True
    nets._double_cache = None
    return nets


def forward(nets: NetworkBundle, image: np.ndarray) -> RawOutputs:
    """Run one image through all three networks; split the student by channel."""
    arch = nets.arch
    expected = (arch.h_in, arch.w_in, arch.c_in)
    if image.shape != expected:
        raise InputError(f"expected image shape {expected}, got {image.shape}")
    batch = torch.from_numpy(
        np.moveaxis(image, -1, 0)[None].astype(np.float32)
    )
    return _forward_tensor(nets, batch)[0]


def forward_batch(nets: NetworkBundle, images: Sequence[np.ndarray]) -> list[RawOutputs]:
    arch = nets.arch
    expected = (arch.h_in, arch.w_in, arch.c_in)
    for image in images:
        if image.shape != expected:
            raise InputError(f"expected image shape {expected}, got {image.shape}")
    batch = torch.from_numpy(
        np.stack([np.moveaxis(img, -1, 0) for img in images]).astype(np.float32)
    )
    return _forward_tensor(nets, batch)


def _inference_modules(nets: NetworkBundle):
    """Scoring runs in float64 so batching cannot perturb the maps."""
    if nets._double_cache is None:
        twins = []
        for _, module in nets.modules_in_order():
            twin = copy.deepcopy(module).double()
            twin.eval()
            for p in twin.parameters():
                p.requires_grad_(False)
            twins.append(twin)
        nets._double_cache = tuple(twins)
    return nets._double_cache


def _forward_tensor(nets: NetworkBundle, batch: torch.Tensor) -> list[RawOutputs]:
    c_out = nets.arch.c_out
    teacher, student, autoencoder = _inference_modules(nets)
    batch = batch.double()
    with torch.no_grad():
        teacher_out = teacher(batch).numpy()
        student_out = student(batch).numpy()
        ae_out = autoencoder(batch).numpy()
    outputs = []
    for i in range(batch.shape[0]):
        outputs.append(
            RawOutputs(
                teacher_map=teacher_out[i],
                student_former=student_out[i, :c_out],
                student_latter=student_out[i, c_out:],
                ae_map=ae_out[i],
            )
        )
    return outputs


def parameter_arrays(nets: NetworkBundle) -> list[tuple[str, np.ndarray]]:
    """All parameters in the declared order: teacher, student, autoencoder."""
    arrays = []
    for prefix, module in nets.modules_in_order():
        for name, param in module.named_parameters():
            arrays.append((f"{prefix}.{name}", param.detach().numpy()))
    return arrays


def save_checkpoint(nets: NetworkBundle, path: str | Path) -> None:
    """Binary container: magic, version, arch record, float32 LE arrays."""
    header = {
        "arch": asdict(nets.arch),
        "trained": nets.trained,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    arrays = parameter_arrays(nets)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, array in arrays:
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> NetworkBundle:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint file not found: {path}")
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"not a checkpoint file (bad magic): {path}")
    offset = 4
    (version,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if version != _VERSION:
        raise InputError(f"unsupported checkpoint version {version} in {path}")
    (header_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    arch = ArchSpec(**header["arch"])
    nets = init_networks(arch, seed=0)
    expected = {name: array.shape for name, array in parameter_arrays(nets)}
    (n_arrays,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if n_arrays != len(expected):
        raise InputError(
            f"checkpoint holds {n_arrays} arrays, architecture needs {len(expected)}"
        )
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        if name not in expected or expected[name] != shape:
            raise InputError(f"checkpoint array {name!r} does not match architecture")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        array = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        loaded[name] = array
    with torch.no_grad():
        for prefix, module in nets.modules_in_order():
            for name, param in module.named_parameters():
                param.copy_(torch.from_numpy(loaded[f"{prefix}.{name}"].copy()))
    nets.trained = bool(header["trained"])
    return nets
