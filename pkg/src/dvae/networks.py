"""Encoder/decoder building blocks and the checkpoint archive format.

Two scale presets exist for every net kind:

  - "paper": ResNet-18-style image encoder, DCGAN-style transposed-conv
    image decoder, 6-layer 512-wide MLPs for vectors;
  - "desk": 4-block strided conv encoder for 32x32 inputs, transposed-conv
    decoder growing a 4x4 seed, 3-layer 128-wide MLPs.  Small enough to
    train on one CPU; everything the test suite runs uses this preset.

Initialization is fan-in-scaled uniform from a private torch.Generator, so
a (spec, seed) pair fully determines the parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
from torch import Tensor, nn

from .errors import CheckpointError, ConfigError, DimensionError
from .latent import LOG_VAR_MAX, LOG_VAR_MIN, GaussianParams, LatentPartition

ENCODER_KINDS = ("image_encoder", "vector_encoder")
DECODER_KINDS = ("image_decoder", "vector_decoder")
PRESETS = ("paper", "desk")

CHECKPOINT_FORMAT = "dvae-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetSpec:
    """Architecture description sufficient to rebuild a net from scratch.

    ``input_shape`` is (H, W, C) for image kinds and (n,) for vector kinds.
    Encoders produce GaussianParams of dimension ``output_dim``; decoders
    produce ``output_shape`` images or ``output_dim`` vectors.
    """

    kind: str
    input_shape: tuple[int, ...]
    output_dim: int = 0
    output_shape: tuple[int, ...] = ()
    width: int = 128
    depth: int = 3
    scale_preset: str = "desk"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "output_shape", tuple(int(v) for v in self.output_shape))
        if self.kind not in ENCODER_KINDS + DECODER_KINDS:
            raise ConfigError(f"unknown net kind {self.kind!r}")
        if self.scale_preset not in PRESETS:
            raise ConfigError(f"unknown scale preset {self.scale_preset!r}")
        if self.width <= 0:
            raise ConfigError("width must be positive")
        if self.kind in ("vector_encoder", "vector_decoder") and self.depth < 1:
            raise ConfigError("vector nets need depth >= 1")
        img_shape = None
        if self.kind == "image_encoder":
            img_shape = self.input_shape
        elif self.kind == "image_decoder":
            img_shape = self.output_shape
        if img_shape is not None:
            if len(img_shape) != 3:
                raise ConfigError(f"image shape must be (H, W, C), got {img_shape}")
            h, w, _ = img_shape
            if h != w or h < 16 or (h & (h - 1)) != 0:
                raise ConfigError(
                    f"image side must be a power of two >= 16 with H == W, got {img_shape}"
                )
        if self.kind in ENCODER_KINDS + ("vector_decoder",) and self.output_dim <= 0:
            raise ConfigError(f"{self.kind} needs a positive output_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: Mapping) -> "NetSpec":
        return NetSpec(
            kind=data["kind"],
            input_shape=tuple(data["input_shape"]),
            output_dim=int(data["output_dim"]),
            output_shape=tuple(data["output_shape"]),
            width=int(data["width"]),
            depth=int(data["depth"]),
            scale_preset=data["scale_preset"],
        )


@dataclass
class ParameterSet:
    """Named snapshot of a net's parameters plus its provenance."""

    tensors: dict[str, Tensor]
    version: int
    seed: int

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not bool(torch.isfinite(t).all()):
                raise CheckpointError(f"parameter {name!r} contains non-finite values")


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform init of all weights/biases, deterministic in seed."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


class GaussianHead(nn.Module):
    """Two parallel linear heads emitting (mean, clamped log-variance)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.mean = nn.Linear(in_features, out_features)
        self.log_var = nn.Linear(in_features, out_features)

    def forward(self, h: Tensor) -> GaussianParams:
        return GaussianParams(self.mean(h), self.log_var(h).clamp(LOG_VAR_MIN, LOG_VAR_MAX))


def _check_image_input(x: Tensor, shape_hwc: tuple[int, ...]) -> None:
    h, w, c = shape_hwc
    if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
        raise DimensionError(
            f"expected image batch of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}"
        )


def _check_vector_input(x: Tensor, n: int) -> None:
    if x.dim() != 2 or x.shape[1] != n:
        raise DimensionError(f"expected vector batch of shape (B, {n}), got {tuple(x.shape)}")


class ConvImageEncoder(nn.Module):
    """Strided conv stack; desk preset is 4 blocks for 32x32 inputs."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        h, _, c = spec.input_shape
        n_blocks = int(math.log2(h)) - 1  # down to 2x2
        layers, ch_in = [], c
        for i in range(n_blocks):
            ch_out = min(32 * 2**i, 256)
            layers += [nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1), nn.ReLU()]
            ch_in = ch_out
        self.features = nn.Sequential(*layers)
        self.head = GaussianHead(ch_in * 4, spec.output_dim)

    def forward(self, x: Tensor) -> GaussianParams:
        _check_image_input(x, self.spec.input_shape)
        h = self.features(x).flatten(1)
        return self.head(h)


class ResidualBlock(nn.Module):
    def __init__(self, ch_in, ch_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = (
            nn.Conv2d(ch_in, ch_out, 1, stride=stride) if (stride != 1 or ch_in != ch_out) else nn.Identity()
        )

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        h = self.conv2(h)
        return torch.relu(h + self.skip(x))


class ResNetImageEncoder(nn.Module):
    """ResNet-18-style backbone (4 stages of 2 residual blocks), paper preset."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        _, _, c = spec.input_shape
        self.stem = nn.Sequential(
            nn.Conv2d(c, 64, 7, stride=2, padding=3), nn.ReLU(), nn.MaxPool2d(3, stride=2, padding=1)
        )
        stages, ch = [], 64
        for i, ch_out in enumerate((64, 128, 256, 512)):
            stages += [ResidualBlock(ch, ch_out, stride=1 if i == 0 else 2), ResidualBlock(ch_out, ch_out)]
            ch = ch_out
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = GaussianHead(512, spec.output_dim)

    def forward(self, x: Tensor) -> GaussianParams:
        _check_image_input(x, self.spec.input_shape)
        h = self.pool(self.stages(self.stem(x))).flatten(1)
        return self.head(h)


class ConvImageDecoder(nn.Module):
    """Transposed-conv stack growing a 4x4 seed to the target image, tanh output."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        h, _, c = spec.output_shape
        seed_ch = 512 if spec.scale_preset == "paper" else 128
        n_up = int(math.log2(h)) - 2  # 4 -> h
        self.seed_ch = seed_ch
        self.project = nn.Linear(spec.input_shape[0], seed_ch * 16)
        layers, ch_in = [], seed_ch
        for i in range(n_up):
            ch_out = max(ch_in // 2, 16)
            layers += [nn.ConvTranspose2d(ch_in, ch_out, 4, stride=2, padding=1), nn.ReLU()]
            ch_in = ch_out
        self.features = nn.Sequential(*layers)
        self.to_image = nn.Conv2d(ch_in, c, 3, padding=1)

    def forward(self, z: Tensor) -> Tensor:
        _check_vector_input(z, self.spec.input_shape[0])
        h = self.project(z).reshape(z.shape[0], self.seed_ch, 4, 4)
        return torch.tanh(self.to_image(self.features(h)))


class VectorEncoder(nn.Module):
    """MLP over flat vectors ending in a Gaussian head."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        layers, n = [], spec.input_shape[0]
        for _ in range(spec.depth):
            layers += [nn.Linear(n, spec.width), nn.ReLU()]
            n = spec.width
        self.features = nn.Sequential(*layers)
        self.head = GaussianHead(n, spec.output_dim)

    def forward(self, x: Tensor) -> GaussianParams:
        _check_vector_input(x, self.spec.input_shape[0])
        return self.head(self.features(x))


class VectorDecoder(nn.Module):
    """MLP mapping a latent slice (or full code) to a flat reconstruction."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        layers, n = [], spec.input_shape[0]
        for _ in range(spec.depth):
            layers += [nn.Linear(n, spec.width), nn.ReLU()]
            n = spec.width
        layers.append(nn.Linear(n, spec.output_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        _check_vector_input(z, self.spec.input_shape[0])
        return self.net(z)


def _build(spec: NetSpec, seed: int, expect: tuple[str, ...]) -> nn.Module:
    if spec.kind not in expect:
        raise ConfigError(f"spec kind {spec.kind!r} is not one of {expect}")
    if spec.kind == "image_encoder":
        net = ResNetImageEncoder(spec) if spec.scale_preset == "paper" else ConvImageEncoder(spec)
    elif spec.kind == "image_decoder":
        net = ConvImageDecoder(spec)
    elif spec.kind == "vector_encoder":
        net = VectorEncoder(spec)
    else:
        net = VectorDecoder(spec)
    init_parameters(net, seed)
    net.init_seed = int(seed)
    return net


def build_encoder(spec: NetSpec, seed: int) -> nn.Module:
    """Deterministically initialized encoder: input -> GaussianParams."""
    return _build(spec, seed, ENCODER_KINDS)


def build_decoder(spec: NetSpec, seed: int) -> nn.Module:
    """Deterministically initialized decoder: latent vector -> tensor."""
    return _build(spec, seed, DECODER_KINDS)


def parameter_set(net: nn.Module) -> ParameterSet:
    """Detached snapshot of a net's parameters."""
    tensors = {name: p.detach().clone() for name, p in net.named_parameters()}
    return ParameterSet(tensors, CHECKPOINT_VERSION, getattr(net, "init_seed", 0))


def count_parameters(*nets: nn.Module) -> int:
    return sum(p.numel() for net in nets for p in net.parameters())


class GradContext:
    """Handle for pulling parameter gradients of any scalar loss of an output."""

    def __init__(self, net: nn.Module):
        self.net = net

    def gradients(self, loss: Tensor) -> dict[str, Tensor]:
        named = list(self.net.named_parameters())
        grads = torch.autograd.grad(
            loss, [p for _, p in named], retain_graph=True, allow_unused=True
        )
        return {
            name: (g if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(named, grads)
        }


def forward_with_gradients(net: nn.Module, x: Tensor):
    """Forward pass plus a context for extracting parameter gradients."""
    return net(x), GradContext(net)


def vector_spec(kind: str, in_dim: int, out_dim: int, preset: str = "desk") -> NetSpec:
    width, depth = (512, 6) if preset == "paper" else (128, 3)
    return NetSpec(kind, (in_dim,), output_dim=out_dim, width=width, depth=depth, scale_preset=preset)


def image_encoder_spec(side: int, out_dim: int, preset: str = "desk", channels: int = 3) -> NetSpec:
    return NetSpec("image_encoder", (side, side, channels), output_dim=out_dim, scale_preset=preset)


def image_decoder_spec(in_dim: int, side: int, preset: str = "desk", channels: int = 3) -> NetSpec:
    return NetSpec(
        "image_decoder", (in_dim,), output_shape=(side, side, channels), scale_preset=preset
    )


def save_checkpoint(
    path,
    task: str,
    partition: LatentPartition,
    nets: Mapping[str, nn.Module],
    config_hash: str,
) -> None:
    """Write one archive holding every net's spec, seed and parameters."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "task": task,
        "config_hash": config_hash,
        "partition": partition.to_dict(),
        "nets": {
            role: {
                "spec": net.spec.to_dict(),
                "seed": getattr(net, "init_seed", 0),
                "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
            }
            for role, net in nets.items()
        },
    }
    torch.save(payload, path)


@dataclass
class Checkpoint:
    """A loaded model bundle: task, partition, live nets, config hash."""

    task: str
    partition: LatentPartition
    nets: dict[str, nn.Module]
    config_hash: str

    def save(self, path) -> None:
        save_checkpoint(path, self.task, self.partition, self.nets, self.config_hash)


def load_checkpoint(
    path,
    expected_task: str | None = None,
    expected_partition: LatentPartition | None = None,
) -> Checkpoint:
    """Rebuild every net from its stored spec and load its parameters.

    Fails loudly (CheckpointError) on unknown format/version, on spec/state
    inconsistencies, and on mismatch with the caller's expectations.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    partition = LatentPartition.from_dict(payload["partition"])
    task = payload["task"]
    if expected_task is not None and task != expected_task:
        raise CheckpointError(f"checkpoint task {task!r} != expected {expected_task!r}")
    if expected_partition is not None and partition != expected_partition:
        raise CheckpointError(
            f"checkpoint partition {partition.segments} != expected {expected_partition.segments}"
        )
    nets = {}
    for role, entry in payload["nets"].items():
        spec = NetSpec.from_dict(entry["spec"])
        builder = build_encoder if spec.kind in ENCODER_KINDS else build_decoder
        net = builder(spec, entry["seed"])
        try:
            net.load_state_dict(entry["state"], strict=True)
        except Exception as exc:
            raise CheckpointError(f"net {role!r} state does not match its spec: {exc}") from exc
        nets[role] = net
    return Checkpoint(task, partition, nets, payload["config_hash"])
