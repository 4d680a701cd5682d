"""Counting network (density generator) and patch discriminator.

Parameters live in ordered ``name -> array`` mappings.  The forward functions
accept either raw arrays or tape-watched :class:`~countadapt.core.Var` handles,
so the same code serves inference, training and gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import conv2d, leaky_relu, maxpool2, relu


@dataclass(frozen=True)
class CountingNetConfig:
    """Truncated conv front end (3x3 convs + 2x2 pools) and a dilated back end.

    ``front_channels`` holds one tuple of conv widths per block.  The first
    ``pools`` blocks (all of them by default) end in a 2x2 max pool, so the
    desk-scale two-block net outputs at 1/4 of the input resolution.
    """

    in_channels: int = 1
    front_channels: tuple[tuple[int, ...], ...] = ((16, 16), (32, 32))
    backend_channels: int = 32
    backend_layers: int = 2
    backend_dilation: int = 4
    input_size: tuple[int, int] = (128, 128)
    pools: int | None = None
    # output 1x1 conv init: He std times out_weight_scale, bias out_bias
    out_weight_scale: float = 1.0
    out_bias: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "front_channels", tuple(tuple(b) for b in self.front_channels))
        if not self.out_weight_scale >= 0:
            raise ValueError("out_weight_scale must be >= 0")
        if self.pools is None:
            object.__setattr__(self, "pools", len(self.front_channels))
        if not 0 <= self.pools <= len(self.front_channels):
            raise ValueError("pools must be between 0 and the number of front blocks")
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.backend_dilation < 1:
            raise ValueError("backend_dilation must be >= 1")
        if not self.front_channels or any(not b for b in self.front_channels):
            raise ValueError("front_channels needs at least one non-empty block")

    @property
    def downsample(self) -> int:
        return 2**self.pools

    @classmethod
    def vgg16(cls, in_channels: int = 3, input_size=(512, 512)) -> "CountingNetConfig":
        """Full-width VGG-16 front end through conv4_3 (three pools, 1/8 output)."""
        return cls(
            in_channels=in_channels,
            front_channels=((64, 64), (128, 128), (256, 256, 256), (512, 512, 512)),
            pools=3,
            backend_channels=512,
            backend_dilation=4,
            input_size=input_size,
        )


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64, 1)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) != 5 or self.channels[-1] != 1:
            raise ValueError(f"discriminator needs five layers ending in one channel, got {self.channels}")

    @classmethod
    def full_width(cls) -> "DiscriminatorConfig":
        return cls(channels=(64, 128, 256, 512, 1))

    @classmethod
    def scaled(cls, divisor: int = 8) -> "DiscriminatorConfig":
        return cls(channels=tuple(max(1, c // divisor) for c in (64, 128, 256, 512)) + (1,))

    @property
    def min_input(self) -> int:
        return self.stride**len(self.channels)


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    seed: int | None = None
    scheme: str = "he-normal"

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.seed, self.scheme)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.seed, self.scheme)


def _counting_shapes(cfg: CountingNetConfig):
    shapes = []
    cin = cfg.in_channels
    for b, block in enumerate(cfg.front_channels):
        for i, cout in enumerate(block):
            shapes.append((f"front{b}.{i}", (cout, cin, 3, 3)))
            cin = cout
    for i in range(cfg.backend_layers):
        shapes.append((f"back{i}", (cfg.backend_channels, cin, 3, 3)))
        cin = cfg.backend_channels
    shapes.append(("out", (1, cin, 1, 1)))
    return shapes


def _disc_shapes(cfg: DiscriminatorConfig):
    shapes = []
    cin = 1
    for i, cout in enumerate(cfg.channels):
        shapes.append((f"disc{i}", (cout, cin, cfg.kernel, cfg.kernel)))
        cin = cout
    return shapes


def init_params(config, seed: int, dtype=np.float64) -> ModelParams:
    """He-normal conv weights (std sqrt(2 / fan_in)) and zero biases.

    A counting net's output layer is rescaled by ``out_weight_scale`` and its
    bias set to ``out_bias`` (1.0 and 0.0 by default, i.e. plain He init).
    """
    if isinstance(config, CountingNetConfig):
        shapes = _counting_shapes(config)
    elif isinstance(config, DiscriminatorConfig):
        shapes = _disc_shapes(config)
    else:
        raise TypeError(f"unknown network config {type(config).__name__}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in shapes:
        fan_in = shape[1] * shape[2] * shape[3]
        std, bias = np.sqrt(2.0 / fan_in), 0.0
        if name == "out":
            std, bias = std * config.out_weight_scale, config.out_bias
        arrays[f"{name}.w"] = (rng.standard_normal(shape) * std).astype(dtype)
        arrays[f"{name}.b"] = np.full(shape[0], bias, dtype=dtype)
    return ModelParams(arrays, seed=seed)


def _arrays(params) -> Mapping:
    return params.arrays if isinstance(params, ModelParams) else params


def counting_forward(params, batch, config: CountingNetConfig):
    """Density map at 1/``config.downsample`` resolution, non-negative (final ReLU)."""
    p = _arrays(params)
    x = batch
    shape = np.shape(x.value if hasattr(x, "value") else x)
    if len(shape) != 4 or shape[1] != config.in_channels:
        raise ValueError(f"counting net expects (N, {config.in_channels}, H, W) input, got {shape}")
    d = config.downsample
    if shape[2] % d or shape[3] % d:
        raise ValueError(f"input spatial dims {shape[2]}x{shape[3]} must be divisible by {d}")
    for b, block in enumerate(config.front_channels):
        for i in range(len(block)):
            x = relu(conv2d(x, p[f"front{b}.{i}.w"], p[f"front{b}.{i}.b"], 1, 1, 1))
        if b < config.pools:
            x = maxpool2(x)
    dil = config.backend_dilation
    for i in range(config.backend_layers):
        x = relu(conv2d(x, p[f"back{i}.w"], p[f"back{i}.b"], 1, dil, dil))
    return relu(conv2d(x, p["out.w"], p["out.b"]))


def discriminator_forward(params, density, config: DiscriminatorConfig = DiscriminatorConfig()):
    """Per-location source/target logits at 1/32 of the density resolution."""
    p = _arrays(params)
    shape = np.shape(density.value if hasattr(density, "value") else density)
    if len(shape) != 4 or shape[1] != 1:
        raise ValueError(f"discriminator expects (N, 1, H, W) density maps, got {shape}")
    if min(shape[2], shape[3]) < config.min_input:
        raise ValueError(
            f"density map {shape[2]}x{shape[3]} too small for five stride-{config.stride} layers "
            f"(needs >= {config.min_input})"
        )
    x = density
    last = len(config.channels) - 1
    for i in range(len(config.channels)):
        x = conv2d(x, p[f"disc{i}.w"], p[f"disc{i}.b"], config.stride, config.padding, 1)
        if i < last:
            x = leaky_relu(x, config.leaky_slope)
    return x


# -- CKPT files --------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path, arrays: Mapping[str, np.ndarray], version: int = CKPT_VERSION) -> None:
    """Serialise named arrays: magic, u32 version, then per array
    (u32 name length, UTF-8 name, u32 rank, u32 dims, float32 LE values)."""
    parts = [CKPT_MAGIC, struct.pack("<I", version)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_arrays(path) -> tuple[int, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a CKPT file")
    (version,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header: {exc}") from exc
    return version, arrays
