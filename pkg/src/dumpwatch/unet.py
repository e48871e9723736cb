"""U-Net style encoder-decoder built on the numerics autodiff core.

The architecture is fixed by configuration: ``depth`` encoder stages of two
3x3 convs + 2x2 max pool, a two-conv bottleneck, and mirrored decoder stages
of learned 2x2 stride-2 upsampling, skip concatenation, and two 3x3 convs.
Every convolution, including the single-channel output head, is 3x3 with
same padding, so spatial size is preserved as long as the input is divisible
by 2**depth.

Parameters live in a flat name -> Tensor dict whose order (the "schema") is
derived from the config alone; checkpoints serialize that schema as a JSON
manifest next to a raw little-endian float32 payload.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from ._fileio import atomic_write_bytes, atomic_write_json
from .dataset import NormalizationStats
from .numerics import Tensor

CHECKPOINT_FORMAT = "dumpwatch.checkpoint"
CHECKPOINT_VERSION = 1

ParameterSet = dict[str, Tensor]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    depth: int = 4
    base_filters: int = 16
    kernel_size: int = 3  # fixed; recorded for the checkpoint manifest
    out_channels: int = 1  # fixed: binary segmentation logits

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.kernel_size != 3:
            raise ValueError("kernel_size is fixed at 3")
        if self.out_channels != 1:
            raise ValueError("out_channels is fixed at 1")

    @property
    def pool_factor(self) -> int:
        """Input spatial dims must be divisible by this (2**depth)."""
        return 2**self.depth


def _double_conv_schema(prefix: str, cin: int, cout: int):
    return [
        (f"{prefix}.conv1.weight", (cout, cin, 3, 3)),
        (f"{prefix}.conv1.bias", (cout,)),
        (f"{prefix}.conv2.weight", (cout, cout, 3, 3)),
        (f"{prefix}.conv2.bias", (cout,)),
    ]


def parameter_schema(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; also the checkpoint payload order."""
    widths = [config.base_filters * 2**i for i in range(config.depth + 1)]
    schema: list[tuple[str, tuple[int, ...]]] = []
    cin = config.in_channels
    for i in range(config.depth):
        schema += _double_conv_schema(f"enc{i}", cin, widths[i])
        cin = widths[i]
    schema += _double_conv_schema("bottleneck", widths[-2], widths[-1])
    for i in reversed(range(config.depth)):
        schema.append((f"dec{i}.up.weight", (widths[i + 1], widths[i], 2, 2)))
        schema.append((f"dec{i}.up.bias", (widths[i],)))
        schema += _double_conv_schema(f"dec{i}", 2 * widths[i], widths[i])
    schema.append(("head.weight", (1, config.base_filters, 3, 3)))
    schema.append(("head.bias", (1,)))
    return schema


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_schema(config))


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".up.weight"):
        return shape[0] * shape[2] * shape[3]  # [in, out, kh, kw]
    return int(np.prod(shape[1:]))  # [out, in, kh, kw]


def build_unet(config: UNetConfig, seed: int = 0) -> ParameterSet:
    """Seeded fan-in-scaled normal weights (std = sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, shape in parameter_schema(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            data = (rng.standard_normal(shape) * std).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _double_conv(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    x = numerics.relu(
        numerics.conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
    )
    return numerics.relu(
        numerics.conv2d(x, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])
    )


def forward(params: ParameterSet, config: UNetConfig, batch: Tensor) -> Tensor:
    """Segmentation logits [batch, 1, h, w] for input [batch, c, h, w]."""
    b, c, h, w = batch.data.shape
    if c != config.in_channels:
        raise ValueError(f"model expects {config.in_channels} channels, got {c}")
    factor = config.pool_factor
    if h % factor or w % factor:
        raise ValueError(
            f"spatial dims {h}x{w} must be divisible by 2**depth = {factor}"
        )
    skips: list[Tensor] = []
    x = batch
    for i in range(config.depth):
        x = _double_conv(params, f"enc{i}", x)
        skips.append(x)
        x = numerics.max_pool_2x2(x)
    x = _double_conv(params, "bottleneck", x)
    for i in reversed(range(config.depth)):
        x = numerics.transposed_conv_2x2(
            x, params[f"dec{i}.up.weight"], params[f"dec{i}.up.bias"]
        )
        x = numerics.concat_channels(x, skips[i])
        x = _double_conv(params, f"dec{i}", x)
    return numerics.conv2d(x, params["head.weight"], params["head.bias"])


def receptive_field_radius(config: UNetConfig) -> int:
    """Exact max distance (in input pixels) that can influence one output pixel.

    Walked backwards through the graph as an interval [lo, hi] of input
    offsets around the output pixel: a 3x3 conv widens each end by 1, 2x2
    pooling maps it to [2*lo, 2*hi + 1] (the pool window covers indices 2p
    and 2p+1), and the stride-2 upsampling maps it to [lo//2, hi//2] since
    output o depends only on input o//2. The window ends up asymmetric
    ([-10, 9] at depth 1); the returned radius is the larger extent, so
    pixels further than this from a perturbation are provably unaffected.
    """
    lo, hi = -1, 1  # output head conv
    for _ in range(config.depth):  # decoder stages, shallowest to deepest
        lo -= 2
        hi += 2
        lo //= 2  # floor handles the negative end exactly
        hi //= 2
    lo -= 2  # bottleneck convs
    hi += 2
    for _ in range(config.depth):  # encoder stages, deepest to shallowest
        lo, hi = 2 * lo, 2 * hi + 1
        lo -= 2
        hi += 2
    return max(-lo, hi)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: UNetConfig
    parameters: dict[str, np.ndarray]
    normalization: NormalizationStats | None = None
    format_version: int = CHECKPOINT_VERSION
    training_metadata: dict = field(default_factory=dict)


def checkpoint_from_params(
    config: UNetConfig,
    params: ParameterSet,
    normalization: NormalizationStats | None = None,
    training_metadata: dict | None = None,
) -> Checkpoint:
    return Checkpoint(
        config=config,
        parameters={name: p.data.copy() for name, p in params.items()},
        normalization=normalization,
        training_metadata=dict(training_metadata or {}),
    )


def params_from_checkpoint(ckpt: Checkpoint) -> ParameterSet:
    return {
        name: Tensor(arr.astype(np.float32, copy=True), requires_grad=True)
        for name, arr in ckpt.parameters.items()
    }


def _checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    base = str(path)
    return Path(base + ".json"), Path(base + ".bin")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write manifest (+ .json) and float32 payload (+ .bin) atomically."""
    schema = parameter_schema(ckpt.config)
    for name, shape in schema:
        if name not in ckpt.parameters:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if tuple(ckpt.parameters[name].shape) != shape:
            raise ValueError(
                f"schema mismatch for {name!r}: config implies {shape}, "
                f"checkpoint holds {tuple(ckpt.parameters[name].shape)}"
            )
    manifest_path, payload_path = _checkpoint_paths(path)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "format_version": ckpt.format_version,
        "config": asdict(ckpt.config),
        "schema": [[name, list(shape)] for name, shape in schema],
        "normalization": (
            ckpt.normalization.to_json_dict() if ckpt.normalization else None
        ),
        "training_metadata": ckpt.training_metadata,
    }
    payload = b"".join(
        np.ascontiguousarray(ckpt.parameters[name], dtype="<f4").tobytes()
        for name, _ in schema
    )
    atomic_write_bytes(payload_path, payload)
    atomic_write_json(manifest_path, manifest)


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest_path, payload_path = _checkpoint_paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    if not payload_path.exists():
        raise FileNotFoundError(f"missing checkpoint payload {payload_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {manifest_path}")
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = UNetConfig(**manifest["config"])
    expected = parameter_schema(config)
    stored = [(name, tuple(shape)) for name, shape in manifest["schema"]]
    if stored != expected:
        raise ValueError(
            "schema mismatch: stored parameter list does not match the "
            "architecture implied by the checkpoint config"
        )
    payload = payload_path.read_bytes()
    total = sum(int(np.prod(shape)) for _, shape in expected)
    if len(payload) != total * 4:
        raise ValueError(
            f"corrupt payload {payload_path}: expected {total * 4} bytes, "
            f"found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    parameters: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in expected:
        size = int(np.prod(shape))
        parameters[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    norm = manifest.get("normalization")
    return Checkpoint(
        config=config,
        parameters=parameters,
        normalization=NormalizationStats.from_json_dict(norm) if norm else None,
        format_version=version,
        training_metadata=manifest.get("training_metadata", {}),
    )
