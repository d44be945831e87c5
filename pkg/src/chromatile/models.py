"""Residual encoder, mirrored transposed-convolution decoder, and linear head.

The encoder is a stem (conv + norm + relu, optionally followed by a 2x2
max-pool) and four residual stages.  Every stage halves the spatial extent:
its first unit carries a stride-2 4x4 convolution with a 2x2 stride-2
projection shortcut, remaining units are 3x3 identity units.  The decoder
mirrors the stages with the first convolution of each mirrored block
replaced by its stride-2 transposed counterpart, then a head of
upsample -> norm -> relu -> transposed conv down to 2 chroma channels, so
the output extent equals the network input extent.

Strided convolutions use even kernels throughout because the convolution
contract requires the output extent (H + 2p - k)/s + 1 to be an integer,
which odd kernels at stride 2 cannot satisfy on even extents.

Checkpoints are a small binary format (magic "CKPT") holding a key=value
metadata block plus named float32 tensors, with a trailing CRC32.
"""

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from chromatile.errors import DataError, UsageError
from chromatile.numerics import (
    BatchNormState,
    ParameterSet,
    Tensor,
    add,
    batch_norm2d,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    upsample_nearest,
)
from chromatile.seeding import rng_for

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1

DESK_STAGE_WIDTHS = (8, 16, 32, 64)
FULL_STAGE_WIDTHS = (64, 128, 256, 512)


# ------------------------------------------------------------- configuration


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture description shared by encoder, decoder, and checkpoints."""

    in_channels: int
    stage_widths: tuple = DESK_STAGE_WIDTHS
    units_per_stage: int = 2
    input_extent: int = 32
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False

    @classmethod
    def desk(cls, in_channels: int, input_extent: int = 32) -> "EncoderConfig":
        """Thin profile verifiable in minutes on a CPU."""
        return cls(in_channels=in_channels, input_extent=input_extent)

    @classmethod
    def full(cls, in_channels: int, input_extent: int = 128) -> "EncoderConfig":
        """Wide profile: 64..512 widths, downsampling stem with max-pool."""
        return cls(
            in_channels=in_channels,
            stage_widths=FULL_STAGE_WIDTHS,
            input_extent=input_extent,
            stem_kernel=8,
            stem_stride=2,
            stem_pool=True,
        )

    def validate(self) -> None:
        if self.in_channels < 1:
            raise UsageError("in_channels must be >= 1")
        widths = tuple(self.stage_widths)
        if not widths or any(w < 1 for w in widths):
            raise UsageError("stage widths must be positive")
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise UsageError("stage widths must be non-decreasing")
        if self.units_per_stage < 1:
            raise UsageError("units_per_stage must be >= 1")
        if self.stem_stride not in (1, 2):
            raise UsageError("stem_stride must be 1 or 2")
        if self.stem_stride == 1 and self.stem_kernel % 2 != 1:
            raise UsageError("stride-1 stem needs an odd kernel to keep extent")
        if self.stem_stride == 2 and self.stem_kernel % 2 != 0:
            raise UsageError("stride-2 stem needs an even kernel to tile evenly")
        factor = self.reduction_factor()
        if self.input_extent % factor != 0 or self.input_extent < factor:
            raise UsageError(
                f"input extent {self.input_extent} cannot survive "
                f"{factor}x reduction (needs a positive multiple of {factor})"
            )

    def stem_padding(self) -> int:
        if self.stem_stride == 1:
            return (self.stem_kernel - 1) // 2
        return (self.stem_kernel - 2) // 2

    def reduction_factor(self) -> int:
        halvings = len(tuple(self.stage_widths))
        if self.stem_stride == 2:
            halvings += 1
        if self.stem_pool:
            halvings += 1
        return 2**halvings

    def final_extent(self) -> int:
        return self.input_extent // self.reduction_factor()

    def bottleneck_width(self) -> int:
        return tuple(self.stage_widths)[-1]

    def to_metadata(self, prefix: str = "encoder.") -> dict:
        return {
            f"{prefix}in_channels": str(self.in_channels),
            f"{prefix}stage_widths": ",".join(str(w) for w in self.stage_widths),
            f"{prefix}units_per_stage": str(self.units_per_stage),
            f"{prefix}input_extent": str(self.input_extent),
            f"{prefix}stem_kernel": str(self.stem_kernel),
            f"{prefix}stem_stride": str(self.stem_stride),
            f"{prefix}stem_pool": "true" if self.stem_pool else "false",
        }

    @classmethod
    def from_metadata(cls, meta: dict, prefix: str = "encoder.") -> "EncoderConfig":
        try:
            return cls(
                in_channels=int(meta[f"{prefix}in_channels"]),
                stage_widths=tuple(
                    int(w) for w in meta[f"{prefix}stage_widths"].split(",")
                ),
                units_per_stage=int(meta[f"{prefix}units_per_stage"]),
                input_extent=int(meta[f"{prefix}input_extent"]),
                stem_kernel=int(meta[f"{prefix}stem_kernel"]),
                stem_stride=int(meta[f"{prefix}stem_stride"]),
                stem_pool=meta[f"{prefix}stem_pool"] == "true",
            )
        except KeyError as exc:
            raise DataError(f"checkpoint metadata misses {exc.args[0]}") from None


# ------------------------------------------------------------------- layers


def _he_weights(rng, shape, fan_in: int) -> np.ndarray:
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(np.float32)


class _Conv:
    """Bias-free (transposed) convolution with He-initialized weights.

    fan_in counts input connections per kernel application: in_ch * k * k,
    with the leading weight axis as input channels for the transposed form.
    """

    def __init__(
        self, params, name, in_ch, out_ch, kernel, stride, padding, seed,
        transposed=False,
    ):
        fan_in = in_ch * kernel * kernel
        shape = (in_ch, out_ch, kernel, kernel) if transposed else (
            out_ch, in_ch, kernel, kernel
        )
        weights = _he_weights(rng_for(seed, f"init/{name}.w"), shape, fan_in)
        self.w = params.add(f"{name}.w", Tensor(weights, requires_grad=True))
        self.stride = stride
        self.padding = padding
        self.transposed = transposed

    def forward(self, x):
        if self.transposed:
            return conv_transpose2d(x, self.w, stride=self.stride, padding=self.padding)
        return conv2d(x, self.w, None, stride=self.stride, padding=self.padding)


class _Norm:
    """Batch norm layer: gamma/beta parameters plus running-stat buffers."""

    def __init__(self, params, buffers, name, channels):
        self.gamma = params.add(
            f"{name}.gamma", Tensor(np.ones(channels, np.float32), requires_grad=True)
        )
        self.beta = params.add(
            f"{name}.beta", Tensor(np.zeros(channels, np.float32), requires_grad=True)
        )
        self.state = BatchNormState.initial(channels)
        buffers[f"{name}.running_mean"] = self.state.mean
        buffers[f"{name}.running_var"] = self.state.var

    def forward(self, x, mode):
        return batch_norm2d(x, self.gamma, self.beta, self.state, mode=mode)


class _ResidualUnit:
    """One residual unit: conv-norm-relu-conv-norm plus a shortcut.

    kind "identity" keeps extent and width (plain shortcut); "down" halves
    the extent with a 4x4 stride-2 conv; "up" doubles it with the transposed
    counterpart.  Non-identity units project the shortcut with a 2x2
    stride-2 (transposed) convolution followed by its own norm.
    """

    def __init__(self, params, buffers, name, in_ch, out_ch, kind, seed):
        self.kind = kind
        up = kind == "up"
        if kind == "identity":
            self.conv1 = _Conv(params, f"{name}.conv1", in_ch, out_ch, 3, 1, 1, seed)
            self.proj = None
        else:
            self.conv1 = _Conv(
                params, f"{name}.conv1", in_ch, out_ch, 4, 2, 1, seed, transposed=up
            )
            self.proj = _Conv(
                params, f"{name}.proj", in_ch, out_ch, 2, 2, 0, seed, transposed=up
            )
            self.bnp = _Norm(params, buffers, f"{name}.bnp", out_ch)
        self.bn1 = _Norm(params, buffers, f"{name}.bn1", out_ch)
        self.conv2 = _Conv(params, f"{name}.conv2", out_ch, out_ch, 3, 1, 1, seed)
        self.bn2 = _Norm(params, buffers, f"{name}.bn2", out_ch)

    def forward(self, x, mode):
        path = relu(self.bn1.forward(self.conv1.forward(x), mode))
        path = self.bn2.forward(self.conv2.forward(path), mode)
        if self.proj is None:
            shortcut = x
        else:
            shortcut = self.bnp.forward(self.proj.forward(x), mode)
        return relu(add(path, shortcut))


class _Stage:
    def __init__(self, params, buffers, name, in_ch, out_ch, units, kind, seed):
        self.units = [
            _ResidualUnit(
                params, buffers, f"{name}.unit{j}",
                in_ch if j == 0 else out_ch, out_ch,
                kind if j == 0 else "identity", seed,
            )
            for j in range(units)
        ]

    def forward(self, x, mode):
        for unit in self.units:
            x = unit.forward(x, mode)
        return x


# ------------------------------------------------------------------- models


class Encoder:
    """Stem plus residual stages; forward yields stage maps and the pooled
    bottleneck vector."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.params = ParameterSet()
        self.buffers = {}
        widths = tuple(cfg.stage_widths)
        self.stem_conv = _Conv(
            self.params, "stem.conv", cfg.in_channels, widths[0],
            cfg.stem_kernel, cfg.stem_stride, cfg.stem_padding(), seed,
        )
        self.stem_bn = _Norm(self.params, self.buffers, "stem.bn", widths[0])
        self.stages = []
        in_ch = widths[0]
        for i, out_ch in enumerate(widths):
            self.stages.append(
                _Stage(
                    self.params, self.buffers, f"stage{i + 1}",
                    in_ch, out_ch, cfg.units_per_stage, "down", seed,
                )
            )
            in_ch = out_ch

    def forward(self, x, mode="train"):
        """(N, C, H, W) -> (list of per-stage maps, bottleneck (N, D))."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        expected = (self.cfg.in_channels, self.cfg.input_extent, self.cfg.input_extent)
        if data.ndim != 4 or data.shape[1:] != expected:
            raise UsageError(
                f"encoder expects (N, {expected[0]}, {expected[1]}, {expected[2]}) "
                f"input, got {data.shape}"
            )
        h = relu(self.stem_bn.forward(self.stem_conv.forward(x), mode))
        if self.cfg.stem_pool:
            h = max_pool2d(h, 2, 2)
        maps = []
        for stage in self.stages:
            h = stage.forward(h, mode)
            maps.append(h)
        return maps, global_avg_pool(h)

    def named_arrays(self) -> dict:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out


class Decoder:
    """Mirror of the encoder: four upsampling residual stages plus a head of
    upsample -> norm -> relu -> transposed conv emitting 2 channels."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.params = ParameterSet()
        self.buffers = {}
        widths = tuple(cfg.stage_widths)[::-1]
        outs = widths[1:] + (widths[-1],)
        self.stages = []
        for i, (in_ch, out_ch) in enumerate(zip(widths, outs)):
            self.stages.append(
                _Stage(
                    self.params, self.buffers, f"stage{i + 1}",
                    in_ch, out_ch, cfg.units_per_stage, "up", seed,
                )
            )
        self.head_factor = 2 if cfg.stem_pool else 1
        self.head_bn = _Norm(self.params, self.buffers, "head.bn", outs[-1])
        self.head_conv = _Conv(
            self.params, "head.conv", outs[-1], 2,
            cfg.stem_kernel, cfg.stem_stride, cfg.stem_padding(), seed,
            transposed=True,
        )

    def forward(self, bottleneck_map, mode="train"):
        """(N, D, h, h) bottleneck-stage map -> (N, 2, extent, extent)."""
        data = (
            bottleneck_map.data
            if isinstance(bottleneck_map, Tensor)
            else np.asarray(bottleneck_map)
        )
        depth = self.cfg.bottleneck_width()
        extent = self.cfg.final_extent()
        if data.ndim != 4 or data.shape[1:] != (depth, extent, extent):
            raise UsageError(
                f"decoder expects (N, {depth}, {extent}, {extent}) input, "
                f"got {data.shape}"
            )
        h = bottleneck_map
        for stage in self.stages:
            h = stage.forward(h, mode)
        if self.head_factor > 1:
            h = upsample_nearest(h, self.head_factor)
        h = relu(self.head_bn.forward(h, mode))
        return self.head_conv.forward(h)

    def named_arrays(self) -> dict:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out


class ClassifierHead:
    """Affine map from bottleneck features to class logits."""

    def __init__(self, in_features: int, n_classes: int, seed: int):
        if in_features < 1 or n_classes < 1:
            raise UsageError("head extents must be >= 1")
        self.in_features = in_features
        self.n_classes = n_classes
        self.params = ParameterSet()
        self.w = self.params.add(
            "w",
            Tensor(
                _he_weights(rng_for(seed, "init/w"), (in_features, n_classes), in_features),
                requires_grad=True,
            ),
        )
        self.b = self.params.add(
            "b", Tensor(np.zeros(n_classes, np.float32), requires_grad=True)
        )
        self.buffers = {}

    def forward(self, h):
        data = h.data if isinstance(h, Tensor) else np.asarray(h)
        if data.ndim != 2 or data.shape[1] != self.in_features:
            raise UsageError(
                f"head expects (N, {self.in_features}) features, got {data.shape}"
            )
        return linear(h, self.w, self.b)

    def named_arrays(self) -> dict:
        return {name: p.data for name, p in self.params.items()}


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    return Encoder(cfg, seed)


def build_decoder(cfg: EncoderConfig, seed: int) -> Decoder:
    return Decoder(cfg, seed)


def build_head(in_features: int, n_classes: int, seed: int) -> ClassifierHead:
    return ClassifierHead(in_features, n_classes, seed)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, metadata: dict, arrays: dict) -> None:
    """Write metadata plus named float32 tensors with a trailing CRC32."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION)]
    block = "".join(
        f"{key}={metadata[key]}\n" for key in sorted(metadata)
    ).encode("utf-8")
    parts.append(struct.pack("<I", len(block)))
    parts.append(block)
    parts.append(struct.pack("<I", len(arrays)))
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 255:
            raise UsageError(f"tensor name too long: {name!r}")
        grid = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<B", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", grid.ndim))
        parts.append(struct.pack(f"<{grid.ndim}I", *grid.shape))
        parts.append(grid.tobytes())
    payload = b"".join(parts)
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_checkpoint(path):
    """Read a checkpoint back as (metadata dict, name -> float32 array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 1 + 4 + 4 + 4:
        raise DataError(f"{path}: truncated checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise DataError(f"{path}: checkpoint checksum mismatch")
    version = raw[4]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    body = raw[5:-4]
    cursor = 0

    def take(n):
        nonlocal cursor
        if cursor + n > len(body):
            raise DataError(f"{path}: truncated checkpoint body")
        chunk = body[cursor : cursor + n]
        cursor += n
        return chunk

    block_len = struct.unpack("<I", take(4))[0]
    metadata = {}
    for line in take(block_len).decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: malformed metadata line {line!r}")
        key, value = line.split("=", 1)
        if key in metadata:
            raise DataError(f"{path}: duplicate metadata key {key!r}")
        metadata[key] = value
    count = struct.unpack("<I", take(4))[0]
    arrays = {}
    for _ in range(count):
        name_len = struct.unpack("<B", take(1))[0]
        name = take(name_len).decode("utf-8")
        rank = struct.unpack("<B", take(1))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        grid = np.frombuffer(take(4 * n_values), dtype="<f4").reshape(shape)
        if name in arrays:
            raise DataError(f"{path}: duplicate tensor {name!r}")
        arrays[name] = grid.copy()
    if cursor != len(body):
        raise DataError(f"{path}: {len(body) - cursor} stray bytes after tensors")
    return metadata, arrays


def load_arrays_into(model, arrays: dict, prefix: str = "") -> None:
    """Strict restore: every model array present with matching extents."""
    named = model.named_arrays()
    for name, target in named.items():
        key = prefix + name
        if key not in arrays:
            raise DataError(f"checkpoint misses parameter {key!r}")
        value = arrays[key]
        if tuple(value.shape) != tuple(target.shape):
            raise DataError(
                f"checkpoint parameter {key!r} has extents {tuple(value.shape)}, "
                f"model expects {tuple(target.shape)}"
            )
        target[...] = value
    expected = {prefix + name for name in named}
    for key in arrays:
        if key.startswith(prefix) and key not in expected:
            raise DataError(f"checkpoint parameter {key!r} is unknown to the model")


def restore_matching(model, arrays: dict, prefix: str = ""):
    """Partial restore: copy the name intersection where extents agree.

    Returns (restored, skipped) name lists; parameters absent from the
    checkpoint or with different extents (e.g. a swapped stem) keep their
    fresh initialization.
    """
    restored, skipped = [], []
    for name, target in model.named_arrays().items():
        key = prefix + name
        value = arrays.get(key)
        if value is not None and tuple(value.shape) == tuple(target.shape):
            target[...] = value
            restored.append(name)
        else:
            skipped.append(name)
    return restored, skipped


def save_models_checkpoint(path, metadata: dict, models: dict) -> None:
    """Checkpoint several models under name prefixes ("encoder", ...)."""
    arrays = {}
    for prefix, model in models.items():
        for name, value in model.named_arrays().items():
            arrays[f"{prefix}.{name}"] = value
    out_dir = os.path.dirname(str(path))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(path, metadata, arrays)
