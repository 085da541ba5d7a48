"""The shared-encoder U-Net with an optional classification branch."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import blocks
from .autodiff import ops
from .autodiff.ops import ConfigError
from .autodiff.tensor import Parameter, ShapeError, Tape, Tensor
from .blocks import ClassHeadConfig, Initializer, ResNetBlockConfig


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    init_filters: int = 32
    stages: int = 3
    kernel: int = 3
    num_classes: int = 3
    classification_enabled: bool = True
    blocks_per_stage: int = 1
    bottleneck_blocks: int = 1
    class_hidden: int = 64

    def __post_init__(self) -> None:
        if min(self.in_channels, self.init_filters, self.num_classes, self.class_hidden) < 1:
            raise ConfigError("channel, class and hidden counts must be positive")
        if self.stages < 0 or self.blocks_per_stage < 1 or self.bottleneck_blocks < 1:
            raise ConfigError("stages must be >= 0 and block counts >= 1")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")

    @property
    def bottleneck_channels(self) -> int:
        return self.init_filters * 2**self.stages

    def check_input_dims(self, dims) -> None:
        m = 2**self.stages
        if any(int(d) % m for d in dims):
            raise ConfigError(f"spatial dims {tuple(dims)} must be divisible by 2**stages = {m}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in fields:
                raise ConfigError(f"unknown model config key {k!r}")
            if isinstance(v, str):
                v = v.lower() in ("1", "true", "yes") if fields[k] in (bool, "bool") else int(v)
            kw[k] = v
        return cls(**kw)


@dataclass
class ForwardOutput:
    seg_prob: Tensor
    class_logits: Tensor | None
    bottleneck: Tensor


class DMTLModel:
    """Named parameters plus the topology described by ``config``."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def tensors(self) -> dict[str, Tensor]:
        return {name: p.tensor for name, p in self.params.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def astype(self, dtype) -> "DMTLModel":
        return DMTLModel(self.config, {
            n: Parameter(n, Tensor(p.data.astype(dtype))) for n, p in self.params.items()
        })

    def copy(self) -> "DMTLModel":
        return self.astype(self.dtype)

    def group(self, prefix: str) -> dict[str, Parameter]:
        return {n: p for n, p in self.params.items() if n.startswith(prefix + ".")}

    def forward(self, batch: Tensor, tape: Tape | None = None) -> ForwardOutput:
        return forward(self, batch, tape)

    __call__ = forward


def _stage_names(config: ModelConfig):
    for s in range(config.stages):
        yield s, config.init_filters * 2**s


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> DMTLModel:
    init = Initializer(seed, dtype)
    k = config.kernel
    F = config.init_filters
    if F < blocks.norm_groups(F):
        raise ConfigError("init_filters smaller than the normalisation group count")
    arrays: dict[str, np.ndarray] = {}
    arrays.update(blocks.init_conv(init, "encoder.stem.conv", config.in_channels, F, k))
    for s, c in _stage_names(config):
        for j in range(config.blocks_per_stage):
            arrays.update(blocks.init_resnet_block(
                init, f"encoder.stage{s}.block{j}", ResNetBlockConfig.for_channels(c, k)))
        arrays.update(blocks.init_downsample(init, f"encoder.stage{s}.down", c, k))
    cb = config.bottleneck_channels
    for j in range(config.bottleneck_blocks):
        arrays.update(blocks.init_resnet_block(
            init, f"encoder.bottleneck.block{j}", ResNetBlockConfig.for_channels(cb, k)))
    for s, c in reversed(list(_stage_names(config))):
        arrays.update(blocks.init_upsample(init, f"decoder.stage{s}", 2 * c, k))
    arrays.update(blocks.init_conv(init, "decoder.out.conv", F, 1, 1))
    if config.classification_enabled:
        arrays.update(blocks.init_class_head(
            init, "classifier", ClassHeadConfig(cb, config.class_hidden, config.num_classes)))
    params = {n: Parameter(n, Tensor(a)) for n, a in arrays.items()}
    return DMTLModel(config, params)


def forward(model: DMTLModel, batch: Tensor, tape: Tape | None = None) -> ForwardOutput:
    """Run the network; ops are recorded on ``tape`` when one is given."""
    cfg = model.config
    if batch.ndim != 5 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [N,{cfg.in_channels},D,H,W], got {batch.shape}")
    cfg.check_input_dims(batch.shape[2:])
    if tape is None:
        return _forward(model, batch)
    with tape:
        return _forward(model, batch)


@dataclass
class Stage:
    """One node of the forward graph: ``output = fn(params, *inputs)``.

    ``prefixes`` are the parameter-name prefixes the node owns; ``inputs`` and
    ``output`` are keys into the dict of intermediate activations.
    """

    prefixes: tuple[str, ...]
    inputs: tuple[str, ...]
    output: str
    fn: Callable


def forward_stages(config: ModelConfig) -> list[Stage]:
    """The forward pass as a topologically ordered list of graph nodes.

    Residual blocks are split in two so each node owns one conv; this lets a
    caller recompute only what a parameter change affects.
    """
    k = config.kernel
    nodes: list[Stage] = []

    def add(prefixes, inputs, output, fn):
        nodes.append(Stage(tuple(prefixes), tuple(inputs), output, fn))

    def block(name: str, src: str, channels: int) -> str:
        bc = ResNetBlockConfig.for_channels(channels, k)
        add([f"{name}.norm1.", f"{name}.conv1."], [src], name + ":t",
            lambda p, x, name=name, bc=bc: blocks.resnet_branch(x, blocks.scope(p, name), bc))
        add([f"{name}.norm2.", f"{name}.conv2."], [src, name + ":t"], name,
            lambda p, x, t, name=name, bc=bc: blocks.resnet_merge(x, t, blocks.scope(p, name), bc))
        return name

    add(["encoder.stem."], ["x"], "stem", lambda p, x: ops.conv3d(
        x, p["encoder.stem.conv.weight"], p["encoder.stem.conv.bias"], 1, k // 2))
    h, skips = "stem", []
    for s, c in _stage_names(config):
        for j in range(config.blocks_per_stage):
            h = block(f"encoder.stage{s}.block{j}", h, c)
        skips.append(h)
        name = f"encoder.stage{s}.down"
        add([name + "."], [h], name, lambda p, x, name=name: blocks.downsample_step(x, blocks.scope(p, name)))
        h = name
    for j in range(config.bottleneck_blocks):
        h = block(f"encoder.bottleneck.block{j}", h, config.bottleneck_channels)
    bottleneck = h
    if config.classification_enabled:
        add(["classifier."], [bottleneck], "logits",
            lambda p, b: blocks.class_head(b, blocks.scope(p, "classifier")))
    for s, c in reversed(list(_stage_names(config))):
        name = f"decoder.stage{s}"
        add([name + ".up."], [h, skips[s]], name + ":up",
            lambda p, x, skip, name=name: blocks.upsample_merge(x, skip, blocks.scope(p, name)))
        h = block(name + ".block0", name + ":up", c)
    add(["decoder.out."], [h], "seg", lambda p, x: ops.sigmoid(ops.conv3d(
        x, p["decoder.out.conv.weight"], p["decoder.out.conv.bias"], 1, 0)))
    add([], [bottleneck], "bottleneck", lambda p, b: b)
    return nodes


def run_stages(stages: list[Stage], params: dict, values: dict) -> dict:
    """Evaluate ``stages`` in order, adding each output to ``values``."""
    for st in stages:
        values[st.output] = st.fn(params, *(values[i] for i in st.inputs))
    return values


def output_of(values: dict) -> ForwardOutput:
    return ForwardOutput(values["seg"], values.get("logits"), values["bottleneck"])


def _forward(model: DMTLModel, x: Tensor) -> ForwardOutput:
    return output_of(run_stages(forward_stages(model.config), model.tensors(), {"x": x}))


def count_parameters(model: DMTLModel) -> int:
    return int(sum(p.data.size for p in model.params.values()))


# --- checkpoints ----------------------------------------------------------

MAGIC = b"DMTL0001"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(IOError):
    """A checkpoint file is malformed; the message names the defect."""


def _config_text(config: ModelConfig) -> bytes:
    lines = [f"{k}={int(v) if isinstance(v, bool) else v}" for k, v in config.to_dict().items()]
    return ("\n".join(lines)).encode()


def checkpoint_bytes(model: DMTLModel) -> bytes:
    cfg = _config_text(model.config)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(model: DMTLModel, path) -> None:
    data = checkpoint_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_bytes(buf: bytes) -> DMTLModel:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not a DMTL0001 checkpoint")
    version, cfg_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg_items = dict(line.split("=", 1) for line in r.take(cfg_len, "config").decode().splitlines())
        config = ModelConfig.from_dict(cfg_items)
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    (count,) = r.unpack("<I", "parameter count")
    params: dict[str, Parameter] = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of record {i}")
        name = r.take(nlen, f"name of record {i}").decode("utf-8", errors="replace")
        tag, rank = r.unpack("<BI", f"dtype/rank of {name}")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes, f"values of {name}"), dtype=dt).reshape(dims)
        if name in params:
            raise CheckpointError(f"duplicate parameter {name}")
        params[name] = Parameter(name, Tensor(arr.astype(dt.newbyteorder("="))))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")
    model = DMTLModel(config, params)
    expected = build_model(config, 0, dtype=np.float32)
    if set(expected.params) != set(params) or any(
            expected.params[n].shape != params[n].shape for n in params):
        raise CheckpointError("parameter names or shapes do not match the stored config")
    # restore canonical ordering
    model.params = {n: params[n] for n in expected.params}
    return model


def load_checkpoint(path) -> DMTLModel:
    return model_from_bytes(Path(path).read_bytes())
