"""Non-causal Wavenet for raw-waveform speech denoising.

Layout: a 3-tap input projection, a stack of gated residual layers with
dilated *valid* convolutions, summed skip outputs, two 3-tap final layers and
a 1x1 output projection. Only the dilated stack counts towards the receptive
field, so a fragment of ``rf + tf - 1`` samples yields ``tf`` outputs.

The three outer 3-tap convolutions are same-padded, which makes outputs at
fragment edges depend on that padding. :func:`denoise` therefore feeds every
window a few extra samples of context (:func:`edge_margins`) and discards the
edge outputs; that is what makes batched and one-shot denoising agree bit for
bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import ConvParams, Tensor, conv1d, gated_unit, no_grad, padding_amounts, project
from .dsp import AudioBuffer

CHECKPOINT_MAGIC = b"WDNZ"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stacks: int = 3
    dilations_per_stack: tuple = tuple(2 ** i for i in range(10))
    residual_channels: int = 128
    skip_channels: int = 128
    filter_len: int = 3
    final_channels: tuple = (2048, 256)
    final_filter_len: int = 3
    target_field: int = 1601
    condition_bits: int = 5
    causal: bool = False  # ablation: causal outer convs and end-aligned targets

    def __post_init__(self):
        object.__setattr__(self, "dilations_per_stack", tuple(int(d) for d in self.dilations_per_stack))
        object.__setattr__(self, "final_channels", tuple(int(c) for c in self.final_channels))
        self.validate()

    def validate(self) -> None:
        counts = (self.stacks, self.residual_channels, self.skip_channels, self.filter_len,
                  self.final_filter_len, self.target_field, self.condition_bits)
        if any(int(c) < 1 for c in counts):
            raise ValueError("all counts in ModelConfig must be positive")
        if self.filter_len % 2 == 0 or self.final_filter_len % 2 == 0:
            raise ValueError("filter lengths must be odd")
        if len(self.final_channels) != 2 or min(self.final_channels) < 1:
            raise ValueError("final_channels must be a pair of positive integers")
        d = self.dilations_per_stack
        if not d:
            raise ValueError("dilations_per_stack must not be empty")
        if any(x < 1 or x & (x - 1) for x in d):
            raise ValueError("dilations must be positive powers of two")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("dilations must be ascending within a stack")

    @property
    def dilations(self) -> list[int]:
        return list(self.dilations_per_stack) * self.stacks

    @property
    def num_layers(self) -> int:
        return self.stacks * len(self.dilations_per_stack)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations_per_stack"] = list(self.dilations_per_stack)
        d["final_channels"] = list(self.final_channels)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **changes})


@dataclass(frozen=True)
class ConditionCode:
    """Speaker id and its unsigned binary encoding (most significant bit first)."""

    speaker_id: int = 0
    nbits: int = 5
    bits: tuple = field(init=False)

    def __post_init__(self):
        if not 0 <= self.speaker_id < 2 ** self.nbits:
            raise ValueError(f"speaker id {self.speaker_id} does not fit in {self.nbits} bits")
        bits = tuple((self.speaker_id >> (self.nbits - 1 - i)) & 1 for i in range(self.nbits))
        object.__setattr__(self, "bits", bits)


def receptive_field(config: ModelConfig) -> int:
    """Input samples seen by one output sample through the dilated stack."""
    return 1 + (config.filter_len - 1) * sum(config.dilations)


def input_length(config: ModelConfig, tf: int | None = None) -> int:
    tf = config.target_field if tf is None else tf
    if tf < 1:
        raise ValueError("target field must be at least 1")
    return receptive_field(config) + tf - 1


def target_offset(config: ModelConfig) -> int:
    """Index inside a fragment of the input sample aligned with output 0."""
    rf = receptive_field(config)
    return rf - 1 if config.causal else (rf - 1) // 2


def edge_margins(config: ModelConfig) -> tuple[int, int]:
    """Outputs at each fragment edge that are affected by outer-conv padding."""
    mode = "same_causal" if config.causal else "same_symmetric"
    left = right = 0
    for taps in (config.filter_len, config.final_filter_len, config.final_filter_len):
        lpad, rpad = padding_amounts(taps, 1, mode)
        left += lpad
        right += rpad
    return left, right


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Parameter names and shapes in checkpoint order."""
    r, s, k = config.residual_channels, config.skip_channels, config.filter_len
    fa, fb = config.final_channels
    kf = config.final_filter_len
    shapes: dict[str, tuple] = {"input.weight": (r, 1, k), "input.bias": (r,)}
    for n in range(config.num_layers):
        p = f"layers.{n}"
        shapes.update({
            f"{p}.filter.weight": (r, r, k), f"{p}.filter.bias": (r,),
            f"{p}.gate.weight": (r, r, k), f"{p}.gate.bias": (r,),
            f"{p}.residual.weight": (r, r, 1), f"{p}.residual.bias": (r,),
            f"{p}.skip.weight": (s, r, 1), f"{p}.skip.bias": (s,),
            f"{p}.cond_filter": (r, config.condition_bits),
            f"{p}.cond_gate": (r, config.condition_bits),
        })
    shapes.update({
        "final_a.weight": (fa, s, kf), "final_a.bias": (fa,),
        "final_b.weight": (fb, fa, kf), "final_b.bias": (fb,),
        "output.weight": (1, fb, 1), "output.bias": (1,),
    })
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(math.prod(shape) for shape in param_shapes(config).values())


@dataclass
class WavenetModel:
    config: ModelConfig
    params: dict[str, Tensor]

    def conv(self, name: str) -> ConvParams:
        return ConvParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def copy(self, dtype=None) -> "WavenetModel":
        dtype = dtype or next(iter(self.params.values())).dtype
        params = {n: Tensor(p.data.astype(dtype, copy=True), requires_grad=True)
                  for n, p in self.params.items()}
        return WavenetModel(self.config, params)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.config)


def build_model(config: ModelConfig, seed: int = 0) -> WavenetModel:
    """Allocate all parameters, drawn in checkpoint order from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            weight_shape = params[name[:-5] + ".weight"].shape
            fan_in = weight_shape[1] * weight_shape[2]
        elif name.endswith(".weight"):
            fan_in = shape[1] * shape[2]
        else:  # condition projection
            fan_in = shape[1]
        bound = math.sqrt(1.0 / fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return WavenetModel(config, params)


def param_count(model: WavenetModel | ConvParams) -> int:
    if isinstance(model, ConvParams):
        return model.weight.data.size + model.bias.data.size
    return sum(p.data.size for p in model.params.values())


def _condition_bits(condition, batch: int, nbits: int) -> np.ndarray:
    if condition is None:
        condition = 0
    if isinstance(condition, (int, np.integer, ConditionCode)):
        condition = [condition] * batch
    codes = [c if isinstance(c, ConditionCode) else ConditionCode(int(c), nbits) for c in condition]
    if len(codes) != batch:
        raise ValueError(f"got {len(codes)} condition codes for a batch of {batch}")
    if any(c.nbits != nbits for c in codes):
        raise ValueError(f"condition codes must have {nbits} bits")
    return np.array([c.bits for c in codes], dtype=np.float64)


def _crop(t: Tensor, length: int, causal: bool) -> Tensor:
    extra = t.shape[-1] - length
    start = extra if causal else extra // 2
    return t.crop(start, start + length)


def forward(model: WavenetModel, fragment, condition=None) -> Tensor:
    """Predict the target field of ``fragment``.

    ``fragment`` is ``[L]``, ``[1, L]`` or ``[batch, 1, L]``; the result has the
    same leading shape with time length ``L - rf + 1``. ``condition`` is a
    speaker id, a :class:`ConditionCode`, or one of those per batch entry.
    """
    cfg = model.config
    if isinstance(fragment, Tensor):
        x = fragment
    else:
        arr = np.asarray(fragment, dtype=np.float64)
        x = Tensor(arr[None, :] if arr.ndim == 1 else arr)
    if x.data.ndim not in (2, 3) or x.shape[-2] != 1:
        raise ValueError(f"fragment must be [L], [1, L] or [batch, 1, L], got {x.shape}")
    rf = receptive_field(cfg)
    length = x.shape[-1]
    if length < rf:
        raise ValueError(f"fragment length {length} is shorter than the receptive field {rf}")
    batch = x.shape[0] if x.data.ndim == 3 else 1
    bits = _condition_bits(condition, batch, cfg.condition_bits)
    if x.data.ndim == 2:
        bits = bits[0]
    dtype = model.params["input.weight"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    bits = bits.astype(dtype)

    outer = "same_causal" if cfg.causal else "same_symmetric"
    p = model.params
    out_len = length - rf + 1
    h = conv1d(x, model.conv("input"), 1, outer)
    skips = None
    for n, dilation in enumerate(cfg.dilations):
        name = f"layers.{n}"
        z = gated_unit(h, model.conv(f"{name}.filter"), model.conv(f"{name}.gate"), dilation, "valid",
                       project(p[f"{name}.cond_filter"], bits), project(p[f"{name}.cond_gate"], bits))
        r = conv1d(z, model.conv(f"{name}.residual"))
        s = _crop(conv1d(r, model.conv(f"{name}.skip")), out_len, cfg.causal)
        skips = s if skips is None else skips + s
        h = _crop(h, z.shape[-1], cfg.causal) + r
    y = skips.relu()
    y = conv1d(y, model.conv("final_a"), 1, outer).relu()
    y = conv1d(y, model.conv("final_b"), 1, outer)
    return conv1d(y, model.conv("output"))


def denoise(model: WavenetModel, noisy: AudioBuffer, condition=0, mode: str = "batched",
            windows_per_batch: int = 16, dtype=None) -> AudioBuffer:
    """Denoise a whole recording; output is aligned 1:1 with the input.

    ``batched`` slides target-field windows over the zero-padded signal;
    ``one_shot`` runs a single forward pass. Both give identical samples.
    ``dtype=np.float32`` runs inference in single precision.
    """
    mode = mode.replace("-", "_")
    if mode not in ("batched", "one_shot"):
        raise ValueError(f"unknown denoise mode {mode!r}")
    if dtype is not None and np.dtype(dtype) != model.params["input.weight"].dtype:
        model = model.copy(dtype)
    cfg = model.config
    x = noisy.samples
    n = x.shape[0]
    if n < 1:
        raise ValueError("cannot denoise an empty buffer")
    rf = receptive_field(cfg)
    ctx_left = target_offset(cfg)
    ctx_right = rf - 1 - ctx_left
    margin_left, margin_right = edge_margins(cfg)
    pad_left = ctx_left + margin_left
    pad_right = ctx_right + margin_right
    fdtype = model.params["input.weight"].dtype

    with no_grad():
        if mode == "one_shot":
            padded = np.concatenate([np.zeros(pad_left), x, np.zeros(pad_right)]).astype(fdtype)
            y = forward(model, padded[None, None, :], condition).data[0, 0]
            out = y[margin_left:margin_left + n]
        else:
            tf = cfg.target_field
            windows = -(-n // tf)
            span = tf + rf - 1 + margin_left + margin_right
            total = (windows - 1) * tf + span
            padded = np.zeros(total, dtype=fdtype)
            padded[pad_left:pad_left + n] = x
            pieces = []
            for first in range(0, windows, windows_per_batch):
                idx = range(first, min(first + windows_per_batch, windows))
                batch = np.stack([padded[w * tf:w * tf + span] for w in idx])[:, None, :]
                y = forward(model, batch, [condition] * len(idx)).data[:, 0]
                pieces.append(y[:, margin_left:margin_left + tf].reshape(-1))
            out = np.concatenate(pieces)[:n]
    return AudioBuffer(out.astype(np.float64), noisy.sample_rate)


# -- checkpoints ------------------------------------------------------------

def _canonical_config(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: WavenetModel, path) -> Path:
    """Write ``model`` in the WDNZ format.

    Layout (little-endian): magic ``WDNZ``, u32 version, u32 length + canonical
    JSON config, then for every parameter in :func:`param_shapes` order:
    u32 length + UTF-8 name, u32 rank, u32 dims, float64 data.
    """
    path = Path(path)
    cfg = _canonical_config(model.config)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    for name, shape in param_shapes(model.config).items():
        data = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        if data.shape != shape:
            raise CheckpointError(f"parameter {name} has shape {data.shape}, expected {shape}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(data.tobytes())
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> WavenetModel:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(reader.u32()).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad config block ({exc})") from exc
    params = {}
    for name, shape in param_shapes(config).items():
        stored = reader.take(reader.u32()).decode("utf-8", errors="replace")
        rank = reader.u32()
        dims = tuple(reader.u32() for _ in range(rank))
        if stored != name or dims != shape:
            raise CheckpointError(
                f"checkpoint config mismatch: expected {name}{shape}, found {stored}{dims}")
        raw = reader.take(8 * math.prod(dims))
        params[name] = Tensor(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims),
                              requires_grad=True)
    if reader.pos != len(reader.data):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return WavenetModel(config, params)
