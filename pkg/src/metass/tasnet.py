"""Conv-TasNet: learned encoder, TCN mask separator, transposed-conv decoder.

Parameters live in :class:`ModelParams`, a flat mapping from stable path
strings (``encoder.*``, ``separator.*``, ``decoder.*``) to arrays. Every model
function is pure in the parameters, which is what the meta-learning code needs:
adaptation produces a new ``ModelParams`` and never mutates the old one.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor

GROUPS = ("encoder", "separator", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    """Conv-TasNet hyperparameters.

    ``D`` encoder channels, ``L`` encoder kernel, ``bottleneck`` separator
    bottleneck channels, ``H`` block hidden channels, ``P`` depthwise kernel,
    ``X`` blocks per repeat, ``R`` repeats, ``C`` sources.
    """

    C: int = 2
    D: int = 64
    L: int = 16
    stride: int = 8
    bottleneck: int = 32
    H: int = 64
    P: int = 3
    X: int = 4
    R: int = 2
    sample_rate: int = 8000

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("C must be at least 2")
        for name in ("D", "L", "stride", "bottleneck", "H", "P", "X", "R", "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.L % 2 or self.stride != self.L // 2:
            raise ValueError(f"stride must equal L/2 (L={self.L}, stride={self.stride})")

    @classmethod
    def full_size(cls) -> "ModelConfig":
        """Best non-causal Conv-TasNet row (N=512, L=16, B=128, H=512, P=3, X=8, R=3)."""
        return cls(D=512, L=16, stride=8, bottleneck=128, H=512, P=3, X=8, R=3)

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls(D=16, L=16, stride=8, bottleneck=16, H=32, P=3, X=3, R=1)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(D=4, L=4, stride=2, bottleneck=4, H=4, P=3, X=1, R=1)

    def to_dict(self) -> dict:
        return asdict(self)


class Partition(str, enum.Enum):
    """Which parameter groups an adaptation step may touch."""

    WHOLE_MODEL = "m"
    SEPARATOR_ONLY = "a_s"
    AUTOENCODER_ONLY = "a_c"

    @classmethod
    def parse(cls, value: "Partition | str") -> "Partition":
        if isinstance(value, cls):
            return value
        aliases = {
            "whole_model": cls.WHOLE_MODEL,
            "separator_only": cls.SEPARATOR_ONLY,
            "autoencoder_only": cls.AUTOENCODER_ONLY,
        }
        if value in aliases:
            return aliases[value]
        return cls(value)

    @property
    def groups(self) -> frozenset[str]:
        return {
            Partition.WHOLE_MODEL: frozenset(GROUPS),
            Partition.SEPARATOR_ONLY: frozenset({"separator"}),
            Partition.AUTOENCODER_ONLY: frozenset({"encoder", "decoder"}),
        }[self]


def group_of(path: str) -> str:
    group = path.split(".", 1)[0]
    if group not in GROUPS:
        raise KeyError(f"parameter path {path!r} is not in any of {GROUPS}")
    return group


class ModelParams(Mapping[str, "np.ndarray | Tensor"]):
    """Named model tensors plus the config that shaped them.

    Values are plain arrays for stored parameters; :meth:`as_leaves` returns a
    view whose values are :class:`Tensor` objects so a loss can be
    differentiated with respect to a chosen subset.
    """

    def __init__(self, config: ModelConfig | None, tensors: Mapping[str, "np.ndarray | Tensor"]):
        self.config = config
        self._tensors = dict(tensors)
        for path in self._tensors:
            group_of(path)

    def __getitem__(self, path: str):
        return self._tensors[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.num_parameters()} values)"

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else v) for k, v in self._tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(np.size(v.data if isinstance(v, Tensor) else v) for v in self._tensors.values()))

    def group(self, name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays().items() if group_of(k) == name}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        """New params with ``updates`` swapped in; untouched entries share storage."""
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameter paths: {sorted(unknown)}")
        merged = dict(self._tensors)
        merged.update(updates)
        return ModelParams(self.config, merged)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.array(v, copy=True) for k, v in self.arrays().items()})

    def as_leaves(self, trainable: Iterable[str] = ()) -> "ModelParams":
        trainable = set(trainable)
        return ModelParams(
            self.config,
            {k: Tensor(v, requires_grad=k in trainable) for k, v in self.arrays().items()},
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.arrays().values()])

    def unflat(self, vector: np.ndarray) -> "ModelParams":
        out, offset = {}, 0
        for k, v in self.arrays().items():
            out[k] = np.asarray(vector[offset : offset + v.size], dtype=np.float64).reshape(v.shape)
            offset += v.size
        return ModelParams(self.config, out)

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.allclose(a[k], b[k], rtol=0, atol=atol) for k in a)

    def identical(self, other: "ModelParams", paths: Iterable[str] | None = None) -> bool:
        a, b = self.arrays(), other.arrays()
        paths = a.keys() if paths is None else paths
        return all(np.array_equal(a[k], b[k]) for k in paths)


def partition_tensors(params: ModelParams, part: Partition | str) -> dict[str, np.ndarray]:
    groups = Partition.parse(part).groups
    return {k: v for k, v in params.arrays().items() if group_of(k) in groups}


# parameter layout


def _block_prefix(r: int, x: int) -> str:
    return f"separator.blocks.{r}.{x}"


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Path -> shape for every trainable tensor, in a fixed order."""
    D, B, H = cfg.D, cfg.bottleneck, cfg.H
    shapes: dict[str, tuple[int, ...]] = {"encoder.conv.weight": (D, 1, cfg.L)}
    shapes["separator.norm.gain"] = (D,)
    shapes["separator.norm.bias"] = (D,)
    shapes["separator.bottleneck.weight"] = (B, D, 1)
    shapes["separator.bottleneck.bias"] = (B,)
    n_blocks = cfg.R * cfg.X
    for r in range(cfg.R):
        for x in range(cfg.X):
            p = _block_prefix(r, x)
            shapes[f"{p}.in_conv.weight"] = (H, B, 1)
            shapes[f"{p}.in_conv.bias"] = (H,)
            shapes[f"{p}.prelu1.slope"] = (H,)
            shapes[f"{p}.norm1.gain"] = (H,)
            shapes[f"{p}.norm1.bias"] = (H,)
            shapes[f"{p}.dconv.weight"] = (H, 1, cfg.P)
            shapes[f"{p}.dconv.bias"] = (H,)
            shapes[f"{p}.prelu2.slope"] = (H,)
            shapes[f"{p}.norm2.gain"] = (H,)
            shapes[f"{p}.norm2.bias"] = (H,)
            # the last block feeds only the skip path
            if r * cfg.X + x < n_blocks - 1:
                shapes[f"{p}.res_conv.weight"] = (B, H, 1)
                shapes[f"{p}.res_conv.bias"] = (B,)
            shapes[f"{p}.skip_conv.weight"] = (B, H, 1)
            shapes[f"{p}.skip_conv.bias"] = (B,)
    shapes["separator.out_prelu.slope"] = (B,)
    shapes["separator.mask_conv.weight"] = (cfg.C * D, B, 1)
    shapes["separator.mask_conv.bias"] = (cfg.C * D,)
    shapes["decoder.conv.weight"] = (D, 1, cfg.L)
    return shapes


def _fan_in(path: str, shapes: Mapping[str, tuple[int, ...]]) -> int:
    weight = path.rsplit(".", 1)[0] + ".weight"
    shape = shapes[weight]
    if path.startswith("decoder."):
        # transposed conv: each output sample sums over in-channels x taps
        return shape[0] * shape[2]
    return shape[1] * shape[2]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-k, k), k = 1/sqrt(fan_in) for conv weights and biases; gLN gain 1 / bias 0; PReLU 0.25."""
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(cfg)
    tensors = {}
    for path, shape in shapes.items():
        leaf = path.rsplit(".", 1)[1]
        if leaf == "gain":
            tensors[path] = np.ones(shape)
        elif ".norm" in path and leaf == "bias":
            tensors[path] = np.zeros(shape)
        elif leaf == "slope":
            tensors[path] = np.full(shape, 0.25)
        else:
            k = 1.0 / math.sqrt(_fan_in(path, shapes))
            tensors[path] = rng.uniform(-k, k, size=shape)
    return ModelParams(cfg, tensors)


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(cfg).values()))


# forward pieces


def _t(params: ModelParams, path: str) -> Tensor:
    return ag.as_tensor(params[path])


def _pointwise(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    y = ag.conv1d(x, _t(params, f"{prefix}.weight"))
    return y + _t(params, f"{prefix}.bias").reshape(-1, 1)


def _require_config(params: ModelParams) -> ModelConfig:
    if params.config is None:
        raise ValueError("these params carry no ModelConfig")
    return params.config


def encode(params: ModelParams, mixture) -> Tensor:
    """Mixture ``(T,)`` or ``(N, T)`` -> nonnegative features ``(D, T')`` or ``(N, D, T')``."""
    cfg = _require_config(params)
    x = ag.as_tensor(mixture.samples if hasattr(mixture, "samples") else mixture)
    if x.shape[-1] < cfg.L:
        raise ag.ShapeError(
            f"mixture has {x.shape[-1]} samples; the encoder needs at least L={cfg.L}"
        )
    x = x.reshape(x.shape[:-1] + (1, x.shape[-1]))
    w = ag.conv1d(x, _t(params, "encoder.conv.weight"), stride=cfg.stride)
    return ag.relu(w)


def _tcn_block(params: ModelParams, cfg: ModelConfig, r: int, x: int, feats: Tensor):
    p = _block_prefix(r, x)
    y = _pointwise(params, f"{p}.in_conv", feats)
    y = ag.prelu(y, _t(params, f"{p}.prelu1.slope"))
    y = ag.global_layer_norm(y, _t(params, f"{p}.norm1.gain"), _t(params, f"{p}.norm1.bias"))
    dilation = 2**x
    total = (cfg.P - 1) * dilation
    y = ag.pad_last(y, total // 2, total - total // 2)
    y = ag.conv1d(y, _t(params, f"{p}.dconv.weight"), dilation=dilation, groups=cfg.H)
    y = y + _t(params, f"{p}.dconv.bias").reshape(-1, 1)
    y = ag.prelu(y, _t(params, f"{p}.prelu2.slope"))
    y = ag.global_layer_norm(y, _t(params, f"{p}.norm2.gain"), _t(params, f"{p}.norm2.bias"))
    residual = _pointwise(params, f"{p}.res_conv", y) if f"{p}.res_conv.weight" in params else None
    skip = _pointwise(params, f"{p}.skip_conv", y)
    return residual, skip


def separate(params: ModelParams, h) -> Tensor:
    """Features ``(..., D, T')`` -> masks ``(..., C, D, T')`` in [0, 1]."""
    cfg = _require_config(params)
    h = ag.as_tensor(h)
    y = ag.global_layer_norm(h, _t(params, "separator.norm.gain"), _t(params, "separator.norm.bias"))
    y = _pointwise(params, "separator.bottleneck", y)
    skip_sum = None
    for r in range(cfg.R):
        for x in range(cfg.X):
            residual, skip = _tcn_block(params, cfg, r, x, y)
            if residual is not None:
                y = y + residual
            skip_sum = skip if skip_sum is None else skip_sum + skip
    y = ag.prelu(skip_sum, _t(params, "separator.out_prelu.slope"))
    y = _pointwise(params, "separator.mask_conv", y)
    y = y.reshape(y.shape[:-2] + (cfg.C, cfg.D, y.shape[-1]))
    return ag.sigmoid(y)


def apply_mask(h, mask) -> Tensor:
    h, mask = ag.as_tensor(h), ag.as_tensor(mask)
    if h.shape != mask.shape and h.shape != mask.shape[:-3] + mask.shape[-2:]:
        raise ag.ShapeError(f"feature shape {h.shape} does not match mask shape {mask.shape}")
    if h.shape != mask.shape:
        # (..., D, T') features against (..., C, D, T') masks
        h = h.reshape(h.shape[:-2] + (1,) + h.shape[-2:])
    return h * mask


def decode(params: ModelParams, d) -> Tensor:
    """Masked features ``(..., D, T')`` -> waveforms ``(..., T)`` with T = (T'-1)*stride + L."""
    cfg = _require_config(params)
    d = ag.as_tensor(d)
    lead = d.shape[:-2]
    flat = d.reshape((-1,) + d.shape[-2:]) if len(lead) != 1 else d
    y = ag.conv1d_transpose(flat, _t(params, "decoder.conv.weight"), stride=cfg.stride)
    return y.reshape(lead + (y.shape[-1],))


def padded_length(cfg: ModelConfig, length: int) -> int:
    """Smallest length >= ``length`` that the encoder/decoder pair reproduces exactly."""
    if length <= cfg.L:
        return cfg.L
    frames = math.ceil((length - cfg.L) / cfg.stride)
    return cfg.L + frames * cfg.stride


def forward(params: ModelParams, mixture) -> Tensor:
    """Separate ``(T,)`` or ``(N, T)`` mixtures into ``(C, T)`` or ``(N, C, T)`` estimates."""
    cfg = _require_config(params)
    x = ag.as_tensor(mixture.samples if hasattr(mixture, "samples") else mixture)
    length = x.shape[-1]
    if length < cfg.L:
        raise ag.ShapeError(f"mixture has {length} samples; the encoder needs at least L={cfg.L}")
    target = padded_length(cfg, length)
    if target != length:
        x = ag.pad_last(x, 0, target - length)
    h = encode(params, x)
    masks = separate(params, h)
    est = decode(params, apply_mask(h, masks))
    return ag.crop_last(est, length) if est.shape[-1] != length else est


# checkpoint file

_MAGIC = b"MSTN"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str | Path, metadata: Mapping | None = None) -> None:
    """Binary container: magic, version, JSON header, then (path, shape, <f8 data) records."""
    header = {
        "config": params.config.to_dict() if params.config else None,
        "metadata": dict(metadata or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    arrays = params.arrays()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = math.prod(shape)
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    config = ModelConfig(**header["config"]) if header["config"] else None
    return ModelParams(config, tensors), header.get("metadata", {})
