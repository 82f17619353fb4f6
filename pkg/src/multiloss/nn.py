"""Layers, layer stacks, reference architectures and parameter files."""

from __future__ import annotations

import copy
import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import substream


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    MC_DROPOUT = "mc-dropout"


def _mode(mode) -> Mode:
    return mode if isinstance(mode, Mode) else Mode(mode)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def forward(self, x: Tensor, mode: Mode, rng: Optional[np.random.Generator]) -> Tensor:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def out_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return in_shape

    def clone(self) -> "Layer":
        return copy.deepcopy(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "W": Tensor(np.zeros((in_features, out_features)), requires_grad=True),
            "b": Tensor(np.zeros(out_features), requires_grad=True),
        }

    def init_params(self, rng):
        self.params["W"].data[...] = he_uniform(rng, (self.in_features, self.out_features), self.in_features)
        self.params["b"].data[...] = 0.0

    def forward(self, x, mode, rng):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("dense", x.shape, self.params["W"].shape)
        return x @ self.params["W"] + self.params["b"]

    def out_shape(self, in_shape):
        return (self.out_features,)

    def __repr__(self):
        return f"Dense({self.in_features}->{self.out_features})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, padding: Union[int, str] = "same"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding
        self.params = {
            "W": Tensor(np.zeros((out_channels, in_channels, kernel, kernel)), requires_grad=True),
            "b": Tensor(np.zeros(out_channels), requires_grad=True),
        }

    def init_params(self, rng):
        shape = self.params["W"].shape
        self.params["W"].data[...] = he_uniform(rng, shape, self.in_channels * self.kernel * self.kernel)
        self.params["b"].data[...] = 0.0

    def forward(self, x, mode, rng):
        return ad.conv2d(x, self.params["W"], self.params["b"], padding=self.padding)

    def out_shape(self, in_shape):
        _, h, w = in_shape
        pad = self.kernel // 2 if self.padding == "same" else int(self.padding)
        return (self.out_channels, h + 2 * pad - self.kernel + 1, w + 2 * pad - self.kernel + 1)

    def __repr__(self):
        return f"Conv2D({self.in_channels}->{self.out_channels}, k={self.kernel})"


class MaxPool2D(Layer):
    kind = "maxpool"

    def forward(self, x, mode, rng):
        return ad.maxpool2d(x)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode, rng):
        return ad.relu(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode, rng):
        if x.ndim == 2:
            return x
        return x.reshape(x.shape[0], -1)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by 1/(1-p) while sampling."""

    kind = "dropout"

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)

    def forward(self, x, mode, rng):
        if self.p == 0.0 or mode is Mode.EVAL:
            return x
        if rng is None:
            raise ValueError(f"dropout in {mode.value} mode needs an rng")
        keep = rng.random(x.shape) >= self.p
        return x * (keep / (1.0 - self.p))

    def __repr__(self):
        return f"Dropout(p={self.p})"


class LayerStack:
    """An ordered run of layers; ``offset`` is the position of the first layer
    inside the full reference architecture (it keys the per-layer init stream)."""

    def __init__(self, layers: Sequence[Layer], offset: int = 0, mode: Mode = Mode.EVAL):
        self.layers = list(layers)
        self.offset = offset
        self.mode = _mode(mode)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"LayerStack(offset={self.offset}, {self.layers})"

    def init_params(self, seed: int) -> None:
        """He-uniform weights and zero biases; layer k draws from stream (seed, offset + k)."""
        for k, layer in enumerate(self.layers):
            layer.init_params(substream(seed, "init", self.offset + k))

    def forward(self, x: Tensor, mode=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        mode = self.mode if mode is None else _mode(mode)
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    __call__ = forward

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for k, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out.append((f"{self.offset + k}.{layer.kind}.{name}", p))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def has_dropout(self) -> bool:
        return any(isinstance(layer, Dropout) for layer in self.layers)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError("load_state_dict", p.shape, value.shape, detail=name)
            p.data[...] = value

    def clone(self) -> "LayerStack":
        return LayerStack([layer.clone() for layer in self.layers], self.offset, self.mode)


# -- reference architectures ----------------------------------------------

ARCHITECTURES = ("small-mlp", "small-cnn")


@dataclass
class Architecture:
    """A full single-network layer list plus its block boundaries.

    ``block_starts`` are the layer indices where each block begins; the last
    layer (``head_index``) is the output stub and always belongs to a head.
    """

    name: str
    layers: List[Layer]
    block_starts: List[int]

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    def resolve_split(self, split: Union[int, str]) -> int:
        """Map a split spec (layer index or preset name) to the first head layer index."""
        if isinstance(split, str):
            presets = {
                "last_block": self.block_starts[-1],
                "head_only": self.head_index,
                "no_trunk": 0,
            }
            if split.lstrip("-").isdigit():
                split = int(split)
            elif split in presets:
                return presets[split]
            else:
                raise ValueError(f"unknown split preset {split!r} (expected one of {sorted(presets)} or an index)")
        if isinstance(split, bool) or not isinstance(split, (int, np.integer)):
            raise ValueError(f"split must be an int or preset name, got {split!r}")
        if not 0 <= split <= self.head_index:
            raise ValueError(f"split index {split} out of range [0, {self.head_index}] for {self.name}")
        return int(split)


def reference_architecture(name: str, input_shape: Sequence[int], out_width: int, dropout_p: float = 0.0) -> Architecture:
    """Desk-scale stand-ins for the large vision backbones.

    small-mlp: flatten | dense 128, relu, dropout | dense 64, relu, dropout | dense out
    small-cnn: conv3x3x16, relu, dropout, pool | conv3x3x32, relu, dropout, pool |
               flatten, dense 64, relu, dropout | dense out
    """
    input_shape = tuple(int(s) for s in input_shape)
    if name == "small-mlp":
        d = int(np.prod(input_shape))
        layers = [
            Flatten(),
            Dense(d, 128), ReLU(), Dropout(dropout_p),
            Dense(128, 64), ReLU(), Dropout(dropout_p),
            Dense(64, out_width),
        ]
        return Architecture(name, layers, [1, 4])
    if name == "small-cnn":
        if len(input_shape) != 3:
            raise ShapeError("small-cnn", input_shape, detail="expects (channels, height, width) input")
        c, h, w = input_shape
        if h < 4 or w < 4:
            raise ShapeError("small-cnn", input_shape, detail="images must be at least 4x4")
        layers = [
            Conv2D(c, 16), ReLU(), Dropout(dropout_p), MaxPool2D(),
            Conv2D(16, 32), ReLU(), Dropout(dropout_p), MaxPool2D(),
            Flatten(), Dense(32 * (h // 4) * (w // 4), 64), ReLU(), Dropout(dropout_p),
            Dense(64, out_width),
        ]
        return Architecture(name, layers, [0, 4, 8])
    raise ValueError(f"unknown architecture {name!r} (expected one of {ARCHITECTURES})")


# -- parameter files ------------------------------------------------------

PARAM_MAGIC = b"SELB"
PARAM_VERSION = 1


class ParamFormatError(ValueError):
    pass


def save_params(path: Union[str, Path], params: Dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: header, then (name, rank, dims, payload) records."""
    chunks = [PARAM_MAGIC, struct.pack("<I", PARAM_VERSION)]
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAM_MAGIC:
        raise ParamFormatError(f"{path}: bad magic {raw[:4]!r}, expected {PARAM_MAGIC!r}")
    if len(raw) < 8:
        raise ParamFormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != PARAM_VERSION:
        raise ParamFormatError(f"{path}: unsupported version {version}")
    pos = 8
    out: Dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims))
            end = pos + 8 * count
            if end > len(raw):
                raise ParamFormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise ParamFormatError(f"{path}: truncated record ({exc})") from None
    return out
