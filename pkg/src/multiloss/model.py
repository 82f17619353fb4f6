"""Shared-trunk, M-head classifier and its averaged predictions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossKind, as_loss, head_probs
from .nn import LayerStack, Mode, load_params, reference_architecture, save_params


@dataclass
class PredictionSet:
    """Per-head probability rows and their mean.

    ``per_head`` has shape (M, C) for one input or (N, M, C) for a batch.
    """

    per_head: np.ndarray
    averaged: np.ndarray = field(init=False)

    def __post_init__(self):
        self.per_head = np.asarray(self.per_head, dtype=np.float64)
        if self.per_head.ndim < 2 or self.per_head.shape[-2] == 0:
            raise ValueError(f"per_head must be (..., M, C) with M >= 1, got {self.per_head.shape}")
        self.averaged = self.per_head.mean(axis=-2)

    @property
    def num_heads(self) -> int:
        return self.per_head.shape[-2]

    @property
    def num_classes(self) -> int:
        return self.per_head.shape[-1]

    def __getitem__(self, index) -> "PredictionSet":
        if self.per_head.ndim != 3:
            raise IndexError("indexing requires a batched PredictionSet")
        return PredictionSet(self.per_head[index])


@dataclass
class ModelSpec:
    """Everything needed to build a MultiHeadModel except its seed."""

    arch: str
    input_shape: Tuple[int, ...]
    num_classes: int
    losses: List[LossKind]
    split: Union[int, str] = "last_block"
    dropout_p: float = 0.0

    def build(self, seed: int) -> "MultiHeadModel":
        return build(self.arch, self.split, self.num_classes, self.losses, seed,
                     input_shape=self.input_shape, dropout_p=self.dropout_p)


class MultiHeadModel:
    def __init__(
        self,
        arch: str,
        input_shape: Sequence[int],
        num_classes: int,
        losses: Sequence[Union[str, LossKind]],
        split: Union[int, str] = "last_block",
        dropout_p: float = 0.0,
    ):
        if not losses:
            raise ValueError("at least one loss (one head) is required")
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.arch = arch
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.losses = [as_loss(l) for l in losses]
        self.split_spec = split
        self.dropout_p = float(dropout_p)

        base = reference_architecture(arch, self.input_shape, num_classes, dropout_p)
        self.split_index = base.resolve_split(split)
        self.trunk = LayerStack(base.layers[: self.split_index], offset=0)
        self.heads: List[LayerStack] = []
        for loss in self.losses:
            full = reference_architecture(arch, self.input_shape, loss.head_width(num_classes), dropout_p)
            self.heads.append(LayerStack(full.layers[self.split_index:], offset=self.split_index))

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def init_params(self, seed: int) -> None:
        """Trunk from ``seed``; head j from ``seed + j`` so clones never coincide."""
        self.trunk.init_params(seed)
        for j, head in enumerate(self.heads):
            head.init_params(seed + j)

    # -- forward ----------------------------------------------------------
    def features(self, x, mode=Mode.EVAL, rng=None) -> Tensor:
        return self.trunk.forward(ad.as_tensor(x), mode, rng)

    def head_outputs(self, x, mode=Mode.EVAL, rng=None, heads: Optional[Sequence[int]] = None) -> List[Tensor]:
        feats = self.features(x, mode, rng)
        idx = range(self.num_heads) if heads is None else heads
        return [self.heads[j].forward(feats, mode, rng) for j in idx]

    def predict(self, x, mode=Mode.EVAL, rng=None, batch_size: int = 1024) -> PredictionSet:
        """Per-head simplex rows for a batch of inputs, shape (N, M, C)."""
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        chunks = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                raws = self.head_outputs(x[start:start + batch_size], mode, rng)
                rows = [head_probs(loss, raw, self.num_classes).data for loss, raw in zip(self.losses, raws)]
                chunks.append(np.stack(rows, axis=1))
        return PredictionSet(np.concatenate(chunks, axis=0))

    # -- parameters -------------------------------------------------------
    def trunk_parameters(self) -> List[Tensor]:
        return self.trunk.parameters()

    def head_parameters(self, j: int) -> List[Tensor]:
        return self.heads[j].parameters()

    def parameters(self) -> List[Tensor]:
        out = self.trunk.parameters()
        for head in self.heads:
            out.extend(head.parameters())
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"trunk/{k}": v for k, v in self.trunk.state_dict().items()}
        for j, head in enumerate(self.heads):
            state.update({f"head{j}/{k}": v for k, v in head.state_dict().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.trunk.load_state_dict({k[len("trunk/"):]: v for k, v in state.items() if k.startswith("trunk/")})
        for j, head in enumerate(self.heads):
            prefix = f"head{j}/"
            head.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def config(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "split": self.split_spec,
            "split_index": self.split_index,
            "num_classes": self.num_classes,
            "M": self.num_heads,
            "losses": [l.kind for l in self.losses],
            "anneal_epochs": [l.anneal_epochs for l in self.losses],
            "det_floor": [l.det_floor for l in self.losses],
            "dropout_p": self.dropout_p,
        }

    def clone(self) -> "MultiHeadModel":
        other = MultiHeadModel(self.arch, self.input_shape, self.num_classes, self.losses,
                               self.split_spec, self.dropout_p)
        other.load_state_dict(self.state_dict())
        return other

    # -- checkpoints ------------------------------------------------------
    def save(self, path: Union[str, Path]) -> None:
        """Write ``path`` (binary parameters) and ``path`` + ``.json`` (structure)."""
        path = Path(path)
        save_params(path, self.state_dict())
        Path(str(path) + ".json").write_text(json.dumps(self.config(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MultiHeadModel":
        path = Path(path)
        cfg = json.loads(Path(str(path) + ".json").read_text())
        losses = [
            LossKind(k, anneal_epochs=a, det_floor=f)
            for k, a, f in zip(cfg["losses"], cfg["anneal_epochs"], cfg["det_floor"])
        ]
        model = cls(cfg["arch"], cfg["input_shape"], cfg["num_classes"], losses, cfg["split"], cfg["dropout_p"])
        model.load_state_dict(load_params(path))
        return model


def build(
    arch: str,
    split: Union[int, str],
    num_classes: int,
    losses: Sequence[Union[str, LossKind]],
    seed: int,
    input_shape: Sequence[int],
    dropout_p: float = 0.0,
) -> MultiHeadModel:
    model = MultiHeadModel(arch, input_shape, num_classes, losses, split, dropout_p)
    model.init_params(seed)
    return model
