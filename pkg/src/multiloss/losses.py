"""Per-head loss functions and their output-to-probability mappings.

Each head of a multi-loss model is paired with one ``LossKind``. The loss owns
two things: the training objective on the head's raw outputs, and the mapping
from raw outputs to a point on the class simplex used at inference.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_NAMES = ("softmax", "relaxed_softmax", "evidential", "ldmi", "mse", "mae")

_ALIASES = {
    "softmax-ce": "softmax",
    "softmax_ce": "softmax",
    "ce": "softmax",
    "relaxed-softmax": "relaxed_softmax",
    "relaxed": "relaxed_softmax",
    "l-dmi": "ldmi",
    "l_dmi": "ldmi",
}

RELAXED_ALPHA_FLOOR = 1e-6


class LossError(ValueError):
    pass


class DeterminantFloorWarning(RuntimeWarning):
    """The L-DMI joint matrix was (near-)singular and its determinant was clamped."""


@dataclass(frozen=True)
class LossKind:
    """A loss identity plus its hyperparameters.

    ``anneal_epochs`` is the length of the linear KL ramp of the evidential
    loss; ``det_floor`` clamps |det Q| for L-DMI.
    """

    kind: str
    anneal_epochs: int = 10
    det_floor: float = 1e-8

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in LOSS_NAMES:
            raise LossError(f"unknown loss {self.kind!r}; expected one of {LOSS_NAMES}")
        object.__setattr__(self, "kind", kind)
        if self.anneal_epochs < 1:
            raise LossError("anneal_epochs must be >= 1")
        if not self.det_floor > 0:
            raise LossError("det_floor must be positive")

    @property
    def extra_outputs(self) -> int:
        return 1 if self.kind == "relaxed_softmax" else 0

    def head_width(self, num_classes: int) -> int:
        return num_classes + self.extra_outputs


def as_loss(spec: Union[str, LossKind]) -> LossKind:
    return spec if isinstance(spec, LossKind) else LossKind(spec)


@dataclass(frozen=True)
class BatchLabels:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise LossError(f"labels must be a vector, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LossError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self):
        return len(self.labels)

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.num_classes))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out


def _check_width(kind: LossKind, raw: Tensor, num_classes: int) -> None:
    want = kind.head_width(num_classes)
    if raw.ndim != 2 or raw.shape[1] != want:
        raise LossError(
            f"{kind.kind} head expects raw outputs of width {want} for {num_classes} classes, got shape {raw.shape}"
        )


def _relaxed_logits(raw: Tensor, num_classes: int) -> Tensor:
    z = raw[:, :num_classes]
    alpha = ad.softplus(raw[:, num_classes:]) + RELAXED_ALPHA_FLOOR
    return z * alpha


def _dirichlet_alpha(raw: Tensor) -> Tensor:
    return ad.softplus(raw) + 1.0


def head_probs(kind, raw: Tensor, num_classes: int) -> Tensor:
    """Map raw head outputs (N x width) onto the class simplex (N x C)."""
    kind = as_loss(kind)
    raw = ad.as_tensor(raw)
    _check_width(kind, raw, num_classes)
    if kind.kind == "relaxed_softmax":
        return ad.softmax(_relaxed_logits(raw, num_classes))
    if kind.kind == "evidential":
        alpha = _dirichlet_alpha(raw)
        return alpha / alpha.sum(axis=1, keepdims=True)
    return ad.softmax(raw)


def _cross_entropy(logits: Tensor, one_hot: np.ndarray) -> Tensor:
    return -(ad.log_softmax(logits) * one_hot).sum(axis=1).mean()


def _dirichlet_kl_to_uniform(alpha: Tensor) -> Tensor:
    """KL(Dir(alpha) || Dir(1, ..., 1)) per row."""
    c = alpha.shape[1]
    total = alpha.sum(axis=1, keepdims=True)
    return (
        ad.lgamma(total).sum(axis=1)
        - math.lgamma(c)
        - ad.lgamma(alpha).sum(axis=1)
        + ((alpha - 1.0) * (ad.digamma(alpha) - ad.digamma(total))).sum(axis=1)
    )


def _evidential(raw: Tensor, one_hot: np.ndarray, epoch: int, anneal_epochs: int) -> Tensor:
    alpha = _dirichlet_alpha(raw)
    strength = alpha.sum(axis=1, keepdims=True)
    p = alpha / strength
    err = ((p - one_hot) ** 2).sum(axis=1)
    var = (p * (1.0 - p) / (strength + 1.0)).sum(axis=1)
    per_sample = err + var
    anneal = min(1.0, max(0, epoch) / anneal_epochs)
    if anneal > 0:
        misleading = one_hot + (1.0 - one_hot) * alpha
        per_sample = per_sample + anneal * _dirichlet_kl_to_uniform(misleading)
    return per_sample.mean()


def _ldmi(raw: Tensor, one_hot: np.ndarray, det_floor: float) -> Tensor:
    n, c = one_hot.shape
    if n < c:
        raise LossError(f"ldmi needs a batch of at least {c} samples (one per class), got {n}")
    probs = ad.softmax(raw)
    joint = ad.matmul(one_hot.T, probs) * (1.0 / n)
    sign, logdet = np.linalg.slogdet(joint.data)
    if sign == 0 or logdet < math.log(det_floor):
        warnings.warn(
            f"ldmi: |det Q| below floor {det_floor:g}; loss clamped for this batch",
            DeterminantFloorWarning,
            stacklevel=3,
        )
        # keep the graph connected so every parameter still receives a (zero) gradient
        return (probs * 0.0).sum() + (-math.log(det_floor))
    return -ad.logabsdet(joint)


def loss_value(kind, raw: Tensor, labels: BatchLabels, epoch: int = 0) -> Tensor:
    """Scalar training loss of one head on one batch."""
    kind = as_loss(kind)
    raw = ad.as_tensor(raw)
    if len(labels) == 0:
        raise LossError("empty batch")
    c = labels.num_classes
    _check_width(kind, raw, c)
    if raw.shape[0] != len(labels):
        raise LossError(f"batch size mismatch: {raw.shape[0]} outputs vs {len(labels)} labels")
    t = labels.one_hot
    k = kind.kind
    if k == "softmax":
        return _cross_entropy(raw, t)
    if k == "relaxed_softmax":
        return _cross_entropy(_relaxed_logits(raw, c), t)
    if k == "evidential":
        return _evidential(raw, t, epoch, kind.anneal_epochs)
    if k == "ldmi":
        return _ldmi(raw, t, kind.det_floor)
    p = ad.softmax(raw)
    if k == "mse":
        return ((p - t) ** 2).mean()
    return ad.tabs(p - t).mean()


def dirichlet_uncertainty(alpha) -> np.ndarray:
    """C / sum(alpha) per row: 1 with no evidence, tending to 0 as evidence grows."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha.shape[-1] / alpha.sum(axis=-1)


def evidential_uncertainty(raw) -> np.ndarray:
    raw = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
    return dirichlet_uncertainty(np.logaddexp(0.0, raw) + 1.0)


def parse_losses(names: Sequence[Union[str, LossKind]], anneal_epochs: int = 10, det_floor: float = 1e-8):
    return [
        n if isinstance(n, LossKind) else LossKind(n, anneal_epochs=anneal_epochs, det_floor=det_floor)
        for n in names
    ]
