"""Training and inference regimes: multi-loss heads, DSE, deep ensembles,
MC-dropout and stochastic weight averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import BatchIterator, Dataset
from .losses import BatchLabels, LossKind, as_loss, head_probs, loss_value
from .model import ModelSpec, MultiHeadModel, PredictionSet
from .nn import LayerStack, Mode
from .optim import make_optimizer
from .rng import substream

logger = logging.getLogger(__name__)

STRATEGIES = ("ours", "dse", "de", "mc_dropout", "swa")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    M: int = 4
    dropout_p: float = 0.5
    swa_snapshot_epochs: int = 4
    dse_head_epochs: int = 10
    select_best: bool = True
    loss_weights: Optional[List[float]] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.swa_snapshot_epochs < 1:
            raise ValueError("swa_snapshot_epochs must be >= 1")
        if self.dse_head_epochs < 1:
            raise ValueError("dse_head_epochs must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class TrainedPredictor:
    """What a strategy hands to evaluation.

    ``models`` holds one multi-head model (ours, dse, mc_dropout, swa) or the
    M independent members of a deep ensemble.
    """

    strategy: str
    models: List[MultiHeadModel]
    M: int
    seed: int = 0
    log: List[dict] = field(default_factory=list)
    snapshots: List[Dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def single_model(self) -> bool:
        return self.strategy == "swa"

    def predict(self, x) -> PredictionSet:
        if self.strategy in ("ours", "dse", "swa"):
            return self.models[0].predict(x)
        if self.strategy == "de":
            return PredictionSet(np.concatenate([m.predict(x).per_head for m in self.models], axis=1))
        if self.strategy == "mc_dropout":
            return mc_dropout_predict(self.models[0], x, self.M, substream(self.seed, "inference"))
        raise ValueError(f"unknown strategy {self.strategy!r}")


def _accuracy(per_head: np.ndarray, labels: np.ndarray) -> float:
    return float((per_head.mean(axis=1).argmax(axis=1) == labels).mean())


def _train_heads(
    model: MultiHeadModel,
    head_ids: Sequence[int],
    train: Dataset,
    test: Optional[Dataset],
    cfg: TrainConfig,
    epochs: int,
    seed: int,
    key: Sequence[int] = (),
    freeze_trunk: bool = False,
    select_best: bool = True,
    weights: Optional[Sequence[float]] = None,
    on_epoch_end: Optional[Callable[[int], None]] = None,
    tag: Optional[dict] = None,
) -> List[dict]:
    """Optimize sum_j w_j * loss_j over the given heads (and the trunk unless frozen)."""
    head_ids = list(head_ids)
    losses = [model.losses[j] for j in head_ids]
    params = [] if freeze_trunk else model.trunk_parameters()
    for j in head_ids:
        params.extend(model.head_parameters(j))
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    min_batch = model.num_classes if any(l.kind == "ldmi" for l in losses) else 1
    batches = BatchIterator(train, cfg.batch_size, seed, key=key, min_batch=min_batch)
    drop_rng = substream(seed, "dropout", *key)
    c = model.num_classes

    log: List[dict] = []
    best_score, best_state = -1.0, None
    for epoch in range(epochs):
        loss_sums = np.zeros(len(head_ids))
        for xb, yb in batches.batches(epoch):
            labels = BatchLabels(yb, c)
            if freeze_trunk:
                with ad.no_grad():
                    feats = model.features(xb, Mode.TRAIN, drop_rng)
            else:
                feats = model.features(xb, Mode.TRAIN, drop_rng)
            head_losses = [
                loss_value(loss, model.heads[j].forward(feats, Mode.TRAIN, drop_rng), labels, epoch)
                for j, loss in zip(head_ids, losses)
            ]
            total = head_losses[0] if weights is None else head_losses[0] * weights[0]
            for k, hl in enumerate(head_losses[1:], start=1):
                total = total + (hl if weights is None else hl * weights[k])
            opt.zero_grad()
            total.backward()
            opt.step()
            loss_sums += [hl.item() * len(yb) for hl in head_losses]

        train_ph = model.predict(train.x).per_head
        test_ph = model.predict(test.x).per_head if test is not None else None
        for k, j in enumerate(head_ids):
            rec = {
                "epoch": epoch,
                "head": j,
                "loss": float(loss_sums[k] / len(train)),
                "train_acc": _accuracy(train_ph[:, j:j + 1], train.labels),
                "test_acc": _accuracy(test_ph[:, j:j + 1], test.labels) if test_ph is not None else None,
            }
            if tag:
                rec.update(tag)
            log.append(rec)
        if select_best and test_ph is not None:
            score = _accuracy(test_ph[:, head_ids], test.labels)
            if score > best_score:
                best_score, best_state = score, model.state_dict()
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        logger.debug("epoch %d losses %s", epoch, loss_sums / len(train))
    if select_best and best_state is not None:
        model.load_state_dict(best_state)
    return log


def train_multiloss(model: MultiHeadModel, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> TrainedPredictor:
    """End-to-end training of every head at once on the summed head losses."""
    weights = cfg.loss_weights
    if weights is not None and len(weights) != model.num_heads:
        raise ValueError(f"loss_weights has {len(weights)} entries for {model.num_heads} heads")
    log = _train_heads(model, range(model.num_heads), train, test, cfg, cfg.epochs, cfg.seed,
                       select_best=cfg.select_best, weights=weights)
    return TrainedPredictor("ours", [model], model.num_heads, cfg.seed, log)


def train_dse(model: MultiHeadModel, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> TrainedPredictor:
    """Phase 0 trains trunk and head 0; phase h trains head h alone on the frozen trunk."""
    kinds = {l.kind for l in model.losses}
    if len(kinds) != 1:
        raise ValueError(f"dse needs one loss shared by all heads, got {sorted(kinds)}")
    log = _train_heads(model, [0], train, test, cfg, cfg.epochs, cfg.seed,
                       select_best=cfg.select_best, tag={"phase": 0})
    for h in range(1, model.num_heads):
        log += _train_heads(model, [h], train, test, cfg, cfg.dse_head_epochs, cfg.seed, key=(h,),
                            freeze_trunk=True, select_best=cfg.select_best, tag={"phase": h})
    return TrainedPredictor("dse", [model], model.num_heads, cfg.seed, log)


def train_deep_ensembles(spec: ModelSpec, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> TrainedPredictor:
    """M single-head models, member i seeded (init and shuffle) with seed + i."""
    members, log = [], []
    for i in range(cfg.M):
        member = spec.build(cfg.seed + i)
        member_log = _train_heads(member, [0], train, test, cfg, cfg.epochs, cfg.seed + i,
                                  select_best=cfg.select_best)
        for rec in member_log:
            rec["head"] = i
        members.append(member)
        log += member_log
    return TrainedPredictor("de", members, cfg.M, cfg.seed, log)


def train_mc_dropout(spec: ModelSpec, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> TrainedPredictor:
    model = spec.build(cfg.seed)
    _require_dropout(model)
    log = _train_heads(model, [0], train, test, cfg, cfg.epochs, cfg.seed, select_best=cfg.select_best)
    return TrainedPredictor("mc_dropout", [model], cfg.M, cfg.seed, log)


def _require_dropout(model: MultiHeadModel) -> None:
    stacks = [model.trunk] + model.heads
    if not any(s.has_dropout() for s in stacks):
        raise ValueError("MC-dropout needs a model with at least one dropout layer")


def mc_dropout_predict(model: MultiHeadModel, x, M: int, rng: np.random.Generator) -> PredictionSet:
    """M stochastic forward passes with dropout active; pass m becomes row m."""
    _require_dropout(model)
    if M < 1:
        raise ValueError("M must be >= 1")
    rows = [model.predict(x, Mode.MC_DROPOUT, rng).averaged for _ in range(M)]
    return PredictionSet(np.stack(rows, axis=-2))


def swa_average(snapshots: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Element-wise arithmetic mean of parameter snapshots.

    Uses the running form m_k = m_{k-1} + (s_k - m_{k-1}) / k, which returns
    identical snapshots unchanged bit for bit.
    """
    if not snapshots:
        raise ValueError("swa_average needs at least one snapshot")
    names = list(snapshots[0])
    mean = {k: np.array(v, dtype=np.float64) for k, v in snapshots[0].items()}
    for k, snap in enumerate(snapshots[1:], start=2):
        if list(snap) != names:
            raise ValueError("snapshots hold different parameter names")
        for name in names:
            value = np.asarray(snap[name], dtype=np.float64)
            if value.shape != mean[name].shape:
                raise ad.ShapeError("swa_average", mean[name].shape, value.shape, detail=name)
            mean[name] = mean[name] + (value - mean[name]) / k
    return mean


def train_swa(spec: ModelSpec, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> TrainedPredictor:
    """One run; snapshots at the last ``swa_snapshot_epochs`` epoch ends are averaged."""
    if cfg.swa_snapshot_epochs > cfg.epochs:
        raise ValueError(f"swa_snapshot_epochs ({cfg.swa_snapshot_epochs}) exceeds epochs ({cfg.epochs})")
    model = spec.build(cfg.seed)
    snapshots: List[Dict[str, np.ndarray]] = []
    first = cfg.epochs - cfg.swa_snapshot_epochs

    def snap(epoch):
        if epoch >= first:
            snapshots.append(model.state_dict())

    log = _train_heads(model, [0], train, test, cfg, cfg.epochs, cfg.seed,
                       select_best=False, on_epoch_end=snap)
    model.load_state_dict(swa_average(snapshots))
    return TrainedPredictor("swa", [model], 1, cfg.seed, log, snapshots)


def train_single_network(
    stack: LayerStack,
    loss: LossKind,
    num_classes: int,
    train: Dataset,
    cfg: TrainConfig,
) -> LayerStack:
    """Plain one-network training loop, kept free of the multi-head machinery."""
    loss = as_loss(loss)
    opt = make_optimizer(cfg.optimizer, stack.parameters(), cfg.learning_rate)
    min_batch = num_classes if loss.kind == "ldmi" else 1
    batches = BatchIterator(train, cfg.batch_size, cfg.seed, min_batch=min_batch)
    rng = substream(cfg.seed, "dropout")
    for epoch in range(cfg.epochs):
        for xb, yb in batches.batches(epoch):
            out = stack.forward(ad.as_tensor(xb), Mode.TRAIN, rng)
            value = loss_value(loss, out, BatchLabels(yb, num_classes), epoch)
            opt.zero_grad()
            value.backward()
            opt.step()
    return stack


def single_network_probs(stack: LayerStack, loss: LossKind, num_classes: int, x) -> np.ndarray:
    with ad.no_grad():
        return head_probs(loss, stack.forward(ad.as_tensor(x), Mode.EVAL), num_classes).data


def train_strategy(strategy: str, spec: ModelSpec, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> TrainedPredictor:
    if strategy == "ours":
        return train_multiloss(spec.build(cfg.seed), train, test, cfg)
    if strategy == "dse":
        return train_dse(spec.build(cfg.seed), train, test, cfg)
    if strategy == "de":
        return train_deep_ensembles(spec, train, test, cfg)
    if strategy == "mc_dropout":
        return train_mc_dropout(spec, train, test, cfg)
    if strategy == "swa":
        return train_swa(spec, train, test, cfg)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
