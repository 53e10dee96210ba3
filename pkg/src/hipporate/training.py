"""Regression training loop: MSE loss, Adam with L2 weight decay, a fixed
epoch budget and best-validation checkpointing, plus the flip/oversample
augmentation hooks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _result
from .cohort import oversample_indices
from .errors import DivergedLoss, EmptySet, LengthMismatch, ShapeMismatch
from .models import TrainedModel

VALID_AUGMENTATIONS = {"oversample", "flip"}


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    tolerance: float = 0.0
    seed: int = 0
    augmentation: frozenset[str] = frozenset()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "augmentation", frozenset(self.augmentation))
        unknown = self.augmentation - VALID_AUGMENTATIONS
        if unknown:
            raise ValueError(f"unknown augmentation(s) {sorted(unknown)}")
        if self.tolerance != 0.0:
            # only the protocol's setting is implemented: run the full epoch
            # budget and keep the best validation checkpoint
            raise ValueError("tolerance must be 0")
        if self.max_epochs < 1 or self.batch_size < 2:
            raise ValueError("need max_epochs >= 1 and batch_size >= 2")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    param_hash: str = ""
    weight_decay_mode: str = "l2_in_gradient"

    def to_rows(self) -> list[dict]:
        return [
            {"epoch": i, "train_loss": self.train_loss[i],
             "val_loss": self.val_loss[i], "seconds": self.seconds[i]}
            for i in range(len(self.train_loss))
        ]


@dataclass
class VolumeDataset:
    """In-memory training pool: volumes plus per-volume targets. When flip
    augmentation is active, flip_targets supplies the label each volume takes
    after a left/right mirror (the opposite hemisphere's score)."""

    volumes: np.ndarray                      # (N,1,X,Y,Z) float32
    targets: np.ndarray                      # (N,)
    flip_targets: np.ndarray | None = None   # (N,)
    partitions: list[str] | None = None
    subject_ids: list[str] | None = None

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        if self.volumes.ndim != 5 or self.volumes.shape[1] != 1:
            raise ShapeMismatch(f"volumes must be (N,1,X,Y,Z), got {self.volumes.shape}")
        if len(self.targets) != len(self.volumes):
            raise LengthMismatch("targets do not match volumes")

    def __len__(self) -> int:
        return len(self.volumes)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error with gradient 2*(pred - target)/n."""
    target = np.asarray(target, dtype=pred.data.dtype).reshape(-1)
    flat = pred.data.reshape(-1)
    if flat.shape != target.shape or flat.size < 1:
        raise LengthMismatch(
            f"pred has {flat.size} values, target has {target.size}")
    diff = flat - target
    value = np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=pred.data.dtype)

    def backward(g):
        if pred.requires_grad:
            pred.accumulate_grad(
                (2.0 * float(g) / flat.size * diff).reshape(pred.data.shape))

    return _result(value, (pred,), backward)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update, classical form: weight decay enters as an L2 term
    added to the gradient before the moment updates."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, "
                                f"param has {p.data.shape}")
        if cfg.weight_decay != 0.0:
            g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def _epoch_entries(dataset: VolumeDataset, cfg: TrainConfig, epoch: int):
    """Index/flip/target triples for one epoch, already shuffled."""
    n = len(dataset)
    entries_idx = np.arange(n)
    flips = np.zeros(n, dtype=bool)
    targets = dataset.targets
    if "flip" in cfg.augmentation:
        if dataset.flip_targets is None:
            raise ValueError("flip augmentation needs flip_targets")
        entries_idx = np.concatenate([entries_idx, np.arange(n)])
        flips = np.concatenate([flips, np.ones(n, dtype=bool)])
        targets = np.concatenate([dataset.targets, dataset.flip_targets])
    if "oversample" in cfg.augmentation:
        picks = oversample_indices(list(targets), seed=[cfg.seed, 11, epoch])
    else:
        picks = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(entries_idx))
    return entries_idx[picks], flips[picks], targets[picks]


def _batches(total: int, batch_size: int):
    """Contiguous batch slices; a trailing singleton is merged into the
    previous batch so batch-norm always sees B >= 2."""
    edges = list(range(0, total, batch_size)) + [total]
    spans = [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
    if len(spans) > 1 and spans[-1][1] - spans[-1][0] == 1:
        last = spans.pop()
        spans[-1] = (spans[-1][0], last[1])
    return spans


def _materialize(dataset: VolumeDataset, idx, flips) -> np.ndarray:
    batch = dataset.volumes[idx]
    if flips.any():
        batch = batch.copy()
        batch[flips] = batch[flips][:, :, ::-1, :, :]
    return batch


def evaluate_loss(model: TrainedModel, dataset: VolumeDataset, chunk: int = 16) -> float:
    """Eval-mode MSE over a dataset."""
    total = 0.0
    for b0 in range(0, len(dataset), chunk):
        sl = slice(b0, min(len(dataset), b0 + chunk))
        out = model.forward(Tensor(dataset.volumes[sl]), training=False)
        diff = out.data.reshape(-1).astype(np.float64) - dataset.targets[sl]
        total += float((diff ** 2).sum())
    return total / len(dataset)


def train(model: TrainedModel, train_set: VolumeDataset, val_set: VolumeDataset,
          cfg: TrainConfig) -> tuple[TrainedModel, TrainLog]:
    """Run the epoch budget and return the model restored to its best
    validation checkpoint, plus the full log."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySet("train and validation sets must be non-empty")
    for ds, name in ((train_set, "train"), (val_set, "validation")):
        if ds.partitions is not None and "test" in ds.partitions:
            raise EmptySet(f"{name} set contains records tagged 'test'")
    if train_set.subject_ids and val_set.subject_ids:
        overlap = set(train_set.subject_ids) & set(val_set.subject_ids)
        if overlap:
            raise EmptySet(f"train/validation overlap: {sorted(overlap)[:3]}...")

    log = TrainLog()
    state = AdamState(model.params)
    best_state = None

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        idx, flips, targets = _epoch_entries(train_set, cfg, epoch)
        running = 0.0
        seen = 0
        for bi, (lo, hi) in enumerate(_batches(len(idx), cfg.batch_size)):
            batch = _materialize(train_set, idx[lo:hi], flips[lo:hi])
            rng = np.random.default_rng([cfg.seed, 7, epoch, bi])
            out = model.forward(Tensor(batch), training=True, rng=rng)
            loss = mse_loss(out, targets[lo:hi])
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items()}
            adam_step(model.params, grads, state, cfg)
            for p in model.params.values():
                p.zero_grad()
            running += value * (hi - lo)
            seen += hi - lo
        val = evaluate_loss(model, val_set)
        if not np.isfinite(val):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        log.train_loss.append(running / seen)
        log.val_loss.append(val)
        log.seconds.append(time.perf_counter() - t0)
        if val < log.best_val_loss:  # strict: first epoch wins ties
            log.best_val_loss = val
            log.best_epoch = epoch
            best_state = model.clone_state()

    model.load_state(*best_state)
    log.param_hash = model.param_hash()
    model.provenance.update({
        "best_epoch": log.best_epoch,
        "val_loss": log.best_val_loss,
        "train_seed": cfg.seed,
        "augmentation": sorted(cfg.augmentation),
    })
    return model, log
