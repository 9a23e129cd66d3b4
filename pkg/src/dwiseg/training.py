"""Loss, weight maps, learning-rate schedule, early stopping and the SGD loop.

The combined loss for probabilities ``p``, one-hot references ``g`` and voxel
weights ``w`` is::

    L = -sum_x sum_c w(x) g_c(x) log p_c(x)  -  mean_{c present} Dice_c
    Dice_c = 2 sum_x p_c g_c / (sum_x p_c^2 + sum_x g_c^2)

with ``p`` clamped to [1e-12, 1] inside the log. "present" means the class
occurs in the batch's references. With ``reduction="mean"`` the logistic sum
is divided by the pixel count; that is what the optimiser uses so the step
size does not scale with slice area.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import NumericError, StatsError, TrainingError, ValidationError
from .features import SliceDataset
from .network import ArchSpec, SegNet, init_params
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

EPS = 1e-12


# --- weights -------------------------------------------------------------------

def label_counts(labels) -> dict[int, int]:
    """Voxel count per label over one or several label volumes/arrays."""
    vols = labels if isinstance(labels, (list, tuple)) else [labels]
    counts: dict[int, int] = {}
    for v in vols:
        arr = np.asarray(getattr(v, "labels", v))
        vals, n = np.unique(arr, return_counts=True)
        for a, b in zip(vals.tolist(), n.tolist()):
            counts[int(a)] = counts.get(int(a), 0) + int(b)
    return counts


def median_frequency_weights(counts: dict[int, int], classes=None) -> dict[int, float]:
    """``median(freq) / freq_c`` over the classes present; absent classes get 0.

    The median of an even number of frequencies is the mean of the two middle ones.
    """
    present = {c: n for c, n in counts.items() if n > 0}
    total = sum(present.values())
    if total == 0:
        raise StatsError("no labelled voxels")
    freq = {c: n / total for c, n in present.items()}
    med = float(np.median(list(freq.values())))
    out = {c: med / f for c, f in freq.items()}
    for c in classes or ():
        out.setdefault(int(c), 0.0)
    return dict(sorted(out.items()))


def class_weights(labels, classes=None) -> dict[int, float]:
    return median_frequency_weights(label_counts(labels), classes)


def edge_weights(labels, edge_gain: float = 5.0) -> Volume:
    """``edge_gain`` where any of the 6 face neighbours has another label, else 0."""
    lab = np.asarray(getattr(labels, "labels", labels))
    edge = np.zeros(lab.shape, dtype=bool)
    for ax in range(lab.ndim):
        diff = np.diff(lab, axis=ax) != 0
        lo = [slice(None)] * lab.ndim
        hi = [slice(None)] * lab.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    affine = getattr(labels, "affine", np.eye(4))
    return Volume((edge * float(edge_gain)).astype(np.float32), affine)


def weight_map(labels: LabelVolume, class_w: dict[int, float], edge_gain: float = 5.0) -> np.ndarray:
    """Voxel weights: median-frequency class weight plus edge weight."""
    lab = labels.labels
    lut = np.zeros(int(lab.max()) + 1)
    for c, w in class_w.items():
        if c < len(lut):
            lut[c] = w
    return (lut[lab] + edge_weights(lab, edge_gain).data).astype(np.float32)


# --- loss ----------------------------------------------------------------------

def combined_loss(probs, targets, weights, reduction: str = "sum"):
    """Loss value and its exact gradient with respect to ``probs``.

    probs: (N, C, H, W); targets: (N, H, W) class indices; weights: (N, H, W).
    Returns ``(loss, dL/dprobs)`` in float64.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite probabilities")
    t = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64)
    n, c = p.shape[:2]
    if t.shape != (n,) + p.shape[2:] or w.shape != t.shape:
        raise ValidationError("targets/weights must be (N, H, W) matching probs")
    g = np.zeros_like(p)
    np.put_along_axis(g, t[:, None].astype(np.int64), 1.0, axis=1)
    scale = 1.0 / t.size if reduction == "mean" else 1.0

    pc = np.clip(p, EPS, 1.0)
    wg = w[:, None] * g
    logistic = -np.sum(wg * np.log(pc)) * scale
    grad = np.where((p >= EPS) & (p <= 1.0), -wg / pc, 0.0) * scale

    axes = (0, 2, 3)
    inter = np.sum(p * g, axis=axes)
    denom = np.sum(p * p, axis=axes) + np.sum(g * g, axis=axes)
    present = np.sum(g, axis=axes) > 0
    k = int(present.sum())
    dice = np.zeros(c)
    dice[present] = 2.0 * inter[present] / denom[present]
    dice_term = dice[present].mean() if k else 0.0
    if k:
        coef = np.zeros(c)
        coef[present] = 1.0 / k
        # d Dice_c / dp = 2 g / B - 2 A * 2 p / B^2
        a = inter[None, :, None, None]
        b = np.where(present, denom, 1.0)[None, :, None, None]
        d_dice = 2.0 * g / b - 4.0 * a * p / (b * b)
        grad -= coef[None, :, None, None] * d_dice
    return float(logistic - dice_term), grad


def loss_terms(probs, targets, weights, reduction: str = "sum") -> tuple[float, float]:
    """(logistic term, mean Dice term) separately."""
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1.0)
    t = np.asarray(targets).astype(np.int64)
    w = np.asarray(weights, dtype=np.float64)
    logp = np.take_along_axis(np.log(p), t[:, None], axis=1)[:, 0]
    scale = 1.0 / t.size if reduction == "mean" else 1.0
    logistic = -float(np.sum(w * logp)) * scale
    total, _ = combined_loss(probs, targets, weights, reduction)
    return logistic, logistic - total


def combined_loss_torch(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor,
                        reduction: str = "mean") -> torch.Tensor:
    """Same loss as :func:`combined_loss`, differentiable through the softmax."""
    num_classes = logits.shape[1]
    logp = torch.log_softmax(logits, dim=1).clamp(min=math.log(EPS))
    p = torch.softmax(logits, dim=1)
    g = torch.nn.functional.one_hot(targets, num_classes).permute(0, 3, 1, 2).to(logits.dtype)
    logistic = -(weights.unsqueeze(1) * g * logp).sum()
    if reduction == "mean":
        logistic = logistic / targets.numel()
    dims = (0, 2, 3)
    inter = (p * g).sum(dims)
    denom = (p * p).sum(dims) + (g * g).sum(dims)
    present = g.sum(dims) > 0
    dice = 2 * inter[present] / denom[present]
    dice_term = dice.mean() if dice.numel() else logits.new_zeros(())
    return logistic - dice_term


# --- schedule and stopping -----------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay: float = 0.2
    lr_step: int = 10
    patience: int = 15
    min_delta: float = 1e-6
    batch_size: int = 16
    max_epochs: int = 60
    seed: int = 0
    momentum: float = 0.0
    edge_gain: float = 5.0
    reduction: str = "mean"

    def __post_init__(self):
        if not (self.initial_lr > 0 and self.lr_decay > 0 and self.lr_step >= 1
                and self.patience >= 1 and self.batch_size >= 1 and self.max_epochs >= 1):
            raise ValidationError(f"invalid training configuration {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")


def learning_rate(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """``initial_lr * lr_decay ** floor(epoch / lr_step)`` (epochs count from 0)."""
    return cfg.initial_lr * cfg.lr_decay ** (epoch // cfg.lr_step)


class EarlyStopping:
    """Stop once the best validation loss has not improved for ``patience`` epochs.

    An epoch improves only if its loss is below the best so far by at least
    ``min_delta``.
    """

    def __init__(self, patience: int = 15, min_delta: float = 1e-6):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        improved = value < self.best - self.min_delta
        if improved:
            self.best, self.best_epoch = value, epoch
        return improved, epoch - self.best_epoch >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.lr:.10g}", f"{r.train_loss:.8f}", f"{r.val_loss:.8f}"])


def fit_loop(train_epoch: Callable[[int, float], float], validate: Callable[[int], float],
             cfg: TrainConfig, on_improve: Callable[[int], None] | None = None) -> History:
    """Drive epochs: schedule the learning rate, validate, stop early.

    ``train_epoch(epoch, lr)`` returns the mean training loss and
    ``validate(epoch)`` the validation loss; ``on_improve(epoch)`` is called
    whenever a new best validation loss is reached (checkpointing hook).
    """
    hist = History()
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    for epoch in range(cfg.max_epochs):
        lr = learning_rate(epoch, cfg)
        train_loss = train_epoch(epoch, lr)
        val_loss = validate(epoch)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss at epoch {epoch}: train={train_loss} "
                                f"val={val_loss}")
        hist.records.append(EpochRecord(epoch, lr, train_loss, val_loss))
        improved, stop = stopper.update(epoch, val_loss)
        if improved and on_improve is not None:
            on_improve(epoch)
        log.info("epoch %d lr %.2e train %.5f val %.5f%s", epoch, lr, train_loss, val_loss,
                 " *" if improved else "")
        if stop:
            hist.stopped_early = True
            break
    hist.best_epoch = stopper.best_epoch
    return hist


# --- SGD ---------------------------------------------------------------------

def sgd_step(net: torch.nn.Module, lr: float, momentum: float = 0.0, buffers=None) -> None:
    """In-place ``p -= lr * grad`` (with an optional heavy-ball momentum buffer)."""
    with torch.no_grad():
        for name, p in net.named_parameters():
            if p.grad is None:
                continue
            step = p.grad
            if momentum > 0:
                buf = buffers.get(name)
                if buf is None:
                    buf = buffers[name] = step.clone()
                else:
                    buf.mul_(momentum).add_(step)
                step = buf
            p.sub_(lr * step)


def _to_torch(x, y, w):
    return (torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(y),
            torch.from_numpy(w))


def evaluate_loss(net: SegNet, data: SliceDataset, batch_size: int, reduction: str = "mean") -> float:
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            pos = range(start, min(start + batch_size, len(data)))
            x, y, w = _to_torch(*data.batch(pos))
            loss = combined_loss_torch(net(x), y, w, reduction)
            total += float(loss) * len(pos)
            count += len(pos)
    return total / max(count, 1)


def train(view: str, samples: SliceDataset, val_samples: SliceDataset, arch: ArchSpec,
          cfg: TrainConfig = TrainConfig()) -> tuple[SegNet, History]:
    """SGD on shuffled mini-batches; returns the best-validation network and history."""
    if len(samples) == 0 or len(val_samples) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    if samples.channels != arch.in_channels:
        raise ValidationError(f"data has {samples.channels} channels, arch expects "
                              f"{arch.in_channels}")
    torch.manual_seed(cfg.seed)
    net = init_params(arch)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    buffers: dict = {}
    best_state = {"state": copy.deepcopy(net.state_dict())}

    def train_epoch(epoch: int, lr: float) -> float:
        net.train()
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            pos = order[start:start + cfg.batch_size]
            x, y, w = _to_torch(*samples.batch(pos))
            net.zero_grad(set_to_none=True)
            loss = combined_loss_torch(net(x), y, w, cfg.reduction)
            if not torch.isfinite(loss):
                raise TrainingError(f"{view}: non-finite loss at epoch {epoch}, batch {start}")
            loss.backward()
            sgd_step(net, lr, cfg.momentum, buffers)
            total += loss.item() * len(pos)
        return total / len(order)

    def validate(epoch: int) -> float:
        return evaluate_loss(net, val_samples, cfg.batch_size, cfg.reduction)

    def checkpoint(epoch: int) -> None:
        best_state["state"] = copy.deepcopy(net.state_dict())

    hist = fit_loop(train_epoch, validate, cfg, checkpoint)
    net.load_state_dict(best_state["state"])
    net.eval()
    return net, hist
