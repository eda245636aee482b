"""Surrogate-gradient BPTT training, Adam, step schedule and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .architecture import MRASNN, checkpoint_bytes
from .data import SampleSet, standardize
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, msg, last_good: bytes | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr0: float = 0.01
    lr_decay: float = 0.1
    lr_step: int = 30
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr0 * lr_decay ** (epoch // lr_step)`` (epochs counted from 0)."""
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    b, K = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return tc._result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


class Adam:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.named = list(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for _, p in self.named]
        self.v = [np.zeros_like(p.data) for _, p in self.named]
        self.t = 0

    def step(self, lr: float) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (_, p), m, v in zip(self.named, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = np.zeros_like(p.data)


def adam_step(params, grads, state: Adam | None, lr: float) -> Adam:
    """Functional wrapper: copy ``grads`` onto ``params`` and apply one Adam update."""
    if state is None:
        state = Adam([(f"p{i}", p) for i, p in enumerate(params)])
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.data.dtype)
    state.step(lr)
    return state


def prepare_inputs(windows: np.ndarray, net: MRASNN) -> np.ndarray:
    x = standardize(windows) if net.cfg.standardize else windows.astype(np.float32)
    return x.astype(tc.default_dtype())


def forward_mean_logits(net: MRASNN, windows: np.ndarray, taps=None) -> tuple[Tensor, Tensor]:
    per_t = net(prepare_inputs(windows, net), taps)
    return per_t, tc.mean(per_t, axis=0, keepdims=False)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr:.6g},{self.train_loss:.6f},{self.train_acc:.6f},{self.eval_acc:.6f}"


HISTORY_HEADER = "epoch,lr,train_loss,train_acc,eval_acc"


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_checkpoint: bytes = b""
    final_checkpoint: bytes = b""
    best_eval_acc: float = -1.0

    def history_text(self) -> str:
        return "\n".join([HISTORY_HEADER] + [r.line() for r in self.history]) + "\n"


def train(net: MRASNN, trainset: SampleSet, cfg: TrainConfig, evalset: SampleSet | None = None,
          on_epoch=None, target_accuracy: float | None = None) -> TrainResult:
    """Epoch loop: seeded shuffle, T-step forward, mean-logit CE, BPTT, Adam.

    The best checkpoint is chosen by eval accuracy (train accuracy when no
    eval set is given). Training stops early once that score reaches
    ``target_accuracy``. A non-finite loss aborts with :class:`NumericalError`
    carrying the last good checkpoint.
    """
    if len(trainset) == 0:
        raise ValueError("training set is empty")
    if trainset.num_classes > net.cfg.num_classes:
        raise ValueError("dataset has more classes than the network outputs")
    opt = Adam(list(net.named_parameters()), cfg.betas, cfg.eps, cfg.weight_decay)
    result = TrainResult()
    last_good = checkpoint_bytes(net)
    n = len(trainset)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        net.train()
        total_loss = 0.0
        correct = seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2 and n > 1:
                # batch norm needs more than one window; fold the remainder away
                continue
            opt.zero_grad()
            _, mean_logits = forward_mean_logits(net, trainset.windows[idx])
            loss = cross_entropy_loss(mean_logits, trainset.labels[idx])
            if not math.isfinite(loss.item()):
                raise NumericalError(f"loss became non-finite at epoch {epoch}", last_good)
            loss.backward()
            if cfg.grad_clip > 0:
                _clip(net, cfg.grad_clip)
            try:
                opt.step(lr)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}", last_good) from None
            total_loss += loss.item() * len(idx)
            seen += len(idx)
            correct += int((mean_logits.data.argmax(axis=1) == trainset.labels[idx]).sum())
        last_good = checkpoint_bytes(net)
        train_acc = correct / max(seen, 1)
        eval_acc = evaluate(net, evalset).accuracy if evalset is not None and len(evalset) else float("nan")
        rec = EpochRecord(epoch, lr, total_loss / max(seen, 1), train_acc, eval_acc)
        result.history.append(rec)
        log.info(rec.line())
        score = eval_acc if evalset is not None and len(evalset) else train_acc
        if score > result.best_eval_acc:
            result.best_eval_acc = score
            result.best_checkpoint = last_good
        if on_epoch is not None:
            on_epoch(rec)
        if target_accuracy is not None and score >= target_accuracy:
            break
    result.final_checkpoint = last_good
    return result


def _clip(net: MRASNN, max_norm: float) -> None:
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


@dataclass
class EvalReport:
    accuracy: float
    per_class: list[float]
    confusion: np.ndarray  # [K, K], rows = true class
    timestep_logits: np.ndarray | None = None  # [T, N, K]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def report_from_predictions(pred, labels, num_classes: int) -> EvalReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    rows = cm.sum(axis=1)
    per_class = [float(cm[i, i] / rows[i]) if rows[i] else float("nan") for i in range(num_classes)]
    return EvalReport(float(np.trace(cm) / cm.sum()), per_class, cm)


def evaluate(net: MRASNN, evalset: SampleSet, batch_size: int = 64, keep_timestep_logits: bool = False,
             transform=None) -> EvalReport:
    """Accuracy and confusion matrix with BN in eval mode and no graph recording."""
    if evalset is None or len(evalset) == 0:
        raise ValueError("evaluation set is empty")
    if evalset.labels.max() >= net.cfg.num_classes:
        raise ValueError("evaluation labels exceed the network's class count")
    was = net.training
    net.eval()
    preds, dumps = [], []
    with tc.no_grad():
        for start in range(0, len(evalset), batch_size):
            w = evalset.windows[start : start + batch_size]
            if transform is not None:
                w = transform(w)
            per_t, mean_logits = forward_mean_logits(net, w)
            preds.append(mean_logits.data.argmax(axis=1))
            if keep_timestep_logits:
                dumps.append(per_t.data)
    net.train(was)
    rep = report_from_predictions(np.concatenate(preds), evalset.labels, net.cfg.num_classes)
    if keep_timestep_logits:
        rep.timestep_logits = np.concatenate(dumps, axis=1)
    return rep


def aggregate(accuracies) -> tuple[float, float]:
    """Mean and population std over repeated runs."""
    a = np.asarray(list(accuracies), dtype=np.float64)
    return float(a.mean()), float(a.std())
