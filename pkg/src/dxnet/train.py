"""Optimizers, learning-rate schedules, metrics and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from dxnet import ops
from dxnet.autodiff import NonFiniteError, Variable, backward, no_grad
from dxnet.data import AugmentPolicy, augment
from dxnet.model import Model, predict

logger = logging.getLogger(__name__)

PSNR_CAP = 300.0
LUMA = np.array([0.299, 0.587, 0.114])


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# -- optimizers ----------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd_nesterov"
    lr: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_nesterov", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def flat(self) -> Dict[str, np.ndarray]:
        """Buffers and scalars as named arrays, for checkpointing."""
        out = {"opt.step": np.array(self.step_count, dtype=np.int64), "opt.lr": np.array(self.lr)}
        for pname, bufs in self.buffers.items():
            for bname, arr in bufs.items():
                out[f"opt.{bname}.{pname}"] = arr
        return out


def decayed_names(model: Model) -> set:
    """Conv and linear weights; BN affines and biases are not decayed."""
    return {n for n, k in model.params.kinds.items() if k in ("conv", "linear")}


def optimizer_step(
    params: Dict[str, Variable],
    grads: Optional[Dict[str, np.ndarray]],
    state: OptimizerState,
    decayed: Optional[set] = None,
) -> None:
    """Update ``params`` in place. ``grads`` defaults to each variable's ``.grad``."""
    if grads is None:
        grads = {n: v.grad for n, v in params.items()}
    missing = [n for n in params if grads.get(n) is None]
    if missing:
        raise ValueError(f"missing gradient for {missing[:5]}")
    bad = [n for n in params if not np.isfinite(grads[n]).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad[:5]}; step aborted")
    decayed = set(params) if decayed is None else decayed
    state.step_count += 1
    t = state.step_count
    for name, var in params.items():
        theta = var.data
        g = grads[name].astype(theta.dtype, copy=False)
        if state.weight_decay and name in decayed:
            g = g + state.weight_decay * theta
        bufs = state.buffers.setdefault(name, {})
        if state.kind == "sgd_nesterov":
            v = bufs.get("velocity")
            v = g.copy() if v is None else state.momentum * v + g
            bufs["velocity"] = v
            var.data = theta - state.lr * (g + state.momentum * v)
        else:
            b1, b2 = state.betas
            m = bufs.get("m", np.zeros_like(theta))
            s = bufs.get("v", np.zeros_like(theta))
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * g * g
            bufs["m"], bufs["v"] = m, s
            mhat = m / (1 - b1**t)
            shat = s / (1 - b2**t)
            var.data = (theta - state.lr * mhat / (np.sqrt(shat) + state.eps)).astype(theta.dtype)


# -- schedules -----------------------------------------------------------------


@dataclass
class PlateauSchedule:
    lr: float
    factor: float = 2.0
    patience: int = 10
    threshold: float = 1e-4
    min_lr: Optional[float] = None
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if self.factor <= 1:
            raise ValueError("plateau factor must exceed 1")
        if self.min_lr is None:
            self.min_lr = 1e-4 * self.lr

    def step(self, metric: float) -> float:
        if not math.isfinite(self.best) or metric < self.best - abs(self.best) * self.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr / self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass
class MilestoneSchedule:
    initial_lr: float
    fractions: Sequence[float]
    factor: float
    total_epochs: int
    lr: float = field(init=False)

    def __post_init__(self):
        f = list(self.fractions)
        if any(not 0 < x < 1 for x in f) or any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError("milestone fractions must be strictly increasing in (0, 1)")
        if self.factor <= 1:
            raise ValueError("milestone factor must exceed 1")
        self.lr = self.initial_lr

    def lr_at(self, epoch: int) -> float:
        crossed = sum(epoch >= frac * self.total_epochs for frac in self.fractions)
        return self.initial_lr / self.factor**crossed

    def step(self, epoch: int) -> float:
        self.lr = self.lr_at(epoch)
        return self.lr


LrSchedule = Union[PlateauSchedule, MilestoneSchedule]


def schedule_state(sched: LrSchedule) -> Dict[str, np.ndarray]:
    """Numeric scheduler fields as named arrays, for checkpointing."""
    return {
        f"sched.{k}": np.array(v)
        for k, v in vars(sched).items()
        if isinstance(v, (int, float)) and not isinstance(v, bool)
    }


def schedule_step(sched: LrSchedule, signal: float) -> float:
    """Epoch index for milestone schedules, validation metric for plateau."""
    return sched.step(signal)


# -- metrics ------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, border_crop: int = 0, luma_only: bool = False) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    if luma_only:
        if a.ndim < 3 or a.shape[-3] != 3:
            raise ValueError("luma PSNR needs 3-channel images")
        a = np.tensordot(LUMA, a, axes=([0], [-3]))
        b = np.tensordot(LUMA, b, axes=([0], [-3]))
    if border_crop:
        c = border_crop
        a = a[..., c:-c, c:-c]
        b = b[..., c:-c, c:-c]
    if a.size == 0:
        raise ValueError("PSNR region is empty after border crop")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


@dataclass
class ArrayDataset:
    """Inputs and targets as arrays.

    Classification: images and integer labels. Denoising: noisy images and
    clean images. Super-resolution: low-res and high-res images. When
    ``noise_sigma`` is set on a denoising set, training redraws the noise for
    every batch from the clean targets.
    """

    inputs: np.ndarray
    targets: np.ndarray
    noise_sigma: Optional[float] = None

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.inputs[idx], self.targets[idx], self.noise_sigma)


def evaluate(model: Model, dataset: ArrayDataset, task: Optional[str] = None, batch_size: int = 64) -> float:
    """Top-1 error % (classification) or mean PSNR in dB (restoration)."""
    task = task or model.config.task
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    prev = model.mode
    model.eval()
    try:
        out = predict(model, dataset.inputs, batch_size)
    finally:
        model.set_mode(prev)
    if task == "classification":
        return float(100.0 * np.mean(out.argmax(axis=1) != dataset.targets))
    if task == "denoising":
        clean_est = dataset.inputs - out
        return float(np.mean([psnr(e, t) for e, t in zip(clean_est, dataset.targets)]))
    if task == "super_resolution":
        return float(np.mean([psnr(o, t, border_crop=4, luma_only=True) for o, t in zip(out, dataset.targets)]))
    raise ValueError(f"unknown task {task!r}")


# -- training ------------------------------------------------------------------


@dataclass
class TrainRunConfig:
    epochs: int = 200
    batch_size: int = 128
    loss: str = "softmax_ce"
    seed: int = 0
    eval_every: int = 1
    recipe: str = "cifar"
    optimizer: str = "sgd_nesterov"
    lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    schedule: str = "plateau"
    milestones: tuple = ()
    milestone_factor: float = 5.0
    patience: int = 10
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    augment: Optional[AugmentPolicy] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


RECIPES = {
    "cifar": dict(epochs=200, batch_size=128, loss="softmax_ce", optimizer="sgd_nesterov", lr=0.1,
                  weight_decay=5e-4, momentum=0.9, schedule="plateau"),
    "svhn": dict(epochs=100, batch_size=128, loss="softmax_ce", optimizer="sgd_nesterov", lr=0.1,
                 weight_decay=5e-4, momentum=0.9, schedule="plateau"),
    "denoising": dict(epochs=5000, batch_size=32, loss="mse", optimizer="adam", lr=1e-3, weight_decay=0.0,
                      schedule="milestones", milestones=(0.1, 0.25, 0.75, 0.9), milestone_factor=5.0),
    "sr": dict(epochs=6000, batch_size=16, loss="mae", optimizer="adam", lr=1e-4, weight_decay=0.0,
               schedule="milestones", milestones=(0.5,), milestone_factor=10.0),
}


def recipe(name: str, **overrides) -> TrainRunConfig:
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    return TrainRunConfig(recipe=name, **{**RECIPES[name], **overrides})


def make_schedule(run: TrainRunConfig) -> LrSchedule:
    if run.schedule == "plateau":
        return PlateauSchedule(run.lr, patience=run.patience)
    if run.schedule == "milestones":
        return MilestoneSchedule(run.lr, run.milestones, run.milestone_factor, run.epochs)
    raise ValueError(f"unknown schedule {run.schedule!r}")


def task_loss(model: Model, loss_kind: str, x: np.ndarray, y: np.ndarray) -> Variable:
    """Loss of one batch; denoisers regress the noise ``x - y``."""
    out = model.forward(x)
    if model.config.task == "denoising":
        return ops.compute_loss(loss_kind, out, x - y)
    return ops.compute_loss(loss_kind, out, y)


def dataset_loss(model: Model, dataset: ArrayDataset, loss_kind: str, batch_size: int = 64) -> float:
    """Sample-weighted mean loss over ``dataset`` without recording a graph."""
    total = 0.0
    dt = model.params.dtype
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            x = dataset.inputs[i : i + batch_size].astype(dt)
            y = dataset.targets[i : i + batch_size]
            y = y.astype(dt) if model.config.task != "classification" else y
            total += float(task_loss(model, loss_kind, x, y).data) * len(x)
    return total / len(dataset)


@dataclass
class History:
    rows: List[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "val_metric", "lr")

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([fmt(r[c]) for c in self.COLUMNS])


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.10g}"


def _snapshot(model: Model) -> dict:
    return {n: v.data.copy() for n, v in model.params.tensors.items()}


def _restore(model: Model, snap: dict) -> None:
    for n, arr in snap.items():
        model.params.tensors[n].data = arr.copy()


def train(
    model: Model,
    dataset: ArrayDataset,
    run: TrainRunConfig,
    val: Optional[ArrayDataset] = None,
    out_dir=None,
) -> History:
    """Minibatch training; returns the per-epoch history.

    A plateau schedule without an explicit ``val`` set holds out
    ``run.val_fraction`` of ``dataset``. Non-finite losses restore the last
    good parameters and raise :class:`DivergenceError`.
    """
    rng = np.random.default_rng(run.seed)
    model.rng = np.random.default_rng([run.seed, 1])
    task = model.config.task
    if val is None and run.schedule == "plateau":
        perm = rng.permutation(len(dataset))
        n_val = max(1, int(round(run.val_fraction * len(dataset))))
        val, dataset = dataset.subset(np.sort(perm[:n_val])), dataset.subset(np.sort(perm[n_val:]))
    opt = OptimizerState(run.optimizer, run.lr, run.weight_decay, run.momentum)
    sched = make_schedule(run)
    decay = decayed_names(model)
    params = model.params.tensors
    dt = model.params.dtype
    history = History()
    good = _snapshot(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    n = len(dataset)
    for epoch in range(run.epochs):
        if isinstance(sched, MilestoneSchedule):
            opt.lr = sched.step(epoch)
        model.train()
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, run.batch_size):
            idx = perm[start : start + run.batch_size]
            x = dataset.inputs[idx]
            y = dataset.targets[idx]
            if task == "denoising" and dataset.noise_sigma is not None:
                clean = y
                if run.augment is not None:
                    clean = augment(clean, run.augment, rng)
                x = clean + rng.normal(0.0, dataset.noise_sigma / 255.0, size=clean.shape)
                y = clean
            elif run.augment is not None:
                if task == "classification":
                    x = augment(x, run.augment, rng)
                else:
                    x, y = augment(x, run.augment, rng, companions=(y,))
            x = x.astype(dt)
            y = y if task == "classification" else y.astype(dt)
            try:
                loss = task_loss(model, run.loss, x, y)
                backward(loss)
                optimizer_step(params, None, opt, decay)
            except NonFiniteError as exc:
                _restore(model, good)
                raise DivergenceError(f"epoch {epoch}, batch starting {start}: {exc}") from exc
            losses.append(float(loss.data) * len(idx))
        train_loss = sum(losses) / n
        val_metric = float("nan")
        if val is not None and (epoch + 1) % run.eval_every == 0:
            val_metric = evaluate(model, val, task)
            if isinstance(sched, PlateauSchedule):
                model.eval()
                opt.lr = sched.step(dataset_loss(model, val, run.loss))
        history.append(epoch=epoch, train_loss=train_loss, val_metric=val_metric, lr=opt.lr)
        logger.info("epoch %d loss %.6g val %.6g lr %.3g", epoch, train_loss, val_metric, opt.lr)
        good = _snapshot(model)
        if out_dir is not None and run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0:
            from dxnet.checkpoint import save_checkpoint

            state = {"epoch": np.array(epoch, dtype=np.int64), **opt.flat(), **schedule_state(sched)}
            save_checkpoint(model, out_dir / "checkpoint.dxnt", state)
    model.eval()
    return history
