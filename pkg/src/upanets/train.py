"""SGD training loop with cosine annealing, plus the evaluation metrics.

Hyperparameter defaults are the published recipe: SGD with initial learning
rate 0.1, momentum 0.9, weight decay 5e-4, batch size 100, and a half-cycle
cosine schedule stepped once per optimizer step. The best test-accuracy
parameter snapshot is retained alongside the final state.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentSpec, augment_batch, normalize_images
from .errors import ConfigError, InputError, NumericError
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 1
    batch_size: int = 100
    seed: int = 0
    schedule: str = "cosine-half-cycle"
    augment: bool = True

    def __post_init__(self):
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class EfficiencyReport:
    accuracy_percent: float
    params_millions: float
    efficiency: float


def efficiency(acc_percent, params_millions):
    """Accuracy percent per million parameters."""
    if params_millions <= 0:
        raise InputError(f"params_millions must be positive, got {params_millions}")
    return EfficiencyReport(accuracy_percent=acc_percent, params_millions=params_millions,
                            efficiency=acc_percent / params_millions)


def cosine_lr(step, total_steps, lr0):
    """Half-cycle cosine: lr0 at step 0, 0 at the final step."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def top1_accuracy(logits, labels):
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    return float((np.argmax(data, axis=1) == labels).mean())


def sgd_step(named_params, velocity, lr, momentum, weight_decay):
    """theta <- theta - lr * v, with v <- momentum * v + (g + wd * theta).

    `velocity` is a name-keyed dict of buffers, created lazily. Weight decay
    applies to every parameter, normalization gains included.
    """
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        g = g + weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[name] = v
        v *= momentum
        v += g
        p.data -= lr * v


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, train_loss, test_top1, lr)
    best_state: dict = field(default_factory=dict)
    best_accuracy: float = 0.0
    best_epoch: int = -1


def evaluate(model, images, labels, mean, std, batch_size=500):
    """Eval-mode loss and top-1 accuracy; normalization only, no augmentation."""
    x = normalize_images(images, mean, std)
    loss, err = model.loss_and_error((x, labels), batch_size=batch_size)
    return loss, 1.0 - err


def _snapshot(model):
    return {name: arr.copy() for name, arr in model.state_entries()}


def train(model, dataset, cfg: TrainConfig, log=None):
    """Run the full loop over `dataset` (train/test splits, see data module).

    Per epoch: seeded shuffle, augmentation, forward/backward/step with the
    per-step cosine learning rate, then a test-split evaluation. History rows
    are (epoch, mean train loss, test top-1, last lr of the epoch).
    """
    n = len(dataset.train_labels)
    batches = n // cfg.batch_size
    if batches == 0:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {n}-sample training split")
    total_steps = max(cfg.epochs * batches, 1)
    spec = AugmentSpec(mean=dataset.mean, std=dataset.std)
    velocity = {}
    result = TrainResult(best_state=_snapshot(model))
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        epoch_loss = 0.0
        lr = cfg.lr0
        for b in range(batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            imgs = dataset.train_images[idx]
            if cfg.augment:
                batch = augment_batch(imgs, spec, rng)
            else:
                batch = normalize_images(imgs, dataset.mean, dataset.std)
            model.zero_grad()
            logits = model.forward(Tensor(batch), mode="train")
            loss = T.softmax_crossentropy(logits, dataset.train_labels[idx])
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            lr = cosine_lr(step, total_steps, cfg.lr0)
            sgd_step(model.named_parameters(), velocity, lr, cfg.momentum, cfg.weight_decay)
            epoch_loss += loss_val
            step += 1
        _, test_acc = evaluate(model, dataset.test_images, dataset.test_labels,
                               dataset.mean, dataset.std)
        row = (epoch, epoch_loss / batches, test_acc, lr)
        result.history.append(row)
        if test_acc > result.best_accuracy or result.best_epoch < 0:
            result.best_accuracy = test_acc
            result.best_epoch = epoch
            result.best_state = _snapshot(model)
        if log is not None:
            log(f"epoch {epoch}: train_loss={row[1]:.4f} test_top1={test_acc:.4f} lr={lr:.5f}")
    return result


def history_csv(history):
    lines = ["epoch,train_loss,test_top1,lr"]
    for epoch, loss, acc, lr in history:
        lines.append(f"{epoch},{loss!r},{acc!r},{lr!r}")
    return "\n".join(lines) + "\n"
