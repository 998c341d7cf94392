"""Losses, optimizer, augmentation, and the train/evaluate loops.

The objective is 0.3 * cross-entropy + 0.7 * soft Dice by default. Dice is
averaged over all classes including background; reported evaluation Dice
excludes background (both appear in the evaluation report). Training is
bit-deterministic for a fixed (config, seed): parameter init, shuffling,
and augmentation each draw from their own seeded stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .metrics import dice, evaluate_masks
from .tensor import (Tensor, exp, log_softmax_axis, mul, no_grad, softmax_axis,
                     tsum)


@dataclass
class LossWeights:
    ce_weight: float = 0.3
    dice_weight: float = 0.7
    dice_smooth: float = 1.0

    def validate(self):
        if self.ce_weight < 0 or self.dice_weight < 0 or self.dice_smooth < 0:
            raise ConfigError("loss weights and smoothing must be non-negative")


def one_hot(targets, num_classes, dtype):
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= num_classes:
        raise DataError(
            f"labels must lie in [0, {num_classes}), got "
            f"[{targets.min()}, {targets.max()}]")
    b, h, w = targets.shape
    onehot = np.zeros((b, num_classes, h, w), dtype=dtype)
    bi = np.arange(b)[:, None, None]
    hi = np.arange(h)[None, :, None]
    wi = np.arange(w)[None, None, :]
    onehot[bi, targets, hi, wi] = 1.0
    return onehot


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean per-pixel cross-entropy of softmaxed logits."""
    b, k, h, w = logits.data.shape
    g = Tensor(one_hot(targets, k, logits.data.dtype))
    picked = tsum(mul(log_softmax_axis(logits, axis=1), g))
    return picked * (-1.0 / (b * h * w))


def dice_loss(logits: Tensor, targets, smooth=1.0) -> Tensor:
    """1 - mean over classes of the smoothed soft Dice score."""
    b, k, h, w = logits.data.shape
    g = Tensor(one_hot(targets, k, logits.data.dtype))
    p = softmax_axis(logits, axis=1)
    inter = tsum(mul(p, g), axis=(0, 2, 3))
    psum = tsum(p, axis=(0, 2, 3))
    gsum = tsum(g, axis=(0, 2, 3))
    score = (inter * 2.0 + smooth) / (psum + gsum + smooth)
    return 1.0 - tsum(score) * (1.0 / k)


def _soft_dice_from_probs(p, g, k, smooth):
    inter = tsum(mul(p, g), axis=(0, 2, 3))
    psum = tsum(p, axis=(0, 2, 3))
    gsum = tsum(g, axis=(0, 2, 3))
    score = (inter * 2.0 + smooth) / (psum + gsum + smooth)
    return 1.0 - tsum(score) * (1.0 / k)


def combined_loss(logits: Tensor, targets, weights: LossWeights) -> Tensor:
    """ce_weight * cross-entropy + dice_weight * soft-Dice loss; shares one
    log-softmax pass between the two terms."""
    weights.validate()
    b, k, h, w = logits.data.shape
    g = Tensor(one_hot(targets, k, logits.data.dtype))
    lp = log_softmax_axis(logits, axis=1)
    ce = tsum(mul(lp, g)) * (-1.0 / (b * h * w))
    dl = _soft_dice_from_probs(exp(lp), g, k, weights.dice_smooth)
    return ce * weights.ce_weight + dl * weights.dice_weight


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    Gradients are left untouched; call zero_grad() between steps.
    """

    def __init__(self, params, learning_rate=1e-4, weight_decay=1e-4,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.lr = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient; "
                                    "run backward before step")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.data = p.data - self.lr * update - (self.lr * self.weight_decay) * p.data

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {"step": self.step_count,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state(self, state):
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name]).copy()
            self.v[name] = np.asarray(state["v"][name]).copy()


# ------------------------------------------------------------- augmentation

def apply_dihedral(image, mask, quarter_turns, flip_h, flip_v):
    """Rotate by right angles then optionally flip, identically on the
    image [C,H,W] and mask [H,W]. Lossless: pure pixel permutation."""
    img = np.rot90(image, quarter_turns, axes=(1, 2))
    msk = np.rot90(mask, quarter_turns, axes=(0, 1))
    if flip_h:
        img = img[:, :, ::-1]
        msk = msk[:, ::-1]
    if flip_v:
        img = img[:, ::-1, :]
        msk = msk[::-1, :]
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def augment_pair(image, mask, rng):
    """Random right-angle rotation plus horizontal/vertical flips; per-class
    pixel counts are preserved exactly."""
    k = int(rng.integers(0, 4))
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    return apply_dihedral(image, mask, k, flip_h, flip_v)


# ------------------------------------------------------------ train / eval

@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss: LossWeights = field(default_factory=LossWeights)
    augment: bool = True

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        self.loss.validate()


@dataclass
class TrainResult:
    history: list           # one dict per epoch
    best_epoch: int         # 0 means the initial parameters were kept
    best_val_dice: float
    optimizer_state: dict


def _predict(model, dataset, indices, batch_size):
    """Argmax label maps for the given samples, batched, without recording
    an autodiff graph."""
    preds = []
    eval_batch = max(batch_size, 8)
    with no_grad():
        for lo in range(0, len(indices), eval_batch):
            chunk = indices[lo:lo + eval_batch]
            xb = np.stack([dataset.images[i] for i in chunk]).astype(model.dtype)
            logits = model.forward(Tensor(xb)).logits.data
            preds.extend(np.argmax(logits, axis=1))
    return preds


def mean_foreground_dice(model, dataset, indices, batch_size=4):
    preds = _predict(model, dataset, indices, batch_size)
    scores = []
    for pred, i in zip(preds, indices):
        gt = dataset.masks[i]
        per_class = [dice(pred == c, gt == c) for c in range(1, dataset.num_classes)]
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def train_model(model, dataset, settings: TrainSettings) -> TrainResult:
    """Epochs of shuffled mini-batches; keeps the best-validation-Dice
    parameters (ties broken by the earlier epoch) and restores them into
    the model before returning."""
    settings.validate()
    train_idx = dataset.splits["train"]
    val_idx = dataset.splits["val"]
    if not train_idx or not val_idx:
        raise ConfigError("train and val splits must be non-empty")

    opt = AdamW(model.trainable_parameters(), learning_rate=settings.learning_rate,
                weight_decay=settings.weight_decay, beta1=settings.beta1,
                beta2=settings.beta2, epsilon=settings.adam_epsilon)
    rng_shuffle = np.random.default_rng([settings.seed, 4])
    rng_aug = np.random.default_rng([settings.seed, 5])

    best_state = model.state()
    best_dice = -1.0
    best_epoch = 0
    history = []
    for epoch in range(1, settings.epochs + 1):
        order = [train_idx[i] for i in rng_shuffle.permutation(len(train_idx))]
        losses = []
        for lo in range(0, len(order), settings.batch_size):
            chunk = order[lo:lo + settings.batch_size]
            imgs, msks = [], []
            for i in chunk:
                img, msk = dataset.images[i], dataset.masks[i]
                if settings.augment:
                    img, msk = augment_pair(img, msk, rng_aug)
                imgs.append(img)
                msks.append(msk)
            xb = Tensor(np.stack(imgs).astype(model.dtype))
            targets = np.stack(msks)
            loss = combined_loss(model.forward(xb).logits, targets, settings.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_dice = mean_foreground_dice(model, dataset, val_idx, settings.batch_size)
        if val_dice > best_dice:
            best_dice = val_dice
            best_epoch = epoch
            best_state = model.state()
        history.append({"epoch": epoch,
                        "train_loss": float(np.mean(losses)),
                        "val_dice_fg": val_dice})
    model.load_state(best_state)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_dice=max(best_dice, 0.0),
                       optimizer_state=opt.state())


@dataclass
class EvaluationReport:
    """Split-level metrics averaged over samples.

    Means are over foreground classes; ``mean_dice_with_background``
    restates Dice including class 0 for completeness.
    """

    n_samples: int
    per_class_dice: list
    per_class_iou: list
    per_class_hd95: list
    mean_dice: float
    mean_iou: float
    mean_hd95: float
    mean_dice_with_background: float
    flags: list


def evaluate_model(model, dataset, split="test", batch_size=4) -> EvaluationReport:
    indices = dataset.splits[split]
    if not indices:
        raise ConfigError(f"split {split!r} is empty")
    preds = _predict(model, dataset, indices, batch_size)
    k = dataset.num_classes
    dices = np.zeros((len(indices), k))
    ious = np.zeros_like(dices)
    hds = np.zeros_like(dices)
    flags = []
    for row, (pred, i) in enumerate(zip(preds, indices)):
        report = evaluate_masks(pred, dataset.masks[i], k)
        dices[row] = report.per_class_dice
        ious[row] = report.per_class_iou
        hds[row] = report.per_class_hd95
        flags.extend(f"sample {i}: {f}" for f in report.flags)
    per_dice = dices.mean(axis=0)
    per_iou = ious.mean(axis=0)
    per_hd = hds.mean(axis=0)
    return EvaluationReport(
        n_samples=len(indices),
        per_class_dice=[float(v) for v in per_dice],
        per_class_iou=[float(v) for v in per_iou],
        per_class_hd95=[float(v) for v in per_hd],
        mean_dice=float(per_dice[1:].mean()),
        mean_iou=float(per_iou[1:].mean()),
        mean_hd95=float(per_hd[1:].mean()),
        mean_dice_with_background=float(per_dice.mean()),
        flags=flags,
    )
