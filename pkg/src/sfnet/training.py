"""Loss, optimiser, schedule, augmentation, training loop and metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from sfnet.autodiff import Tensor, no_grad, record

TRANSFORMS = ("random_crop", "horizontal_flip", "color_jitter", "invert", "random_erase", "mixup")

DEFAULT_PARAMS = {
    "random_crop": {"pad": 4},
    "horizontal_flip": {"p": 0.5},
    "color_jitter": {"low": 0.8, "high": 1.2},
    "invert": {"p": 0.5},
    "random_erase": {"p": 0.5, "max_area": 0.25},
    "mixup": {"alpha": 0.2},
}


# --------------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy.

    ``labels`` is either an integer sequence (hard targets) or an ``N×K``
    array of per-class weights (soft targets, rows summing to one).
    """
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"logits must be N×K, got shape {z.shape}")
    n, k = z.shape
    targets = _targets(labels, n, k).astype(z.dtype)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    loss = -(targets * log_p).sum(dtype=np.float64) / n

    def backward(g):
        return ((np.exp(log_p) - targets) * (g / n),)

    return record("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), backward)


def _targets(labels, n: int, k: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape != (n, k):
            raise ValueError(f"soft targets have shape {arr.shape}, expected {(n, k)}")
        return arr
    if arr.shape != (n,):
        raise ValueError(f"expected {n} labels, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("hard labels must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    return np.eye(k)[arr]


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimState:
    m: list
    v: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-4, **kw) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """One bias-corrected Adam update, applied in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimiser state differ in length")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if total == 0:
        return lr0
    return max(lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total)), 0.0)


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationPolicy:
    transforms: tuple = ()
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        names = tuple(self.transforms)
        unknown = [t for t in names if t not in TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown transforms {unknown}; choose from {TRANSFORMS}")
        # mixup is a batch-level step and always runs last
        if "mixup" in names:
            names = tuple(t for t in names if t != "mixup") + ("mixup",)
        object.__setattr__(self, "transforms", names)

    @classmethod
    def named(cls, name: str, seed: int = 0) -> "AugmentationPolicy":
        return cls((), seed=seed) if name == "none" else cls((name,), seed=seed)

    def param(self, transform: str, key: str):
        return self.params.get(transform, {}).get(key, DEFAULT_PARAMS[transform][key])

    @property
    def image_transforms(self) -> tuple:
        return tuple(t for t in self.transforms if t != "mixup")

    @property
    def uses_mixup(self) -> bool:
        return "mixup" in self.transforms

    def to_dict(self) -> dict:
        return {"transforms": list(self.transforms), "params": self.params, "seed": self.seed}


def random_crop(img: np.ndarray, rng: np.random.Generator, pad: int = 4,
                size: Optional[tuple] = None) -> np.ndarray:
    c, h, w = img.shape
    ch, cw = size or (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    y = int(rng.integers(0, h + 2 * pad - ch + 1))
    x = int(rng.integers(0, w + 2 * pad - cw + 1))
    return padded[:, y:y + ch, x:x + cw].copy()


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def color_jitter(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * np.float32(factor), 0.0, 1.0)


def invert(img: np.ndarray) -> np.ndarray:
    return (1.0 - img).astype(img.dtype)


def random_erase(img: np.ndarray, rng: np.random.Generator, max_area: float = 0.25) -> tuple:
    """Fill a random rectangle covering at most ``max_area`` of the image with the channel means.

    Returns the new image and the rectangle as ``(y0, y1, x0, x1)``.
    """
    _, h, w = img.shape
    area = rng.uniform(0.02, max_area) * h * w
    aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
    eh = int(min(h, max(1, round(math.sqrt(area * aspect)))))
    ew = int(min(w, max(1, round(math.sqrt(area / aspect)))))
    while eh * ew > max_area * h * w and (eh > 1 or ew > 1):
        if eh >= ew:
            eh -= 1
        else:
            ew -= 1
    y0 = int(rng.integers(0, h - eh + 1))
    x0 = int(rng.integers(0, w - ew + 1))
    out = img.copy()
    out[:, y0:y0 + eh, x0:x0 + ew] = img.mean(axis=(1, 2), dtype=np.float64)[:, None, None]
    return out, (y0, y0 + eh, x0, x0 + ew)


def augment(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator,
            force: bool = False) -> np.ndarray:
    """Apply the per-image transforms of ``policy`` in order.

    ``force`` makes every probabilistic transform fire, which is handy for
    checking individual transforms deterministically.
    """
    out = np.asarray(img, dtype=np.float32)
    for name in policy.image_transforms:
        if name == "random_crop":
            out = random_crop(out, rng, pad=policy.param(name, "pad"))
        elif name == "color_jitter":
            out = color_jitter(out, rng.uniform(policy.param(name, "low"), policy.param(name, "high")))
        else:
            fire = rng.random() < policy.param(name, "p")
            if not (fire or force):
                continue
            if name == "horizontal_flip":
                out = horizontal_flip(out)
            elif name == "invert":
                out = invert(out)
            elif name == "random_erase":
                out = random_erase(out, rng, policy.param(name, "max_area"))[0]
    return np.clip(out, 0.0, 1.0)


def mixup(batch: np.ndarray, labels, alpha: float, rng: np.random.Generator,
          lam: Optional[float] = None, num_classes: int = 2) -> tuple:
    """Blend each image with a permuted partner; returns ``(mixed, soft_targets, lam, perm)``."""
    n = batch.shape[0]
    if n < 2:
        raise ValueError("mixup needs at least two samples")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(n)
    onehot = np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]
    lam32 = np.float32(lam)
    mixed = lam32 * batch + (np.float32(1.0) - lam32) * batch[perm]
    soft = lam * onehot + (1.0 - lam) * onehot[perm]
    return mixed.astype(batch.dtype), soft, lam, perm


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")

    @classmethod
    def from_predictions(cls, predictions, labels) -> "Metrics":
        p = np.asarray(predictions, dtype=np.int64)
        y = np.asarray(labels, dtype=np.int64)
        if p.shape != y.shape:
            raise ValueError("predictions and labels differ in length")
        return cls(int(np.sum((p == 1) & (y == 1))), int(np.sum((p == 1) & (y == 0))),
                   int(np.sum((p == 0) & (y == 1))), int(np.sum((p == 0) & (y == 0))))

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @staticmethod
    def _ratio(num: float, den: float) -> float:
        return num / den if den else 0.0

    @property
    def oa(self) -> float:
        return self._ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return self._ratio(2 * p * r, p + r)

    @property
    def undefined(self) -> frozenset:
        """Names of metrics whose denominator was zero (reported as 0)."""
        flags = set()
        if self.total == 0:
            flags.add("oa")
        if self.tp + self.fp == 0:
            flags.add("precision")
        if self.tp + self.fn == 0:
            flags.add("recall")
        if self.precision + self.recall == 0:
            flags.add("f1")
        return frozenset(flags)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "oa": self.oa, "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "undefined": sorted(self.undefined)}


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; exact ties go to class 0."""
    return logits.argmax(axis=1)


def evaluate(model, images: np.ndarray, labels, batch_size: int = 32) -> Metrics:
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    total = Metrics(0, 0, 0, 0)
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                logits = model(Tensor(images[i:i + batch_size])).data
                total = total + Metrics.from_predictions(predict(logits), labels[i:i + batch_size])
    finally:
        model.train(was_training)
    return total


# ------------------------------------------------------------ training loop

@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    losses: list
    lrs: list
    seconds: float

    @property
    def lr(self) -> float:
        return self.lrs[-1] if self.lrs else float("nan")


class Trainer:
    """Owns the optimiser state, schedule position and RNG stream of a run."""

    def __init__(self, model, policy: AugmentationPolicy, epochs: int, steps_per_epoch: int,
                 lr0: float = 1e-4, seed: int = 0, batch_size: int = 16):
        self.model = model
        self.policy = policy
        self.params = model.parameters()
        self.optim = OptimState.for_params(self.params, lr=lr0)
        self.lr0 = lr0
        self.batch_size = batch_size
        self.total_steps = epochs * steps_per_epoch
        self.rng = np.random.default_rng([seed, policy.seed])
        self.epoch = 0

    def step(self, x: np.ndarray, y: np.ndarray) -> tuple:
        n = len(x)
        if self.policy.image_transforms:
            x = np.stack([augment(img, self.policy, self.rng) for img in x])
        targets = y
        if self.policy.uses_mixup and n >= 2:
            x, targets, _, _ = mixup(x, y, self.policy.param("mixup", "alpha"), self.rng)
        lr = cosine_lr(min(self.optim.t, self.total_steps), self.total_steps, self.lr0)
        self.optim.lr = lr
        self.model.zero_grad()
        loss = cross_entropy(self.model(Tensor(x)), targets)
        loss.backward()
        adam_step(self.params, [p.grad for p in self.params], self.optim)
        return float(loss.data), lr

    def train_epoch(self, images: np.ndarray, labels: np.ndarray,
                    on_step: Optional[Callable[[dict], None]] = None) -> EpochStats:
        if len(images) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.model.train()
        start = time.perf_counter()
        order = self.rng.permutation(len(images))
        losses, lrs = [], []
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            loss, lr = self.step(images[idx], labels[idx])
            losses.append(loss)
            lrs.append(lr)
            if on_step is not None:
                on_step({"epoch": self.epoch + 1, "step": self.optim.t, "loss": loss, "lr": lr,
                         "wall_time": time.perf_counter() - start})
        self.epoch += 1
        return EpochStats(self.epoch, float(np.mean(losses)), losses, lrs,
                          time.perf_counter() - start)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_epoch(model, images: np.ndarray, labels: np.ndarray, policy: AugmentationPolicy,
                trainer: Trainer) -> EpochStats:
    """Functional wrapper over :meth:`Trainer.train_epoch`."""
    if trainer.model is not model or trainer.policy != policy:
        raise ValueError("trainer was built for a different model or policy")
    return trainer.train_epoch(images, labels)

