"""Vanilla and PGD adversarial training of the victim models.

The PGD ascent normalizes the input gradient per sample (l2) or takes its
sign (linf), projects onto the epsilon ball around the clean input after
every step, then clips to the pixel box. Clipping only shrinks the
perturbation coordinate-wise, so both constraints hold simultaneously.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import Model, forward_trace
from .optim import make_optimizer
from .tensor import Graph, Tensor, frozen, softmax


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ATConfig:
    norm: str = "l2"
    epsilon: float = 1.0  # pixel units on [0,1] images
    pgd_steps: int = 10
    pgd_step_size: float | None = None  # default 2.5 * eps / steps
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"norm must be 'l2' or 'linf', got '{self.norm}'")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.epsilon > 0 and self.pgd_steps > 0 and self.step_size() <= 0:
            raise ValueError("pgd_step_size must be positive when pgd_steps > 0")

    def step_size(self) -> float:
        if self.pgd_step_size is not None:
            return self.pgd_step_size
        return 2.5 * self.epsilon / max(self.pgd_steps, 1)

    def to_dict(self) -> dict:
        return {"norm": self.norm, "epsilon": self.epsilon, "pgd_steps": self.pgd_steps,
                "pgd_step_size": self.pgd_step_size, "random_start": self.random_start}

    @classmethod
    def from_dict(cls, d):
        return cls(**d) if d else None


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 0.001})
    at: ATConfig | None = None
    seed: int = 0
    robust_eval: str = "final"  # 'final' | 'every' | 'never'


def _project(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(len(delta), -1)
    norms = np.linalg.norm(flat, axis=1)
    factor = np.ones_like(norms)
    over = norms > eps
    factor[over] = eps / norms[over]
    return (flat * factor[:, None]).reshape(delta.shape)


def pgd_attack(model: Model, images: np.ndarray, labels: np.ndarray, cfg: ATConfig,
               seed: int = 0) -> np.ndarray:
    """Maximize the batch cross-entropy within the epsilon ball; outputs stay
    inside both the ball around the input and the [0,1] box."""
    images = np.asarray(images, dtype=np.float32)
    if cfg.epsilon == 0 or cfg.pgd_steps == 0:
        return images.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(images)
    flat_dim = images[0].size

    if cfg.random_start:
        if cfg.norm == "linf":
            delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=images.shape).astype(np.float32)
        else:
            d = rng.standard_normal(images.shape).astype(np.float32)
            d_flat = d.reshape(n, -1)
            d_flat /= np.linalg.norm(d_flat, axis=1, keepdims=True) + 1e-12
            radius = cfg.epsilon * rng.uniform(0, 1, size=(n, 1)) ** (1.0 / flat_dim)
            delta = (d_flat * radius).astype(np.float32).reshape(images.shape)
    else:
        delta = np.zeros_like(images)
    x = np.clip(images + delta, 0.0, 1.0)

    step = cfg.step_size()
    with frozen(model.params):  # ascent only needs input gradients
        for _ in range(cfg.pgd_steps):
            with Graph() as g:
                xt = Tensor(x, requires_grad=True)
                trace = forward_trace(model, xt, labels)
                g.backward(trace.loss)
            grad = xt.grad
            if grad is None or not np.all(np.isfinite(grad)):
                raise ValueError("pgd_attack: non-finite input gradients")
            if cfg.norm == "linf":
                direction = np.sign(grad)
            else:
                g_flat = grad.reshape(n, -1)
                norms = np.linalg.norm(g_flat, axis=1, keepdims=True)
                direction = (g_flat / np.maximum(norms, 1e-12)).reshape(images.shape)
            x = x + step * direction
            delta = _project(x - images, cfg.norm, cfg.epsilon)
            x = np.clip(images + delta, 0.0, 1.0).astype(np.float32)
    return x


def per_sample_loss(model: Model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-log p_y per sample, computed without tracking."""
    logits = model.predict(np.asarray(images, dtype=np.float32))
    probs = softmax(logits.astype(np.float64))
    return -np.log(probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)])


def evaluate(model: Model, dataset, at: ATConfig | None = None, batch_size: int = 256,
             seed: int = 0) -> float:
    """Fraction of correct argmax predictions, optionally under PGD."""
    correct = 0
    rng = np.random.Generator(np.random.PCG64(seed))
    for i in range(0, len(dataset), batch_size):
        xb = dataset.images[i : i + batch_size]
        yb = dataset.labels[i : i + batch_size]
        if at is not None and at.epsilon > 0:
            xb = pgd_attack(model, xb, yb, at, seed=int(rng.integers(2**63)))
        pred = model.predict(xb).argmax(axis=1)
        correct += int((pred == yb).sum())
    return correct / max(len(dataset), 1)


def train(model: Model, dataset, cfg: TrainConfig, test_dataset=None):
    """Train in place; returns per-epoch history rows.

    With cfg.at set, every gradient step runs on PGD adversarial examples of
    the sampled batch. Aborts with a diagnostic if the loss goes non-finite.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = make_optimizer(model.named_parameters(), cfg.optimizer)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses, accs = [], []
        for start in range(0, len(dataset), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            if cfg.at is not None and cfg.at.epsilon > 0:
                xb = pgd_attack(model, xb, yb, cfg.at, seed=int(rng.integers(2**63)))
                model.zero_grad()
            with Graph() as g:
                trace = forward_trace(model, xb, yb)
                g.backward(trace.loss)
            loss_val = trace.loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch} step {start // cfg.batch_size}")
            losses.append(loss_val)
            accs.append(float((trace.probs.argmax(axis=1) == yb).mean()))
            opt.step()
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "train_acc": float(np.mean(accs)) if accs else float("nan"),
            "test_acc": evaluate(model, test_dataset) if test_dataset is not None else None,
            "robust_acc": None,
        }
        want_robust = cfg.at is not None and test_dataset is not None and (
            cfg.robust_eval == "every" or (cfg.robust_eval == "final" and epoch == cfg.epochs - 1))
        if want_robust:
            row["robust_acc"] = evaluate(model, test_dataset, at=cfg.at, seed=cfg.seed)
        history.append(row)
    return history


def write_history_csv(history: list[dict], path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc", "robust_acc"])
        for row in history:
            writer.writerow([
                row["epoch"],
                f"{row['train_loss']:.6f}",
                f"{row['train_acc']:.6f}",
                "" if row["test_acc"] is None else f"{row['test_acc']:.6f}",
                "" if row["robust_acc"] is None else f"{row['robust_acc']:.6f}",
            ])
