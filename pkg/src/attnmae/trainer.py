"""Optimization loop: Adam with decoupled weight decay, seeded batching,
metric logging, and checkpointing.

Every run is a pure function of (seed, config, dataset): shuffles, mask
draws, and parameter init all come from streams derived from the seed,
and all reductions are deterministic, so identical inputs give identical
checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import masker
from .data import Batch, Dataset
from .model import MaskedAutoencoder
from .rng import Rng

__all__ = ["TrainConfig", "AdamW", "train_step", "pretrain_loop",
           "finetune_loop", "evaluate", "NonFiniteLossError"]

_SHUFFLE_TAG = 0x53485546  # "SHUF"
_MASK_TAG = 0x4D41534B     # "MASK"
_HEAD_TAG = 0x48454144     # "HEAD"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 256
    mask_ratio: float = 0.2
    warmup_frac: float = 0.01
    seed: int = 0
    mask_mode: str = "guided"   # guided | random | none (none = supervised only)
    grad_clip: float | None = None
    checkpoint_every: int = 0   # 0 = final checkpoint only

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.mask_mode in ("guided", "random") and not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1) when masking is enabled")
        if self.mask_mode not in ("guided", "random", "none"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")


class AdamW:
    """Adam moments with weight decay decoupled from the step direction.

    The decay is applied first (theta <- theta - lr*wd*theta), then the
    bias-corrected Adam direction; with zero gradients parameters shrink
    exactly geometrically.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ag.Tensor], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        decay = 1.0 - lr * cfg.weight_decay
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.weight_decay:
                p.data *= decay
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Linear warmup over the first warmup_frac of steps, then constant."""
    warm = int(np.ceil(cfg.warmup_frac * total))
    if warm > 0 and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr


def _grad_norm(params: dict[str, ag.Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.add.reduce((p.grad * p.grad).reshape(-1)))
    return float(np.sqrt(total))


def _clip_grads(params: dict[str, ag.Tensor], max_norm: float) -> None:
    norm = _grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor


def _random_masks(batch: Batch, r: float, rng: Rng) -> list[masker.MaskSpec]:
    pads = np.asarray(batch.pads, dtype=bool)
    return [
        masker.random_mask(batch.tokens.shape[1], r, rng.child(i),
                           pad=pads[i] if pads[i].any() else None)
        for i in range(batch.tokens.shape[0])
    ]


def train_step(model: MaskedAutoencoder, batch: Batch, cfg: TrainConfig,
               rng: Rng, opt: AdamW, step: int,
               total_steps: int | None = None) -> tuple[float, float]:
    """One forward/backward/update; returns (loss, mean mask count)."""
    ag.reset_tape()
    if cfg.mask_mode == "random":
        out = model.pretrain_forward(batch, cfg.mask_ratio,
                                     masks=_random_masks(batch, cfg.mask_ratio, rng))
    else:
        out = model.pretrain_forward(batch, cfg.mask_ratio, rng=rng)
    loss = out.loss.item()
    lr = _lr_at(cfg, step, total_steps if total_steps is not None else cfg.steps)
    params = model.parameters()
    if not np.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss at step={step} lr={lr:g} loss={loss!r} "
            f"grad_norm={_grad_norm(params):g}")
    ag.backward(out.loss)
    if cfg.grad_clip is not None:
        _clip_grads(params, cfg.grad_clip)
    opt.step(params, lr)
    counts = [len(spec.masked) for spec in out.masks]
    return loss, float(np.mean(counts))


def _batch_indices(n_samples: int, batch_size: int, shuffle_rng: Rng):
    """Shuffled full batches; a dataset smaller than one batch is one batch."""
    if n_samples <= batch_size:
        yield np.arange(n_samples, dtype=np.int64)
        return
    perm = shuffle_rng.permutation(n_samples)
    for start in range(0, n_samples - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]


def pretrain_loop(model: MaskedAutoencoder, dataset: Dataset, cfg: TrainConfig,
                  log_path, ckpt_path) -> list[float]:
    """Run cfg.steps masked-pretraining updates over shuffled epochs.

    Appends one metrics line per step (step, loss, realized mask count,
    wall ms, tab-separated) and writes the checkpoint at the end plus
    every checkpoint_every steps. Returns the per-step losses.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cfg.mask_mode == "none":
        raise ValueError("pretraining requires masking (guided or random)")
    master = Rng(cfg.seed)
    shuffle_rng = master.child(_SHUFFLE_TAG)
    mask_rng = master.child(_MASK_TAG)
    opt = AdamW(cfg)
    losses: list[float] = []
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        while step < cfg.steps:
            for idx in _batch_indices(len(dataset), cfg.batch_size, shuffle_rng):
                if step >= cfg.steps:
                    break
                t0 = time.perf_counter()
                loss, mask_count = train_step(
                    model, dataset.batch(idx), cfg, mask_rng.child(step), opt,
                    step, cfg.steps)
                wall_ms = (time.perf_counter() - t0) * 1e3
                log.write(f"{step}\t{loss!r}\t{mask_count:g}\t{wall_ms:.3f}\n")
                losses.append(loss)
                step += 1
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    model.save(ckpt_path)
    model.save(ckpt_path)
    return losses


def finetune_loop(model: MaskedAutoencoder, train_ds: Dataset, val_ds: Dataset,
                  cfg: TrainConfig, task: str = "classify") -> dict:
    """Supervised training of the pooled head plus encoder.

    Returns final validation metrics: val_loss plus accuracy (classify)
    or rmse (regress).
    """
    if len(train_ds) == 0:
        raise ValueError("no labeled samples to fine-tune on")
    if train_ds.labels is None:
        raise ValueError("fine-tuning dataset has no labels")
    master = Rng(cfg.seed)
    if task == "classify":
        out_dim = int(np.max(train_ds.labels)) + 1
        out_dim = max(out_dim, 2)
    elif task == "regress":
        out_dim = 1
    else:
        raise ValueError(f"unknown task {task!r}")
    model.ensure_task_head(out_dim, master.child(_HEAD_TAG))
    shuffle_rng = master.child(_SHUFFLE_TAG)
    opt = AdamW(cfg)
    params = model.parameters()
    step = 0
    while step < cfg.steps:
        for idx in _batch_indices(len(train_ds), cfg.batch_size, shuffle_rng):
            if step >= cfg.steps:
                break
            ag.reset_tape()
            _, loss = model.finetune_forward(train_ds.batch(idx))
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss at step={step}")
            ag.backward(loss)
            if cfg.grad_clip is not None:
                _clip_grads(params, cfg.grad_clip)
            opt.step(params, _lr_at(cfg, step, cfg.steps))
            step += 1
    metric_name = "accuracy" if task == "classify" else "rmse"
    result = {
        "val_loss": validation_loss(model, val_ds),
        metric_name: evaluate(model, val_ds, metric_name),
    }
    return result


def validation_loss(model: MaskedAutoencoder, dataset: Dataset,
                    batch_size: int = 256) -> float:
    """Mean supervised loss over the dataset, gradient-free."""
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    total, count = 0.0, 0
    with ag.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            _, loss = model.finetune_forward(dataset.batch(idx))
            total += loss.item() * len(idx)
            count += len(idx)
    return total / count


def evaluate(model: MaskedAutoencoder, dataset: Dataset, metric: str,
             batch_size: int = 256) -> float:
    """Deterministic full-dataset metric: accuracy or rmse."""
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    if model.task_head is None:
        raise ValueError("model has no task head to evaluate")
    if metric == "accuracy" and model.task_head.out_dim < 2:
        raise ValueError("accuracy requires a classification head")
    if metric == "rmse" and model.task_head.out_dim != 1:
        raise ValueError("rmse requires a regression head")
    if metric not in ("accuracy", "rmse"):
        raise ValueError(f"unknown metric {metric!r}")
    hits, sq_err, count = 0.0, 0.0, 0
    with ag.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            out, _ = model.finetune_forward(dataset.batch(idx))
            labels = dataset.labels[idx]
            if metric == "accuracy":
                hits += float(np.add.reduce(
                    (np.argmax(out.data, axis=1) == labels.astype(np.int64)).astype(np.float64)))
            else:
                diff = out.data[:, 0] - labels.astype(np.float64)
                sq_err += float(np.add.reduce(diff * diff))
            count += len(idx)
    return hits / count if metric == "accuracy" else float(np.sqrt(sq_err / count))
