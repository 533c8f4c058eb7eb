"""Minibatch SGD for the tiny LM, plus distillation of a reference model
toward a target's logits."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import TrainingDiverged, ValidationError
from .model import TinyLM, batch_contexts, ce_from_arrays, distill_from_arrays

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.3
    batch_size: int = 64
    epochs: int = 8
    seed: int = 0
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    clip: float = 5.0
    warmup_frac: float = 0.05
    weight_decay: float = 0.0
    max_steps: int | None = None  # stop early after this many updates

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be positive", field="lr")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1", field="epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", field="batch_size")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}", field="optimizer")
        if not 0 <= self.warmup_frac < 1:
            raise ValidationError("warmup_frac must be in [0, 1)", field="warmup_frac")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0", field="weight_decay")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValidationError("max_steps must be >= 0", field="max_steps")


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.7
    tau: float = 2.0
    train: TrainConfig = TrainConfig(lr=1.0, epochs=1, batch_size=64)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lambda must be in [0, 1]", field="lambda")
        if not self.tau > 0:
            raise ValidationError("tau must be positive", field="tau")


class _Optimizer:
    def __init__(self, model: TinyLM, cfg: TrainConfig, total_steps: int):
        self.model = model
        self.cfg = cfg
        self.total = max(1, total_steps)
        self.warmup = int(cfg.warmup_frac * self.total)
        self.step_no = 0
        self.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    def lr(self) -> float:
        # linear warmup, then linear decay to 10% of the peak
        s = self.step_no
        if self.warmup and s < self.warmup:
            return self.cfg.lr * (s + 1) / self.warmup
        frac = (s - self.warmup) / max(1, self.total - self.warmup)
        return self.cfg.lr * (1.0 - 0.9 * min(1.0, frac))

    def step(self, grads: dict) -> None:
        cfg = self.cfg
        if cfg.clip and cfg.clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.clip:
                grads = {k: g * (cfg.clip / norm) for k, g in grads.items()}
        lr = self.lr()
        for k, g in grads.items():
            if cfg.weight_decay:
                g = g + cfg.weight_decay * self.model.params[k]
            if cfg.optimizer == "sgd_momentum":
                v = self.velocity[k]
                v *= cfg.momentum
                v += g
                self.model.params[k] -= lr * v
            else:
                self.model.params[k] -= lr * g
        self.step_no += 1


def _run(model: TinyLM, n_positions: int, cfg: TrainConfig, loss_fn) -> list[float]:
    rng = np.random.default_rng([cfg.seed, 7])
    steps_per_epoch = -(-n_positions // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    opt = _Optimizer(model, cfg, total)
    history = []
    for epoch in range(cfg.epochs):
        if opt.step_no >= total:
            break
        order = rng.permutation(n_positions)
        run_loss = 0.0
        seen = 0
        for start in range(0, n_positions, cfg.batch_size):
            if opt.step_no >= total:
                break
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_fn(idx)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {opt.step_no} (lr={opt.lr():.3g})")
            opt.step(grads)
            run_loss += loss * len(idx)
            seen += len(idx)
        history.append(run_loss / max(seen, 1))
        log.debug("epoch %d mean loss %.5f", epoch, history[-1])
    return history


def train(model: TinyLM, corpus, config: TrainConfig) -> TinyLM:
    """Return a trained copy of ``model``; ``corpus`` is a list of token-id
    documents.  The input model is left untouched."""
    model = model.copy()
    ctx, tgt = batch_contexts(corpus, model.context)
    if len(tgt) == 0:
        raise ValueError("empty training corpus")
    model.train_history = _run(model, len(tgt), config, lambda idx: ce_from_arrays(model, ctx[idx], tgt[idx]))
    return model


def distill_reference(reference: TinyLM, target: TinyLM, suspect, config: DistillConfig) -> TinyLM:
    """Fine-tune a copy of ``reference`` on ``suspect`` while matching the
    target's temperature-softened next-token distributions."""
    if reference.vocab != target.vocab:
        raise ValidationError("reference and target vocabularies differ", field="vocab")
    student = reference.copy()
    ctx, tgt = batch_contexts(suspect, student.context)
    t_ctx = ctx if target.context == student.context else batch_contexts(suspect, target.context)[0]
    teacher_logits = target.logits(t_ctx)
    lam, tau = config.lam, config.tau
    student.train_history = _run(
        student, len(tgt), config.train,
        lambda idx: distill_from_arrays(student, ctx[idx], tgt[idx], teacher_logits[idx], lam, tau),
    )
    return student


def perplexity(model: TinyLM, docs) -> float:
    ctx, tgt = batch_contexts(docs, model.context)
    loss, _ = ce_from_arrays(model, ctx, tgt, need_grad=False)
    return float(np.exp(loss))
