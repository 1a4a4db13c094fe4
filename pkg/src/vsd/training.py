"""Losses, AdamW, gradient clipping and the training loop.

Joint training optimises ``(1 - lambda) * generation + lambda * relation``
per batch.  Pipeline components are trained as separate tasks: the
relation classifier alone, and the description model conditioned on gold
relations (the same code path later consumes predicted relations at
inference, so the golden configuration is literally this model fed gold
labels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from vsd import autodiff as ad
from vsd.autodiff import Tape, Tensor, backward
from vsd.data import VSDInstance, Vocabulary
from vsd.model import ModelMode, VSDModel
from vsd.relations import RELATION_INDEX, RELATIONS, SpatialRelation

__all__ = [
    "TrainConfig",
    "TrainTask",
    "TrainingDiverged",
    "vsd_loss",
    "vsrc_loss",
    "joint_loss",
    "clip_gradients",
    "AdamWState",
    "adamw_step",
    "train",
    "teacher_forcing_ids",
]


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces non-finite numbers."""


class TrainTask(Enum):
    BASE = "base"
    RELATION_VSD = "relation_vsd"
    VSRC = "vsrc"
    JOINT = "joint"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    batch_size: int = 16
    max_epochs: int = 40
    mtl_weight: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # fraction of joint-task instances whose generation term is computed on a
    # gold-relation substituted encoding, keeping round-two decoding in
    # distribution; 0 trains purely on masked inputs
    substitute_gold_rate: float = 0.0

    def __post_init__(self):
        for name in ("learning_rate", "clip_norm", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.mtl_weight <= 1.0:
            raise ValueError(f"mtl_weight {self.mtl_weight} outside [0, 1]")
        if not 0.0 <= self.substitute_gold_rate <= 1.0:
            raise ValueError("substitute_gold_rate outside [0, 1]")


def teacher_forcing_ids(description, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Decoder input ([BOS] + tokens) and shifted target (tokens + [EOS])."""
    ids = vocab.encode(description)
    prefix = np.concatenate(([vocab.BOS], ids))
    target = np.concatenate((ids, [vocab.EOS]))
    return prefix, target


def vsd_loss(logits: Tensor, gold_tokens, pad_id: int = Vocabulary.PAD) -> Tensor:
    """Mean token-level negative log-likelihood, padding excluded."""
    gold = np.asarray(gold_tokens, dtype=np.int64)
    if logits.ndim != 2 or gold.ndim != 1 or logits.shape[0] != gold.shape[0]:
        raise ValueError(
            f"vsd_loss: logits {logits.shape} and gold {gold.shape} lengths do not match"
        )
    keep = gold != pad_id
    n_real = int(keep.sum())
    if n_real == 0:
        raise ValueError("vsd_loss: target contains only padding")
    log_probs = ad.log_softmax(logits, axis=-1)
    picked = ad.take_rows(log_probs, np.where(keep, gold, 0))
    picked = ad.mul(picked, Tensor(keep.astype(np.float64)))
    return ad.scale(ad.sum_values(picked), -1.0 / n_real)


def vsrc_loss(scores: Tensor, gold_relation: SpatialRelation | int) -> Tensor:
    """Cross-entropy of the nine relation scores against the gold class."""
    idx = RELATION_INDEX[gold_relation] if isinstance(gold_relation, SpatialRelation) else int(gold_relation)
    if scores.ndim != 1 or scores.shape[0] != len(RELATIONS):
        raise ValueError(f"vsrc_loss: expected {len(RELATIONS)} scores, got shape {scores.shape}")
    if not 0 <= idx < len(RELATIONS):
        raise ValueError(f"vsrc_loss: invalid class index {idx}")
    log_probs = ad.log_softmax(ad.reshape(scores, (1, len(RELATIONS))), axis=-1)
    return ad.scale(ad.take_rows(log_probs, [idx]).sum(), -1.0)


def joint_loss(l_vsd: Tensor, l_vsrc: Tensor, lam: float) -> Tensor:
    """(1 - lam) * generation loss + lam * relation loss."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"joint_loss: weight {lam} outside [0, 1]")
    return ad.add(ad.scale(l_vsd, 1.0 - lam), ad.scale(l_vsrc, lam))


def clip_gradients(params, max_norm: float = 5.0) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the applied factor, min(1, max_norm / norm).  Non-finite
    gradients abort the step.
    """
    tensors = [t for t in params if t.grad is not None]
    total = 0.0
    for t in tensors:
        s = float(np.sum(t.grad * t.grad))
        if not math.isfinite(s):
            raise TrainingDiverged("non-finite gradient encountered during clipping")
        total += s
    norm = math.sqrt(total)
    factor = 1.0 if norm <= max_norm else max_norm / norm
    if factor < 1.0:
        for t in tensors:
            t.grad *= factor
    return factor


@dataclass
class AdamWState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(state: AdamWState, named_params, config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over (name, tensor) pairs.

    Decay multiplies parameters by (1 - lr * wd) before the moment-based
    update; parameters whose grad is None are skipped entirely.
    """
    state.step += 1
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2, eps = config.beta1, config.beta2, config.eps
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if wd:
            p.data *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TraceRow:
    epoch: int
    step: int
    loss: float
    vsd: float | None
    vsrc: float | None

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "loss": self.loss,
                "vsd": self.vsd, "vsrc": self.vsrc}


def _instance_losses(
    model: VSDModel,
    inst: VSDInstance,
    task: TrainTask,
    cfg: TrainConfig,
    rng: np.random.Generator,
    dropout_rng: np.random.Generator | None,
    relation_provider: Callable[[VSDInstance], SpatialRelation] | None,
) -> tuple[Tensor | None, Tensor | None]:
    """Per-instance (generation, relation) loss terms; either may be None."""
    vocab = model.vocab
    if task == TrainTask.VSRC:
        scores = model.vsrc_scores_for(inst, dropout_rng=dropout_rng)
        return None, vsrc_loss(scores, inst.relation)
    prefix, target = teacher_forcing_ids(inst.description, vocab)
    if task == TrainTask.BASE:
        out = model.forward_vsd(inst, ModelMode.BASE, None, prefix, dropout_rng=dropout_rng)
        return vsd_loss(out.vsd_logits, target), None
    if task == TrainTask.RELATION_VSD:
        rel = relation_provider(inst) if relation_provider is not None else inst.relation
        out = model.forward_vsd(inst, ModelMode.PIPELINE, rel, prefix, dropout_rng=dropout_rng)
        return vsd_loss(out.vsd_logits, target), None
    # JOINT: masked encoding feeds both heads; optionally train the
    # generation term on a gold-substituted encoding instead
    if cfg.substitute_gold_rate > 0.0 and rng.random() < cfg.substitute_gold_rate:
        scores = model.vsrc_scores_for(inst, dropout_rng=dropout_rng)
        out = model.forward_vsd(
            inst, ModelMode.END2END, inst.relation, prefix, dropout_rng=dropout_rng
        )
        return vsd_loss(out.vsd_logits, target), vsrc_loss(scores, inst.relation)
    out = model.forward_vsd(inst, ModelMode.END2END, None, prefix, dropout_rng=dropout_rng)
    return vsd_loss(out.vsd_logits, target), vsrc_loss(out.vsrc_scores, inst.relation)


def train(
    model: VSDModel,
    instances: list[VSDInstance],
    task: TrainTask,
    config: TrainConfig,
    *,
    relation_provider: Callable[[VSDInstance], SpatialRelation] | None = None,
    epoch_callback: Callable[[VSDModel, int, dict], None] | None = None,
    use_dropout: bool = True,
) -> list[TraceRow]:
    """Optimise the model in place; returns the per-step loss trace.

    Epoch-level shuffling draws from one generator seeded by the config,
    the last partial batch is kept, and a non-finite loss aborts with the
    offending batch named.
    """
    if not instances:
        raise ValueError("train: dataset is empty")
    rng = np.random.default_rng(config.seed)
    dropout_rng = (
        np.random.default_rng(config.seed + 0x0D0D)
        if use_dropout and model.config.transformer.dropout_rate > 0
        else None
    )
    opt_state = AdamWState()
    named = model.named_parameters()
    tensors = [t for _, t in named]
    trace: list[TraceRow] = []
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(instances))
        epoch_losses = []
        for start in range(0, len(instances), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch = [instances[int(i)] for i in batch_idx]
            inv = 1.0 / len(batch)
            vsd_vals, vsrc_vals = [], []
            with Tape() as tape:
                total = None
                for inst in batch:
                    l_vsd, l_vsrc = _instance_losses(
                        model, inst, task, config, rng, dropout_rng, relation_provider
                    )
                    if task == TrainTask.JOINT and l_vsrc is not None and l_vsd is not None:
                        term = joint_loss(l_vsd, l_vsrc, config.mtl_weight)
                    elif task == TrainTask.JOINT and l_vsrc is None:
                        term = ad.scale(l_vsd, 1.0 - config.mtl_weight)
                    else:
                        term = l_vsd if l_vsd is not None else l_vsrc
                    if l_vsd is not None:
                        vsd_vals.append(float(l_vsd.data))
                    if l_vsrc is not None:
                        vsrc_vals.append(float(l_vsrc.data))
                    term = ad.scale(term, inv)
                    total = term if total is None else ad.add(total, term)
            loss_val = float(total.data)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}, batch starting at {start}"
                )
            model.zero_grads()
            backward(tape, total)
            clip_gradients(tensors, config.clip_norm)
            adamw_step(opt_state, named, config)
            trace.append(TraceRow(
                epoch=epoch,
                step=step,
                loss=loss_val,
                vsd=float(np.mean(vsd_vals)) if vsd_vals else None,
                vsrc=float(np.mean(vsrc_vals)) if vsrc_vals else None,
            ))
            epoch_losses.append(loss_val)
            step += 1
        if epoch_callback is not None:
            epoch_callback(model, epoch, {"mean_loss": float(np.mean(epoch_losses))})
    return trace
