"""Losses, a from-scratch Adam, low-resource data mixing, and training.

The objective interpolates two cross-entropies: a Bernoulli loss over every
admissible arc cell (gradients flow through the unrolled MFVI iterations)
and a categorical loss over the gold label of each gold arc, weighted
``lambda * label + (1 - lambda) * arc``.  Examples with ``labels_masked``
contribute exactly zero to the label term, which is how auxiliary-language
data with incompatible label inventories is used.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

import torch

from .conllu import graph_from_indexed_arcs
from .errors import NonFiniteGradientError, VocabularyError
from .inference import argmax_decode, assign_labels, mfvi, mfvi_matrix
from .metrics import lf1
from .model import arc_mask, compute_potentials

LOSS_EPS = 1e-12
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    loss_lambda: float = 0.10
    learning_rate: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.9
    lr_decay: float = 0.5
    patience: int = 2
    batch_tokens: int = 2000
    epochs: int = 20
    mfvi_iterations: int = 3
    dropout_rate: float = 0.33
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ValueError("loss_lambda must be in [0, 1]")
        if self.batch_tokens < 1:
            raise ValueError("batch_tokens must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mfvi_iterations < 0:
            raise ValueError("mfvi_iterations must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass(frozen=True)
class TrainingExample:
    """One sentence with gold arcs in integer index space.

    ``gold_arcs`` holds (head, dep, label) triples over positions 0..n;
    the graph must already be collapsed and merged (no empty nodes, no
    parallel arcs).
    """

    words: tuple
    gold_arcs: tuple
    labels_masked: bool = False


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _as_matrix(probs):
    if isinstance(probs, torch.Tensor):
        return probs
    return torch.as_tensor(probs.probs, dtype=torch.float64)


def arc_loss(probs, gold):
    """Bernoulli cross-entropy summed over all admissible cells."""
    q = _as_matrix(probs)
    n = q.shape[0] - 1
    target = torch.zeros((n + 1, n + 1), dtype=q.dtype)
    for arc in gold:
        target[arc[0], arc[1]] = 1.0
    p = q.clamp(LOSS_EPS, 1.0 - LOSS_EPS)
    cell = target * torch.log(p) + (1.0 - target) * torch.log1p(-p)
    return -(cell * arc_mask(n).to(q.dtype)).sum()


def label_loss(label_scores, gold, labels):
    """Categorical cross-entropy of the gold label, summed over gold arcs."""
    if not isinstance(label_scores, torch.Tensor):
        label_scores = torch.as_tensor(label_scores, dtype=torch.float64)
    index = {label: i for i, label in enumerate(labels)}
    total = torch.zeros((), dtype=label_scores.dtype)
    if not gold:
        return total
    logp = torch.log_softmax(label_scores, dim=-1)
    for head, dep, label in gold:
        if label not in index:
            raise VocabularyError(f"gold label {label!r} not in the label set")
        total = total - logp[head, dep, index[label]]
    return total


def combined_loss(arc, label, loss_lambda):
    return loss_lambda * label + (1.0 - loss_lambda) * arc


def example_loss(params, example, config, generator=None):
    """Combined loss of one example; dropout only when a generator is given."""
    dropout = config.dropout_rate if generator is not None else 0.0
    potentials = compute_potentials(
        params, list(example.words), dropout_rate=dropout, generator=generator
    )
    q = mfvi_matrix(potentials.unary, potentials.binary, config.mfvi_iterations)
    arc = arc_loss(q, [(h, d) for h, d, _ in example.gold_arcs])
    if example.labels_masked or config.loss_lambda == 0.0:
        label = torch.zeros((), dtype=arc.dtype)
    else:
        label = label_loss(potentials.label_scores, example.gold_arcs, params.labels)
    return combined_loss(arc, label, config.loss_lambda)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step_count: int = 0


def init_adam(tensors):
    return AdamState(
        m={name: torch.zeros_like(t) for name, t in tensors.items()},
        v={name: torch.zeros_like(t) for name, t in tensors.items()},
    )


def adam_step(tensors, grads, state, lr, beta1=0.9, beta2=0.9, eps=ADAM_EPS):
    """One bias-corrected Adam update, in place.

    Missing gradients count as zero.  Non-finite gradients abort: they
    would silently poison the moment estimates otherwise.
    """
    state.step_count += 1
    t = state.step_count
    with torch.no_grad():
        for name in sorted(tensors):
            tensor = tensors[name]
            grad = grads.get(name)
            if grad is None:
                grad = torch.zeros_like(tensor)
            elif not bool(torch.isfinite(grad).all()):
                raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            tensor.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return tensors


# ---------------------------------------------------------------------------
# Data mixing and batching
# ---------------------------------------------------------------------------


def upsample_mix(low, high, seed=0):
    """High-resource data (labels masked) plus floor(|high|/|low|) copies of low.

    The result is shuffled by ``seed`` so duplicated copies spread across
    batches instead of arriving in blocks.
    """
    low = list(low)
    high = list(high)
    if not low:
        raise ValueError("low-resource set is empty")
    copies = len(high) // len(low)
    mixed = [replace(ex, labels_masked=True) for ex in high]
    for _ in range(copies):
        mixed.extend(replace(ex, labels_masked=False) for ex in low)
    random.Random(seed).shuffle(mixed)
    return mixed


def pack_batches(examples, batch_tokens):
    """Greedy packing in corpus order; flush before exceeding batch_tokens."""
    batches = []
    current, count = [], 0
    for ex in examples:
        n = len(ex.words)
        if current and count + n > batch_tokens:
            batches.append(current)
            current, count = [], 0
        current.append(ex)
        count += n
    if current:
        batches.append(current)
    return batches


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _example_graph(example):
    return graph_from_indexed_arcs(len(example.words), example.gold_arcs)


def _predict_graph(params, example, config):
    potentials = compute_potentials(params, list(example.words))
    probs = mfvi(potentials, config.mfvi_iterations)
    arcs = assign_labels(
        sorted(argmax_decode(probs, config.threshold)),
        potentials.label_scores,
        params.labels,
    )
    return graph_from_indexed_arcs(len(example.words), arcs)


def dev_lf1(params, dev, config):
    """Labeled F1 of threshold decoding against the dev gold arcs."""
    gold = [_example_graph(ex) for ex in dev]
    pred = [_predict_graph(params, ex, config) for ex in dev]
    return lf1(gold, pred).f1


def train(corpus, dev, config, params):
    """Train ``params`` in place-free fashion; returns (best_params, history).

    One Adam step per packed batch, averaging example losses.  After each
    epoch dev LF1 is computed with threshold decoding; the best-LF1 state
    is kept (ties keep the earlier epoch) and the learning rate is halved
    after ``patience`` epochs without improvement.  With an empty dev set
    the last epoch wins.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    params = params.clone()
    for tensor in params.tensors.values():
        tensor.requires_grad_(True)
    state = init_adam(params.tensors)
    generator = torch.Generator().manual_seed(config.seed)
    lr = config.learning_rate
    history = []
    best = (None, -1.0)
    since_improved = 0

    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        for batch in pack_batches(corpus, config.batch_tokens):
            losses = [
                example_loss(params, ex, config, generator=generator) for ex in batch
            ]
            loss = sum(losses) / len(losses)
            for tensor in params.tensors.values():
                tensor.grad = None
            loss.backward()
            grads = {
                name: tensor.grad
                for name, tensor in params.tensors.items()
                if tensor.grad is not None
            }
            adam_step(
                params.tensors,
                grads,
                state,
                lr,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
            )
            epoch_loss += float(loss.detach()) * len(losses)
        epoch_loss /= len(corpus)

        if dev:
            with torch.no_grad():
                score = dev_lf1(params, dev, config)
            if score > best[1]:
                best = (params.clone(), score)
                since_improved = 0
            else:
                since_improved += 1
                if since_improved >= config.patience:
                    lr *= config.lr_decay
                    since_improved = 0
        else:
            score = None
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss,
                "dev_lf1": score,
                "lr": lr,
            }
        )

    final = best[0] if best[0] is not None else params.clone()
    for tensor in final.tensors.values():
        tensor.requires_grad_(False)
    return final, history
