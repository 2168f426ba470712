"""Multi-task training: one learning task per word length.

Each task computes its own class-weighted cross-entropy, backpropagates it
and applies its own AdamW optimizer to the shared encoder plus its own
tagging head.  Heads of other lengths are never touched by that task.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import (EmptyCorpus, EmptyMap, IndexOutOfRange, NonFiniteGradient,
                     SentenceExceedsBudget, ShapeMismatch, UnknownLabel)
from .evaluation import macro_micro, score_spans
from .model import PartlyLayeredNet, save_weights
from .numerics import Parameter, Tensor
from .spancodec import Span, drop_long_spans, encode_bo

log = logging.getLogger(__name__)


# -- class weights -----------------------------------------------------------

@dataclass(frozen=True)
class ClassWeightTable:
    """``rows[m - 1]`` holds the weights of (non-entity, label_1, ..., label_k) for length m."""

    rows: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(tuple(float(w) for w in r) for r in self.rows))
        if not self.rows or len({len(r) for r in self.rows}) != 1:
            raise ValueError("class weight rows must be non-empty and equally wide")
        if any(w <= 0 or not math.isfinite(w) for r in self.rows for w in r):
            raise ValueError("class weights must be positive and finite")

    @property
    def max_length(self) -> int:
        return len(self.rows)

    @property
    def num_classes(self) -> int:
        return len(self.rows[0])

    def for_length(self, m: int) -> np.ndarray:
        if not 1 <= m <= len(self.rows):
            raise IndexOutOfRange(f"no class weights for word length {m}")
        return np.array(self.rows[m - 1])

    @classmethod
    def uniform(cls, max_length: int, num_classes: int) -> "ClassWeightTable":
        return cls(tuple((1.0,) * num_classes for _ in range(max_length)))

    @classmethod
    def concept_recognition(cls) -> "ClassWeightTable":
        # the length-7 weights do not sum to one; kept as published
        rows = [(2.0 ** -(m + 1), 1 - 2.0 ** -(m + 1)) for m in range(1, 7)]
        rows.append((2.0 ** -9, 1 - 2.0 ** -8))
        return cls(tuple(rows))

    @classmethod
    def ner(cls) -> "ClassWeightTable":
        return cls(tuple((0.005, 0.20, 0.20, 0.30, 0.24, 0.21) for _ in range(6)))

    @classmethod
    def ner_flair(cls) -> "ClassWeightTable":
        non = (0.040, 0.030, 0.015, 0.010, 0.008, 0.006)
        return cls(tuple((n, 0.15, 0.18, 0.25, 0.22, 0.20) for n in non))

    @classmethod
    def named(cls, name: str, max_length: int, num_classes: int) -> "ClassWeightTable":
        key = name.strip().lower()
        table = {
            "cr": cls.concept_recognition, "ner": cls.ner, "ner-flair": cls.ner_flair,
        }.get(key)
        if key == "uniform":
            return cls.uniform(max_length, num_classes)
        if table is None:
            raise ValueError(f"unknown class weight table {name!r}")
        return table()

    def check_against(self, max_length: int, num_classes: int) -> None:
        if self.max_length < max_length or self.num_classes != num_classes:
            raise ShapeMismatch(
                f"class weights cover {self.max_length} lengths x {self.num_classes} classes, "
                f"model needs {max_length} x {num_classes}"
            )


# -- loss --------------------------------------------------------------------

def weighted_cross_entropy(logits: Tensor, targets, weights, row_mask=None) -> Tensor:
    """Weighted mean of -log p[target]: sum_t w[y_t] * nll_t / sum_t w[y_t].

    ``row_mask`` (0/1 per row) removes padding rows from both sums.
    """
    z = logits.data
    if len(z.shape) != 2:
        raise ShapeMismatch(f"logits must be [n, C], got {z.shape}")
    n, C = z.shape
    y = np.asarray(targets, dtype=np.intp)
    w = np.asarray(weights, dtype=np.float64)
    if y.shape != (n,) or n < 1:
        raise ShapeMismatch(f"{y.shape} targets for {n} rows")
    if w.shape != (C,):
        raise ShapeMismatch(f"{w.shape} class weights for {C} classes")
    if (y < 0).any() or (y >= C).any():
        raise IndexOutOfRange(f"target index outside [0, {C})")
    row_w = w[y]
    if row_mask is not None:
        row_w = row_w * np.asarray(row_mask, dtype=np.float64)
    total = row_w.sum()
    if total <= 0:
        raise ValueError("no rows carry weight")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    nll = logsum - shifted[np.arange(n), y]
    loss = float((row_w * nll).sum() / total)

    def vjp(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(n), y] -= 1.0
        return (g * p * (row_w / total)[:, None],)

    return nx.custom_op(np.asarray(loss), (logits,), vjp, "weighted_cross_entropy")


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamWState) -> None:
    """One AdamW update with weight decay decoupled from the adaptive step.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} for parameter {p.name} {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {p.name}")
    b1, b2 = state.beta1, state.beta2
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        key = p.name
        m = b1 * state.m.get(key, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(key, 0.0) + (1 - b2) * g * g
        t = state.step.get(key, 0) + 1
        state.m[key], state.v[key], state.step[key] = m, v, t
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.assign(p.data * (1 - state.lr * state.weight_decay) - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)))


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


# -- data --------------------------------------------------------------------

@dataclass
class Example:
    """A sentence ready for training: tokens, gold spans and per-length target indices."""

    tokens: tuple[str, ...]
    spans: frozenset
    targets: np.ndarray  # [M, n] class indices
    context: np.ndarray | None = None
    id: str = ""

    def __len__(self):
        return len(self.tokens)


def make_example(tokens, spans: Iterable[Span], labels: Sequence[str], max_length: int,
                 context=None, sid: str = "") -> Example:
    label_index = {lab: i + 1 for i, lab in enumerate(labels)}
    spans = drop_long_spans(spans, max_length, where=f"sentence {sid}" if sid else "")
    for s in spans:
        if s.label not in label_index:
            raise UnknownLabel(f"sentence {sid}: label {s.label!r} not in {tuple(labels)}")
    rows = encode_bo(spans, len(tokens), max_length)
    targets = np.zeros((max_length, len(tokens)), dtype=np.intp)
    for r, row in enumerate(rows):
        for i, tag in enumerate(row.tags):
            if tag != "O":
                targets[r, i] = label_index[tag[2:]]
    return Example(tuple(tokens), frozenset(spans), targets, context, sid)


def make_batches(examples: Sequence, token_budget: int, seed, unit: str = "tokens",
                 shuffle: bool = True) -> list[list]:
    """Shuffle, then pack greedily until the next sentence would exceed the budget."""
    if unit not in ("tokens", "sentences"):
        raise ValueError(f"batch unit must be 'tokens' or 'sentences', got {unit!r}")
    if token_budget < 1:
        raise ValueError("batch budget must be positive")
    cost = (lambda ex: len(ex)) if unit == "tokens" else (lambda ex: 1)
    longest = max((cost(ex) for ex in examples), default=0)
    if longest > token_budget:
        raise SentenceExceedsBudget(f"a sentence of {longest} tokens exceeds the budget of {token_budget}")
    order = list(range(len(examples)))
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else nx.make_rng(int(seed))
        order = [int(i) for i in rng.permutation(len(examples))]
    batches, current, used = [], [], 0
    for i in order:
        c = cost(examples[i])
        if current and used + c > token_budget:
            batches.append(current)
            current, used = [], 0
        current.append(examples[i])
        used += c
    if current:
        batches.append(current)
    return batches


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 20000
    batch_unit: str = "tokens"
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    task_order: str = "ascending"
    seed: int = 0
    class_weights: ClassWeightTable | None = None
    validate_every: int = 1
    checkpoint_path: str | None = None
    log_path: str | None = None

    def new_optimizer(self) -> AdamWState:
        return AdamWState(self.learning_rate, self.beta1, self.beta2, self.adam_eps, self.weight_decay)


def _batch_targets(batch_examples: Sequence[Example], m: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    B = len(batch_examples)
    targets = np.zeros(steps * B, dtype=np.intp)
    mask = np.zeros(steps * B)
    for b, ex in enumerate(batch_examples):
        rows = np.arange(len(ex)) * B + b
        targets[rows] = ex.targets[m - 1]
        mask[rows] = 1.0
    return targets, mask


def task_loss(net: PartlyLayeredNet, batch_examples: Sequence[Example], m: int,
              weights: np.ndarray, mode: str = "train", rng=None) -> Tensor:
    """Task-m weighted cross-entropy over a batch (padding rows excluded)."""
    contexts = [ex.context for ex in batch_examples] if net.spec.context_dim else None
    batch = net.make_batch([ex.tokens for ex in batch_examples], contexts)
    logits = net.forward_batch(batch, mode, rng, tasks=[m])[m]
    targets, mask = _batch_targets(batch_examples, m, batch.steps)
    return weighted_cross_entropy(logits, targets, weights, mask)


def train_step(net: PartlyLayeredNet, batch_examples: Sequence[Example], m: int,
               config: TrainConfig, state: AdamWState, rng=None) -> float:
    """Forward, backpropagate and update for task ``m`` only; returns the batch loss."""
    if not batch_examples:
        raise EmptyCorpus("empty batch")
    weights = _weights(config, net)[m - 1]
    params = net.task_parameters(m)
    with nx.Tape() as tape:
        loss = task_loss(net, batch_examples, m, weights, "train", rng)
    grads = clip_global_norm(tape.gradient(loss, params), config.clip_norm)
    adamw_step(params, grads, state)
    return loss.item()


def _weights(config: TrainConfig, net: PartlyLayeredNet) -> list[np.ndarray]:
    spec = net.spec
    table = config.class_weights or ClassWeightTable.uniform(spec.max_length, spec.num_classes)
    table.check_against(spec.max_length, spec.num_classes)
    return [table.for_length(m) for m in range(1, spec.max_length + 1)]


def validation_scores(net: PartlyLayeredNet, examples: Sequence[Example]) -> dict[str, float]:
    """Macro (over word lengths) and micro span P/R/F1."""
    preds = net.predict([ex.tokens for ex in examples],
                        [ex.context for ex in examples] if net.spec.context_dim else None)
    gold = {i: ex.spans for i, ex in enumerate(examples)}
    pred = dict(enumerate(preds))
    try:
        macro, micro = macro_micro(score_spans(gold, pred, "length"))
    except EmptyMap:
        return dict.fromkeys(("ma_p", "ma_r", "ma_f1", "mi_p", "mi_r", "mi_f1"), 0.0)
    return {
        "ma_p": macro.precision, "ma_r": macro.recall, "ma_f1": macro.f1,
        "mi_p": micro.precision, "mi_r": micro.recall, "mi_f1": micro.f1,
    }


LOG_HEADER = ["epoch", "task", "loss", "val_ma_p", "val_ma_r", "val_ma_f1", "val_mi_p", "val_mi_r", "val_mi_f1"]


@dataclass
class TrainResult:
    net: PartlyLayeredNet
    log: list[dict]
    best_epoch: int | None
    best_score: float | None

    def log_csv(self) -> str:
        return format_log(self.log)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in LOG_HEADER])
    return buf.getvalue()


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def train(net: PartlyLayeredNet, train_examples: Sequence[Example],
          dev_examples: Sequence[Example] | None, config: TrainConfig) -> TrainResult:
    """Run all epochs; keep (and checkpoint) the weights with the best validation macro-F1.

    Within every batch, tasks run in ascending word length unless
    ``config.task_order == "shuffled"``.  Without a dev set the training set
    is used for validation.
    """
    if not train_examples:
        raise EmptyCorpus("no training sentences")
    if config.task_order not in ("ascending", "shuffled"):
        raise ValueError(f"task_order must be 'ascending' or 'shuffled', got {config.task_order!r}")
    dev = dev_examples if dev_examples else train_examples
    M = net.spec.max_length
    _weights(config, net)
    states = {m: config.new_optimizer() for m in range(1, M + 1)}
    dropout_rng = nx.make_rng(config.seed, 1)
    rows: list[dict] = []
    best_score, best_epoch, best_weights = None, None, None

    for epoch in range(1, config.epochs + 1):
        batches = make_batches(train_examples, config.batch_size, nx.make_rng(config.seed, 2, epoch),
                               config.batch_unit)
        order_rng = nx.make_rng(config.seed, 4, epoch)
        losses = {m: [] for m in range(1, M + 1)}
        for batch in batches:
            tasks = list(range(1, M + 1))
            if config.task_order == "shuffled":
                tasks = [int(t) for t in order_rng.permutation(tasks)]
            for m in tasks:
                losses[m].append(train_step(net, batch, m, config, states[m], dropout_rng))

        scores = None
        if epoch % config.validate_every == 0 or epoch == config.epochs:
            scores = validation_scores(net, dev)
            if best_score is None or scores["ma_f1"] > best_score:
                best_score, best_epoch = scores["ma_f1"], epoch
                best_weights = [p.numpy() for p in net.parameters()]
                if config.checkpoint_path:
                    save_weights(net, config.checkpoint_path)
        for m in range(1, M + 1):
            row = {"epoch": epoch, "task": m, "loss": float(np.mean(losses[m]))}
            if scores is not None:
                row.update({f"val_{k}": v for k, v in scores.items()})
            rows.append(row)
        if config.log_path:
            _write_text(config.log_path, format_log(rows))
        log.info("epoch %d: losses %s, val macro-F1 %s", epoch,
                 [round(float(np.mean(losses[m])), 5) for m in range(1, M + 1)],
                 None if scores is None else round(scores["ma_f1"], 4))

    if best_weights is not None:
        for p, arr in zip(net.parameters(), best_weights):
            p.assign(arr)
    if config.epochs == 0 and config.log_path:
        _write_text(config.log_path, format_log(rows))
    return TrainResult(net, rows, best_epoch, best_score)
