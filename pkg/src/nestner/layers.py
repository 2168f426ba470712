"""Embedding, LSTM, dense, dropout and layer-norm building blocks.

Sequences inside a batch are laid out time-major: row ``t * B + b`` holds
token ``t`` of sentence ``b``.  Shorter sentences are padded at the end;
because the recurrence runs left to right, padding never leaks into the
outputs of real positions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DimMismatch, InvalidRate, ParseError, ShapeMismatch
from .numerics import Parameter, Tensor

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- embeddings --------------------------------------------------------------

@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    vectors: Parameter
    trainable: bool = True

    def __post_init__(self):
        if PAD not in self.vocab or UNK not in self.vocab:
            raise ValueError("vocabulary must contain PAD and UNK")
        V, d = self.vectors.shape
        if d <= 0 or any(not 0 <= i < V for i in self.vocab.values()):
            raise ShapeMismatch("vocabulary indices must fall inside the vector table")
        self.vectors.requires_grad = self.trainable

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def unk(self) -> int:
        return self.vocab[UNK]

    @property
    def pad(self) -> int:
        return self.vocab[PAD]

    def index(self, token: str) -> int:
        return self.vocab.get(token, self.vocab[UNK])

    def tokens(self) -> list[str]:
        inv = [""] * len(self.vocab)
        for tok, i in self.vocab.items():
            inv[i] = tok
        return inv

    @classmethod
    def random(cls, tokens, dim: int, rng: np.random.Generator, trainable: bool = True) -> "EmbeddingTable":
        """PAD=0, UNK=1, then ``tokens`` in first-seen order; PAD row is zero."""
        vocab = {PAD: 0, UNK: 1}
        for tok in tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
        bound = math.sqrt(3.0 / dim)
        vecs = rng.uniform(-bound, bound, size=(len(vocab), dim))
        vecs[0] = 0.0
        return cls(vocab, Parameter(vecs, name="embedding"), trainable)


def load_embeddings(path, trainable: bool = False, extra_tokens=(), rng=None) -> EmbeddingTable:
    """Read ``token v1 ... vd`` lines; bad lines are logged with their number and skipped.

    Tokens in ``extra_tokens`` missing from the file get random rows.
    """
    vocab = {PAD: 0, UNK: 1}
    rows: list[np.ndarray] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim <= 0:
                    raise ParseError("first line has no vector components", path, lineno)
            if len(parts) != dim + 1:
                log.warning("%s:%d: expected %d values, got %d; skipped", path, lineno, dim, len(parts) - 1)
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                log.warning("%s:%d: non-numeric component; skipped", path, lineno)
                continue
            if not np.isfinite(vec).all():
                log.warning("%s:%d: non-finite component; skipped", path, lineno)
                continue
            tok = parts[0]
            if tok in vocab:
                log.warning("%s:%d: duplicate token %r; skipped", path, lineno, tok)
                continue
            vocab[tok] = len(vocab)
            rows.append(vec)
    if dim is None:
        raise ParseError("embedding file is empty", path)
    rng = rng if rng is not None else nx.make_rng(0)
    extra = [t for t in dict.fromkeys(extra_tokens) if t not in vocab]
    for tok in extra:
        vocab[tok] = len(vocab)
    bound = math.sqrt(3.0 / dim)
    table = np.zeros((len(vocab), dim))
    table[1] = rng.uniform(-bound, bound, size=dim)
    if rows:
        table[2:2 + len(rows)] = np.stack(rows)
    if extra:
        table[2 + len(rows):] = rng.uniform(-bound, bound, size=(len(extra), dim))
    return EmbeddingTable(vocab, Parameter(table, name="embedding"), trainable)


def embed(tokens: Sequence[str], table: EmbeddingTable, extra_context_vectors: Tensor | None = None) -> Tensor:
    """Look up ``tokens`` (OOV -> UNK) and append context vectors along the feature axis."""
    idx = [table.index(t) for t in tokens]
    out = nx.gather_rows(table.vectors, idx)
    if extra_context_vectors is not None:
        if extra_context_vectors.shape[0] != len(tokens):
            raise DimMismatch(
                f"{extra_context_vectors.shape[0]} context vectors for {len(tokens)} tokens"
            )
        out = nx.concat_cols([out, extra_context_vectors])
    return out


# -- dropout / dense / normalization -----------------------------------------

def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout in train mode, identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    return nx.dropout_mask_apply(x, keep / (1.0 - rate))


@dataclass
class DenseParams:
    weight: Parameter
    bias: Parameter

    def __post_init__(self):
        if len(self.weight.shape) != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatch(f"dense weight {self.weight.shape} / bias {self.bias.shape}")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng, prefix: str) -> "DenseParams":
        return cls(
            Parameter(uniform_init(rng, n_in, (n_in, n_out)), name=f"{prefix}.weight"),
            Parameter(np.zeros(n_out), name=f"{prefix}.bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def dense(x: Tensor, p: DenseParams) -> Tensor:
    return nx.add_bias(nx.matmul(x, p.weight), p.bias)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if len(x.shape) != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xv, gv = x.data, gain.data
    mu = xv.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xv.var(axis=1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_std

    def vjp(g):
        dxhat = g * gv
        dx = inv_std * (
            dxhat - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return nx.custom_op(xhat * gv + bias.data, (x, gain, bias), vjp, "layer_norm")


# -- LSTM --------------------------------------------------------------------

@dataclass
class LstmLayer:
    """Gate blocks are packed column-wise in the order input, forget, cell, output."""

    w_input: Parameter      # [d_in, 4h]
    w_recurrent: Parameter  # [h, 4h]
    bias: Parameter         # [4h]

    @property
    def hidden_dim(self) -> int:
        return self.w_recurrent.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_input, self.w_recurrent, self.bias]


@dataclass
class LstmParams:
    layers: list[LstmLayer]
    dropout_between_layers: float = 0.0
    reverse_layers: list[LstmLayer] = field(default_factory=list)

    def __post_init__(self):
        if self.reverse_layers and len(self.reverse_layers) != len(self.layers):
            raise ShapeMismatch("bidirectional LSTM needs one reverse layer per forward layer")
        width = None
        for lay in self.layers + self.reverse_layers:
            h = lay.hidden_dim
            if lay.w_recurrent.shape != (h, 4 * h) or lay.bias.shape != (4 * h,):
                raise ShapeMismatch("inconsistent LSTM gate shapes")
            if lay.w_input.shape[1] != 4 * h:
                raise ShapeMismatch("LSTM input weight width must be 4 * hidden_dim")
        for ell, lay in enumerate(self.layers):
            if width is not None and lay.w_input.shape[0] != width:
                raise ShapeMismatch(f"LSTM layer {ell} input width does not match previous layer output")
            width = lay.hidden_dim * (2 if self.reverse_layers else 1)

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden_dim

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def bidirectional(self) -> bool:
        return bool(self.reverse_layers)

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    @classmethod
    def init(cls, d_in: int, hidden_dim: int, num_layers: int, rng, prefix: str,
             dropout_between_layers: float = 0.0, bidirectional: bool = False) -> "LstmParams":
        def make(layer_in, name):
            h = hidden_dim
            bias = np.zeros(4 * h)
            bias[h:2 * h] = 1.0  # forget gate
            return LstmLayer(
                Parameter(uniform_init(rng, layer_in, (layer_in, 4 * h)), name=f"{name}.w_input"),
                Parameter(uniform_init(rng, h, (h, 4 * h)), name=f"{name}.w_recurrent"),
                Parameter(bias, name=f"{name}.bias"),
            )

        width = hidden_dim * (2 if bidirectional else 1)
        fwd, bwd = [], []
        for ell in range(num_layers):
            layer_in = d_in if ell == 0 else width
            fwd.append(make(layer_in, f"{prefix}.l{ell}"))
            if bidirectional:
                bwd.append(make(layer_in, f"{prefix}.l{ell}r"))
        return cls(fwd, dropout_between_layers, bwd)

    def parameters(self) -> list[Parameter]:
        out = []
        for i, lay in enumerate(self.layers):
            out += lay.parameters()
            if self.reverse_layers:
                out += self.reverse_layers[i].parameters()
        return out


def lstm_cell(z: Tensor, state: Tensor | None) -> Tensor:
    """Gate pre-activations [B, 4h] and previous [h | c] state -> new [h | c].

    Gate order is input, forget, candidate, output.  With no previous state
    the cell starts from c = 0, so the forget gate gets no gradient.
    """
    h_dim = z.shape[1] // 4
    zd = z.data
    i = nx.sigmoid_array(zd[:, :h_dim])
    f = nx.sigmoid_array(zd[:, h_dim:2 * h_dim])
    g = np.tanh(zd[:, 2 * h_dim:3 * h_dim])
    o = nx.sigmoid_array(zd[:, 3 * h_dim:])
    c_prev = None if state is None else state.data[:, h_dim:]
    c = i * g if c_prev is None else f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc

    def vjp(grad):
        gh, gc = grad[:, :h_dim], grad[:, h_dim:]
        gc = gc + gh * o * (1.0 - tc * tc)
        gf = np.zeros_like(f) if c_prev is None else gc * c_prev * f * (1.0 - f)
        dz = np.concatenate([gc * g * i * (1.0 - i), gf, gc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)], axis=1)
        if state is None:
            return (dz,)
        return dz, np.concatenate([np.zeros_like(h), gc * f], axis=1)

    inputs = (z,) if state is None else (z, state)
    return nx.custom_op(np.concatenate([h, c], axis=1), inputs, vjp, "lstm_cell")


def _run_layer(x: Tensor, lay: LstmLayer, batch: int) -> Tensor:
    """One left-to-right pass over time-major rows; returns [T*B, h]."""
    h_dim = lay.hidden_dim
    steps = x.shape[0] // batch
    h = state = None
    outs = []
    for t in range(steps):
        # per-step projection keeps each output independent of the sequence
        # length down to the last bit (one big matmul may block differently)
        z = nx.add_bias(nx.matmul(nx.slice_rows(x, t * batch, (t + 1) * batch), lay.w_input), lay.bias)
        if h is not None:
            z = nx.add(z, nx.matmul(h, lay.w_recurrent))
        state = lstm_cell(z, state)
        h = nx.slice_cols(state, 0, h_dim)
        outs.append(h)
    return nx.concat_rows(outs)


def _reverse_index(lengths: Sequence[int], steps: int) -> np.ndarray:
    """Row permutation reversing each sentence's real tokens; padding rows stay put."""
    batch = len(lengths)
    perm = np.arange(steps * batch)
    for b, n in enumerate(lengths):
        for t in range(n):
            perm[t * batch + b] = (n - 1 - t) * batch + b
    return perm


def lstm_layers(x: Tensor, p: LstmParams, lengths: Sequence[int], mode: str = "eval", rng=None) -> Tensor:
    """Run the stacked LSTM over a padded time-major batch [T*B, d] -> [T*B, h]."""
    batch = len(lengths)
    if batch == 0 or x.shape[0] % batch:
        raise ShapeMismatch(f"{x.shape[0]} rows cannot be split into {batch} sequences")
    if x.shape[1] != p.layers[0].w_input.shape[0]:
        raise ShapeMismatch(f"LSTM expects width {p.layers[0].w_input.shape[0]}, got {x.shape[1]}")
    perm = _reverse_index(lengths, x.shape[0] // batch) if p.bidirectional else None
    for ell, lay in enumerate(p.layers):
        if ell > 0:
            x = dropout(x, p.dropout_between_layers, mode, rng)
        out = _run_layer(x, lay, batch)
        if perm is not None:
            back = _run_layer(nx.gather_rows(x, perm), p.reverse_layers[ell], batch)
            out = nx.concat_cols([out, nx.gather_rows(back, perm)])
        x = out
    return x


def lstm_forward(x: Tensor, p: LstmParams, mode: str = "eval", rng=None) -> Tensor:
    """Single sentence [n, d] -> hidden states [n, h] (h doubled when bidirectional)."""
    if len(x.shape) != 2 or x.shape[0] < 1:
        raise ShapeMismatch(f"lstm_forward needs [n>=1, d], got {x.shape}")
    return lstm_layers(x, p, [x.shape[0]], mode, rng)
