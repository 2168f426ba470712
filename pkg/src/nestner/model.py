"""The partly-layered tagger: one shared sequence encoder, one tagging head per word length.

Variants
--------
Base       LSTM -> per head (dropout, dense)
InputDrop  dropout on the embeddings before the LSTM
Norm       layer normalization after the LSTM
NormFlair  Norm plus precomputed context vectors and two dense layers per head
Multi      a dedicated LSTM per word length (fully layered)
"""
from __future__ import annotations

import hashlib
import io
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from . import numerics as nx
from .errors import CorruptFile, DimMismatch, InvalidSpec, SpecMismatch, VersionMismatch
from .numerics import Parameter, Tensor
from .spancodec import OUTSIDE, Span, TagSequence, begin_tag, decode_spans

VARIANTS = ("Base", "InputDrop", "Norm", "NormFlair", "Multi")
_VARIANT_ALIASES = {
    "base": "Base", "inputdrop": "InputDrop", "input-drop": "InputDrop",
    "norm": "Norm", "normflair": "NormFlair", "norm-flair": "NormFlair", "multi": "Multi",
}

CR_LABELS = ("Concept",)
NER_LABELS = ("Protein", "DNA", "RNA", "CellLine", "CellType")


def canonical_variant(name: str) -> str:
    try:
        return _VARIANT_ALIASES[name.strip().lower()]
    except KeyError:
        raise InvalidSpec(f"unknown variant {name!r}; expected one of {VARIANTS}") from None


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "Base"
    max_length: int = 7
    labels: tuple[str, ...] = CR_LABELS
    embedding_dim: int = 300
    hidden_dim: int = 500
    num_layers: int = 1
    lstm_dropout: float = 0.4
    tagging_dropout: float = 0.4
    input_dropout: float | None = None
    context_dim: int = 0
    inner_dense_dim: int = 0  # 0 means half the encoder output width
    bidirectional: bool = False
    trainable_embeddings: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "labels", tuple(self.labels))
        self.validate()

    def validate(self) -> None:
        if self.max_length < 1:
            raise InvalidSpec("max_length must be >= 1")
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise InvalidSpec(f"labels must be non-empty and duplicate-free: {self.labels}")
        for lab in self.labels:
            if not lab or any(ch in lab for ch in ",\t\n\r ") or lab == OUTSIDE:
                raise InvalidSpec(f"invalid label {lab!r}")
        if self.embedding_dim < 1 or self.hidden_dim < 1 or self.num_layers < 1:
            raise InvalidSpec("embedding_dim, hidden_dim and num_layers must be positive")
        for name in ("lstm_dropout", "tagging_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidSpec(f"{name} must be in [0, 1)")
        if self.variant == "InputDrop":
            if self.input_dropout is None or not 0.0 <= self.input_dropout < 1.0:
                raise InvalidSpec("InputDrop needs input_dropout in [0, 1)")
        if self.variant == "NormFlair" and self.context_dim < 1:
            raise InvalidSpec("NormFlair needs a context-vector source (context_dim >= 1)")
        if self.context_dim < 0 or self.inner_dense_dim < 0:
            raise InvalidSpec("context_dim and inner_dense_dim must be >= 0")

    @property
    def num_classes(self) -> int:
        return 1 + len(self.labels)

    @property
    def tag_names(self) -> tuple[str, ...]:
        return (OUTSIDE,) + tuple(begin_tag(lab) for lab in self.labels)

    @property
    def encoder_width(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    @property
    def inner_width(self) -> int:
        return self.inner_dense_dim or max(1, self.encoder_width // 2)

    @property
    def dedicated_encoders(self) -> bool:
        return self.variant == "Multi"

    @property
    def normalized(self) -> bool:
        return self.variant in ("Norm", "NormFlair")

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelSpec":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name].strip()
            default = f.default
            if f.name == "labels":
                kw[f.name] = tuple(x.strip() for x in raw.split(",") if x.strip())
            elif f.name == "input_dropout":
                kw[f.name] = None if raw.lower() in ("", "none") else float(raw)
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise InvalidSpec(f"{f.name}: expected a boolean, got {raw!r}")
                kw[f.name] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        unknown = set(items) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidSpec(f"unknown model spec keys {sorted(unknown)}")
        return cls(**kw)


@dataclass
class SequenceLayer:
    lstm: L.LstmParams
    norm_gain: Parameter | None = None
    norm_bias: Parameter | None = None

    def parameters(self) -> list[Parameter]:
        ps = self.lstm.parameters()
        if self.norm_gain is not None:
            ps += [self.norm_gain, self.norm_bias]
        return ps


@dataclass
class TaggingHead:
    denses: list[L.DenseParams]

    def parameters(self) -> list[Parameter]:
        return [p for d in self.denses for p in d.parameters()]


@dataclass
class Batch:
    """Padded time-major batch: row ``t * size + b`` is token ``t`` of sentence ``b``."""

    index: np.ndarray
    lengths: list[int]
    context: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def steps(self) -> int:
        return len(self.index) // self.size

    def rows(self, b: int) -> np.ndarray:
        return np.arange(self.lengths[b]) * self.size + b


class PartlyLayeredNet:
    def __init__(self, spec: ModelSpec, embedding: L.EmbeddingTable,
                 sequence_layers: list[SequenceLayer], heads: list[TaggingHead]):
        n_seq = spec.max_length if spec.dedicated_encoders else 1
        if len(sequence_layers) != n_seq:
            raise InvalidSpec(f"{spec.variant} needs {n_seq} sequence layers, got {len(sequence_layers)}")
        if len(heads) != spec.max_length:
            raise InvalidSpec(f"expected {spec.max_length} tagging heads, got {len(heads)}")
        for h in heads:
            if h.denses[-1].weight.shape[1] != spec.num_classes:
                raise InvalidSpec("tagging head width does not match the label set")
        if embedding.dim != spec.embedding_dim:
            raise InvalidSpec(f"embedding dim {embedding.dim} != spec {spec.embedding_dim}")
        self.spec = spec
        self.embedding = embedding
        self.sequence_layers = sequence_layers
        self.heads = heads

    @classmethod
    def build(cls, spec: ModelSpec, embedding: L.EmbeddingTable, seed: int = 0) -> "PartlyLayeredNet":
        """Fresh weights drawn from ``seed`` around an existing embedding table."""
        rng = nx.make_rng(seed, 0)
        d_in = spec.embedding_dim + spec.context_dim
        width = spec.encoder_width
        seqs = []
        for k in range(spec.max_length if spec.dedicated_encoders else 1):
            prefix = f"seq{k + 1}" if spec.dedicated_encoders else "seq"
            lstm = L.LstmParams.init(d_in, spec.hidden_dim, spec.num_layers, rng, prefix,
                                     spec.lstm_dropout, spec.bidirectional)
            gain = bias = None
            if spec.normalized:
                gain = Parameter(np.ones(width), name=f"{prefix}.norm.gain")
                bias = Parameter(np.zeros(width), name=f"{prefix}.norm.bias")
            seqs.append(SequenceLayer(lstm, gain, bias))
        heads = []
        for m in range(1, spec.max_length + 1):
            if spec.variant == "NormFlair":
                denses = [L.DenseParams.init(width, spec.inner_width, rng, f"head{m}.dense0"),
                          L.DenseParams.init(spec.inner_width, spec.num_classes, rng, f"head{m}.dense1")]
            else:
                denses = [L.DenseParams.init(width, spec.num_classes, rng, f"head{m}.dense0")]
            heads.append(TaggingHead(denses))
        return cls(spec, embedding, seqs, heads)

    # -- parameter groups ----------------------------------------------------

    def sequence_parameters(self, m: int | None = None) -> list[Parameter]:
        """Encoder parameters used by word length ``m`` (all encoders when None)."""
        if m is None:
            return [p for s in self.sequence_layers for p in s.parameters()]
        return self._encoder_for(m).parameters()

    def head_parameters(self, m: int) -> list[Parameter]:
        return self.heads[m - 1].parameters()

    def task_parameters(self, m: int) -> list[Parameter]:
        """What one learning task updates: embeddings (if trainable), its encoder and its head."""
        ps = [self.embedding.vectors] if self.embedding.trainable else []
        return ps + self.sequence_parameters(m) + self.head_parameters(m)

    def parameters(self) -> list[Parameter]:
        ps = [self.embedding.vectors] + self.sequence_parameters()
        for m in range(1, self.spec.max_length + 1):
            ps += self.head_parameters(m)
        return ps

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def _encoder_for(self, m: int) -> SequenceLayer:
        if not 1 <= m <= self.spec.max_length:
            raise IndexError(f"word length {m} outside 1..{self.spec.max_length}")
        return self.sequence_layers[m - 1 if self.spec.dedicated_encoders else 0]

    # -- batching / forward --------------------------------------------------

    def make_batch(self, token_lists: Sequence[Sequence[str]], contexts=None) -> Batch:
        if not token_lists or any(len(t) == 0 for t in token_lists):
            raise ValueError("batch sentences must be non-empty")
        B = len(token_lists)
        T = max(len(t) for t in token_lists)
        index = np.full(T * B, self.embedding.pad, dtype=np.intp)
        lengths = [len(t) for t in token_lists]
        for b, toks in enumerate(token_lists):
            index[np.arange(len(toks)) * B + b] = [self.embedding.index(tok) for tok in toks]
        ctx = None
        if self.spec.context_dim:
            if contexts is None or len(contexts) != B or any(c is None for c in contexts):
                raise DimMismatch(f"{self.spec.variant} model needs context vectors for every sentence")
            ctx = np.zeros((T * B, self.spec.context_dim))
            for b, c in enumerate(contexts):
                c = np.asarray(c, dtype=np.float64)
                if c.shape != (lengths[b], self.spec.context_dim):
                    raise DimMismatch(
                        f"context vectors {c.shape} for a {lengths[b]}-token sentence, "
                        f"expected width {self.spec.context_dim}"
                    )
                ctx[np.arange(lengths[b]) * B + b] = c
        return Batch(index, lengths, ctx)

    def forward_batch(self, batch: Batch, mode: str = "eval", rng=None, tasks=None) -> dict[int, Tensor]:
        """Logits [T*B, 1+|labels|] for each requested word length (default all)."""
        spec = self.spec
        tasks = range(1, spec.max_length + 1) if tasks is None else tasks
        x = nx.gather_rows(self.embedding.vectors, batch.index)
        if batch.context is not None:
            x = nx.concat_cols([x, Tensor(batch.context)])
        if spec.variant == "InputDrop":
            x = L.dropout(x, spec.input_dropout, mode, rng)
        encoded: dict[int, Tensor] = {}
        out = {}
        for m in tasks:
            enc = self._encoder_for(m)
            key = id(enc)
            if key not in encoded:
                h = L.lstm_layers(x, enc.lstm, batch.lengths, mode, rng)
                if enc.norm_gain is not None:
                    h = L.layer_norm(h, enc.norm_gain, enc.norm_bias)
                encoded[key] = h
            z = L.dropout(encoded[key], spec.tagging_dropout, mode, rng)
            for i, d in enumerate(self.heads[m - 1].denses):
                if i:
                    z = nx.relu(z)
                z = L.dense(z, d)
            out[m] = z
        return out

    def forward(self, tokens: Sequence[str], mode: str = "eval", rng=None, context=None) -> list[Tensor]:
        """Per-length logits [n, 1+|labels|] for one sentence, m = 1..M."""
        batch = self.make_batch([tokens], None if context is None else [context])
        logits = self.forward_batch(batch, mode, rng)
        return [logits[m] for m in range(1, self.spec.max_length + 1)]

    def predict(self, token_lists: Sequence[Sequence[str]], contexts=None, batch_size: int = 64) -> list[set[Span]]:
        out: list[set[Span]] = []
        for lo in range(0, len(token_lists), batch_size):
            chunk = token_lists[lo:lo + batch_size]
            ctx = None if contexts is None else contexts[lo:lo + batch_size]
            batch = self.make_batch(chunk, ctx)
            logits = self.forward_batch(batch, "eval")
            for b in range(batch.size):
                rows = batch.rows(b)
                per_len = [logits[m].data[rows] for m in range(1, self.spec.max_length + 1)]
                out.append(decode_spans(predict_tags(per_len, self.spec.labels)))
        return out

    def checksum(self, params: Sequence[Parameter] | None = None) -> str:
        h = hashlib.sha256()
        for p in self.parameters() if params is None else params:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def build_model(spec: ModelSpec, tokens, seed: int = 0, embedding: L.EmbeddingTable | None = None) -> PartlyLayeredNet:
    """Convenience constructor: random trainable embeddings over ``tokens`` unless one is given."""
    if embedding is None:
        embedding = L.EmbeddingTable.random(tokens, spec.embedding_dim, nx.make_rng(seed, 3),
                                            trainable=spec.trainable_embeddings)
    return PartlyLayeredNet.build(spec, embedding, seed)


def predict_tags(logits: Sequence, labels: Sequence[str]) -> list[TagSequence]:
    """Argmax tag per token and length.

    Ties go to O first, then to the earlier label.  Positions where a span of
    the row's length would run past the sentence end are forced to O.
    """
    tag_names = (OUTSIDE,) + tuple(begin_tag(lab) for lab in labels)
    rows = []
    for m, z in enumerate(logits, start=1):
        arr = z.data if isinstance(z, Tensor) else np.asarray(z)
        n = arr.shape[0]
        best = np.argmax(arr, axis=1)  # first maximum wins
        if n - m + 1 < n:
            best[max(n - m + 1, 0):] = 0
        rows.append(TagSequence(m, tuple(tag_names[k] for k in best)))
    return rows


# -- checkpoints -------------------------------------------------------------

MAGIC = "NESTNER-CHECKPOINT"
VERSION = 1


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def checkpoint_bytes(net: PartlyLayeredNet) -> bytes:
    header = [MAGIC, f"version={VERSION}"]
    header += [f"{k}={v}" for k, v in net.spec.to_items()]
    header.append(f"embedding.trainable={'true' if net.embedding.trainable else 'false'}")
    vocab = net.embedding.tokens()
    header.append(f"vocab={len(vocab)}")
    header += vocab
    params = net.parameters()
    header.append(f"tensors={len(params)}")
    header.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("utf-8"))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", len(p.shape)))
        buf.write(struct.pack(f"<{len(p.shape)}Q", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(net: PartlyLayeredNet, path) -> None:
    _atomic_write_bytes(Path(path), checkpoint_bytes(net))


def _read_line(blob: bytes, pos: int) -> tuple[str, int]:
    nl = blob.find(b"\n", pos)
    if nl < 0:
        raise CorruptFile("checkpoint header is truncated")
    try:
        return blob[pos:nl].decode("utf-8"), nl + 1
    except UnicodeDecodeError:
        raise CorruptFile("checkpoint header is not valid UTF-8") from None


def load_weights(path, expected: ModelSpec | None = None) -> PartlyLayeredNet:
    """Rebuild a network from a checkpoint; ``expected`` guards against loading the wrong model."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC.encode() + b"\n"):
        raise CorruptFile(f"{path}: not a nestner checkpoint")
    pos = len(MAGIC) + 1
    line, pos = _read_line(blob, pos)
    if not line.startswith("version="):
        raise CorruptFile(f"{path}: missing version line")
    try:
        version = int(line.split("=", 1)[1])
    except ValueError:
        raise CorruptFile(f"{path}: bad version line {line!r}") from None
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    if len(blob) < pos + 4 or zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or modified file)")

    items: dict[str, str] = {}
    while True:
        line, pos = _read_line(blob, pos)
        key, _, value = line.partition("=")
        if key == "vocab":
            break
        items[key] = value
    try:
        n_vocab = int(value)
        trainable = items.pop("embedding.trainable") == "true"
        spec = ModelSpec.from_items(items)
    except (ValueError, KeyError, InvalidSpec) as exc:
        raise CorruptFile(f"{path}: bad model spec in header: {exc}") from None
    if expected is not None and expected != spec:
        diff = [k for k, v in asdict(expected).items() if asdict(spec)[k] != v]
        raise SpecMismatch(f"{path}: checkpoint spec differs in {diff}")
    tokens = []
    for _ in range(n_vocab):
        tok, pos = _read_line(blob, pos)
        tokens.append(tok)
    line, pos = _read_line(blob, pos)
    n_tensors = int(line.split("=", 1)[1])
    line, pos = _read_line(blob, pos)
    if line != "end":
        raise CorruptFile(f"{path}: header not terminated")

    arrays = {}
    end = len(blob) - 4
    try:
        for _ in range(n_tensors):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            count = int(np.prod(shape))
            if pos + 8 * count > end:
                raise CorruptFile(f"{path}: tensor {name} is truncated")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise CorruptFile(f"{path}: tensor section is truncated") from None
    if pos != end:
        raise CorruptFile(f"{path}: trailing bytes after tensors")

    if "embedding" not in arrays:
        raise CorruptFile(f"{path}: no embedding tensor")
    vocab = {tok: i for i, tok in enumerate(tokens)}
    emb = L.EmbeddingTable(vocab, Parameter(arrays["embedding"], name="embedding"), trainable)
    net = PartlyLayeredNet.build(spec, emb)
    named = net.named_parameters()
    if set(named) != set(arrays):
        raise CorruptFile(f"{path}: tensor names do not match the stored ModelSpec")
    for name, p in named.items():
        if name == "embedding":
            continue
        if arrays[name].shape != p.shape:
            raise CorruptFile(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.assign(arrays[name])
    return net
