"""Corpus readers and writers.

``standoff`` (one block per sentence, blocks separated by blank lines)::

    #id s1
    California<TAB>State<TAB>University
    #pos<TAB>NOUN<TAB>NOUN<TAB>NOUN          (optional)
    #split<TAB>train                          (optional)
    S<TAB>0<TAB>3<TAB>Concept

``iob-nested``: one token per line followed by one BIO tag column per
nesting layer, sentences separated by blank lines, optional ``#id`` lines.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, SpanOutOfRange, UnknownLabel
from .spancodec import POS_TAGS, Span, drop_long_spans

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
FORMATS = ("standoff", "iob-nested")


@dataclass
class Sentence:
    id: str
    tokens: tuple[str, ...]
    pos: tuple[str, ...] | None = None
    context: np.ndarray | None = None

    def __len__(self):
        return len(self.tokens)


@dataclass
class Corpus:
    sentences: list[Sentence] = field(default_factory=list)
    spans: dict[str, frozenset] = field(default_factory=dict)
    split: dict[str, str] = field(default_factory=dict)

    def add(self, sentence: Sentence, spans: Iterable[Span], split: str = "train") -> None:
        if sentence.id in self.spans:
            raise ParseError(f"duplicate sentence id {sentence.id!r}")
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}; expected one of {SPLITS}")
        spans = frozenset(spans)
        for s in spans:
            if s.start < 0 or s.length < 1 or s.end > len(sentence):
                raise SpanOutOfRange(f"sentence {sentence.id}: {s} outside {len(sentence)} tokens")
        self.sentences.append(sentence)
        self.spans[sentence.id] = spans
        self.split[sentence.id] = split

    def subset(self, split: str) -> "Corpus":
        out = Corpus()
        for s in self.sentences:
            if self.split[s.id] == split:
                out.add(s, self.spans[s.id], split)
        return out

    def labels(self) -> list[str]:
        return sorted({s.label for ss in self.spans.values() for s in ss})

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


# -- label mapping -----------------------------------------------------------

def read_label_map(path) -> dict[str, str | None]:
    """``raw<TAB>mapped`` lines; ``-`` as the target drops the label; ``#`` starts a comment."""
    out: dict[str, str | None] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected '<raw label> <mapped label or ->'", path, lineno)
            out[parts[0]] = None if parts[1] == "-" else parts[1]
    return out


def default_genia_label_map() -> Path:
    return Path(__file__).with_name("data") / "genia_labels.map"


class _LabelFilter:
    def __init__(self, labels, label_map, path):
        self.labels = None if labels is None else set(labels)
        self.label_map = label_map or {}
        self.path = path

    def __call__(self, label: str, lineno) -> str | None:
        if label in self.label_map:
            label = self.label_map[label]
            if label is None:
                return None
        if self.labels is not None and label not in self.labels:
            raise UnknownLabel(f"label {label!r} not in {sorted(self.labels)}", self.path, lineno)
        return label


# -- standoff ----------------------------------------------------------------

def _parse_standoff_block(lines, path, corpus, relabel, default_split):
    (lineno, head), rest = lines[0], lines[1:]
    first = head.split(None, 1)
    if first[0] != "#id":
        raise ParseError("block must start with '#id <sentence-id>'", path, lineno)
    sid = first[1].strip() if len(first) > 1 else ""
    if not sid:
        raise ParseError("empty sentence id", path, lineno)
    if not rest:
        raise ParseError("block has no token line", path, lineno)
    lineno, tok_line = rest[0]
    tokens = tuple(tok_line.split("\t"))
    if any(t == "" for t in tokens):
        raise ParseError("empty token (double tab?)", path, lineno)
    pos, split, spans = None, default_split, set()
    for lineno, line in rest[1:]:
        fields = line.split("\t")
        if fields[0] == "#pos":
            pos = tuple(fields[1:])
            if len(pos) != len(tokens):
                raise ParseError(f"{len(pos)} POS tags for {len(tokens)} tokens", path, lineno)
            bad = set(pos) - set(POS_TAGS)
            if bad:
                raise ParseError(f"unknown POS tags {sorted(bad)}", path, lineno)
        elif fields[0] == "#split":
            if len(fields) != 2 or fields[1] not in SPLITS:
                raise ParseError(f"split must be one of {SPLITS}", path, lineno)
            split = fields[1]
        elif fields[0] == "S":
            if len(fields) != 4:
                raise ParseError("span line must be 'S<TAB>start<TAB>length<TAB>label'", path, lineno)
            try:
                start, length = int(fields[1]), int(fields[2])
            except ValueError:
                raise ParseError("span start/length must be integers", path, lineno) from None
            if start < 0 or length < 1 or start + length > len(tokens):
                raise SpanOutOfRange(f"{path}:{lineno}: span ({start},{length}) outside {len(tokens)} tokens")
            label = relabel(fields[3], lineno)
            if label is not None:
                spans.add(Span(start, length, label))
        else:
            raise ParseError(f"unexpected line {line[:40]!r}", path, lineno)
    corpus.add(Sentence(sid, tokens, pos), spans, split)


def _blocks(path):
    block = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip() == "":
                if block:
                    yield block
                    block = []
            else:
                block.append((lineno, line))
    if block:
        yield block


def read_standoff(path, labels=None, label_map=None, split: str = "train") -> Corpus:
    corpus = Corpus()
    relabel = _LabelFilter(labels, label_map, path)
    for block in _blocks(path):
        _parse_standoff_block(block, path, corpus, relabel, split)
    return corpus


def format_standoff(corpus: Corpus, with_split: bool = True) -> str:
    """Canonical serialization: spans sorted by (start, length, label)."""
    out = []
    for s in corpus.sentences:
        lines = [f"#id {s.id}", "\t".join(s.tokens)]
        if s.pos is not None:
            lines.append("\t".join(("#pos",) + tuple(s.pos)))
        if with_split:
            lines.append(f"#split\t{corpus.split.get(s.id, 'train')}")
        for sp in sorted(corpus.spans.get(s.id, ()), key=lambda x: (x.start, x.length, x.label)):
            lines.append(f"S\t{sp.start}\t{sp.length}\t{sp.label}")
        out.append("\n".join(lines) + "\n")
    return "\n".join(out)


def write_standoff(corpus: Corpus, path, with_split: bool = True) -> None:
    atomic_write_text(path, format_standoff(corpus, with_split))


def format_predictions(ids: Sequence[str], token_lists: Sequence[Sequence[str]], spans: Sequence[Iterable[Span]]) -> str:
    corpus = Corpus()
    for sid, toks, ss in zip(ids, token_lists, spans):
        corpus.add(Sentence(sid, tuple(toks)), ss)
    return format_standoff(corpus, with_split=False)


# -- iob-nested --------------------------------------------------------------

def bio_to_spans(tags: Sequence[str]) -> list[Span]:
    """Decode one BIO column; a stray I- or a label change opens a new span."""
    spans, start, label = [], None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, lab = tag.partition("-")
        continues = prefix == "I" and start is not None and lab == label
        if start is not None and not continues:
            spans.append(Span(start, i - start, label))
            start, label = None, None
        if prefix in ("B", "I") and not continues:
            start, label = i, lab
    return spans


def read_iob_nested(path, labels=None, label_map=None, split: str = "train") -> Corpus:
    corpus = Corpus()
    relabel = _LabelFilter(labels, label_map, path)
    auto = 0
    for block in _blocks(path):
        sid = None
        rows = []
        for lineno, line in block:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("id"):
                    sid = body[2:].lstrip(" =:\t").strip()
                continue
            fields = line.split("\t")
            for tag in fields[1:]:
                if tag != "O" and (tag[:2] not in ("B-", "I-") or len(tag) < 3):
                    raise ParseError(f"bad BIO tag {tag!r}", path, lineno)
            rows.append((lineno, fields[0], fields[1:]))
        if not rows:
            continue
        auto += 1
        sid = sid or str(auto)
        tokens = tuple(r[1] for r in rows)
        depth = max(len(r[2]) for r in rows)
        spans = set()
        for col in range(depth):
            column = [r[2][col] if col < len(r[2]) else "O" for r in rows]
            for s in bio_to_spans(column):
                label = relabel(s.label, rows[s.start][0])
                if label is not None:
                    spans.add(Span(s.start, s.length, label))
        corpus.add(Sentence(sid, tokens), spans, split)
    return corpus


def read_corpus(path, format: str = "standoff", labels=None, label_map=None,
                max_length: int | None = None, split: str = "train") -> Corpus:
    """Read a corpus; spans longer than ``max_length`` are reported and dropped."""
    if format == "standoff":
        corpus = read_standoff(path, labels, label_map, split)
    elif format == "iob-nested":
        corpus = read_iob_nested(path, labels, label_map, split)
    else:
        raise ValueError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    if max_length is not None:
        for s in corpus.sentences:
            corpus.spans[s.id] = frozenset(drop_long_spans(corpus.spans[s.id], max_length, f"{path}:{s.id}"))
    return corpus


def read_raw_sentences(path) -> list[tuple[str, ...]]:
    """One sentence per line, whitespace tokenized; blank lines skipped."""
    with open(path, encoding="utf-8") as fh:
        return [tuple(line.split()) for line in fh if line.strip()]


# -- context vectors ---------------------------------------------------------

def read_context_vectors(path) -> dict[str, dict[int, np.ndarray]]:
    """``<sentence-id>:<token-index> v1 ... vd`` lines, same layout as embedding files."""
    out: dict[str, dict[int, np.ndarray]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            key, _, idx = parts[0].rpartition(":")
            if not key or not idx.isdigit():
                raise ParseError("key must be '<sentence-id>:<token-index>'", path, lineno)
            if dim is None:
                dim = len(parts) - 1
            if len(parts) - 1 != dim or dim == 0:
                raise ParseError(f"expected {dim} components", path, lineno)
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise ParseError("non-numeric vector component", path, lineno) from None
            out.setdefault(key, {})[int(idx)] = vec
    return out


def context_dim(vectors: dict) -> int:
    for per_tok in vectors.values():
        for v in per_tok.values():
            return len(v)
    return 0


def attach_context_vectors(corpus: Corpus, vectors: dict) -> None:
    """Set ``Sentence.context`` for every sentence; every token needs a vector."""
    for s in corpus.sentences:
        per_tok = vectors.get(s.id)
        if per_tok is None or any(i not in per_tok for i in range(len(s))):
            raise ParseError(f"missing context vectors for sentence {s.id!r}")
        s.context = np.stack([per_tok[i] for i in range(len(s))])


# -- statistics --------------------------------------------------------------

def length_level_table(corpus: Corpus) -> dict:
    """Counts per word length, broken down by label and by nested level."""
    from .spancodec import level_map

    by_length: Counter = Counter()
    by_length_label: Counter = Counter()
    by_length_level: Counter = Counter()
    for s in corpus.sentences:
        for sp, lvl in level_map(corpus.spans[s.id]).items():
            by_length[sp.length] += 1
            by_length_label[(sp.length, sp.label)] += 1
            by_length_level[(sp.length, lvl)] += 1
    return {"length": by_length, "length_label": by_length_label, "length_level": by_length_level}


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
