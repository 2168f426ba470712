"""Spans <-> per-length BO tag rows, nested levels and the concept-candidate filter.

A span of ``m`` words is encoded by a single ``B-<label>`` tag on its first
token in the row dedicated to length ``m``; every other position of that row
is ``O``.  Decoding takes each ``B`` at position ``i`` of row ``m`` together
with the following ``m - 1`` tokens, so overlapping and nested spans of
different lengths never compete for a tag.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .errors import AmbiguousGold, EmptyCandidate, SpanOutOfRange

log = logging.getLogger(__name__)

OUTSIDE = "O"


@dataclass(frozen=True, order=True)
class Span:
    start: int
    length: int
    label: str = "Concept"

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, other: "Span") -> bool:
        """Proper interval containment; labels are ignored."""
        return (
            self.start <= other.start and other.end <= self.end
            and (self.start, self.end) != (other.start, other.end)
        )


@dataclass(frozen=True)
class TagSequence:
    word_length: int
    tags: tuple[str, ...]

    def __post_init__(self):
        n, m = len(self.tags), self.word_length
        for i, tag in enumerate(self.tags):
            if tag != OUTSIDE and (not tag.startswith("B-") or i + m > n):
                raise SpanOutOfRange(f"tag {tag!r} at {i} invalid for length {m} over {n} tokens")

    def __len__(self):
        return len(self.tags)


@dataclass(frozen=True, order=True)
class NestedSpan:
    span: Span
    level: int


def begin_tag(label: str) -> str:
    return f"B-{label}"


def encode_bo(spans: Iterable[Span], n: int, max_length: int) -> list[TagSequence]:
    """One TagSequence per word length 1..max_length."""
    rows = [[OUTSIDE] * n for _ in range(max_length)]
    for s in set(spans):
        if s.start < 0 or s.length < 1 or s.end > n or s.length > max_length:
            raise SpanOutOfRange(f"{s} does not fit a sentence of {n} tokens with max length {max_length}")
        row = rows[s.length - 1]
        tag = begin_tag(s.label)
        if row[s.start] != OUTSIDE and row[s.start] != tag:
            raise AmbiguousGold(
                f"two labels for the span at {s.start} of length {s.length}: {row[s.start][2:]!r}, {s.label!r}"
            )
        row[s.start] = tag
    return [TagSequence(m + 1, tuple(r)) for m, r in enumerate(rows)]


def decode_spans(rows: Sequence[TagSequence]) -> set[Span]:
    out = set()
    for row in rows:
        for i, tag in enumerate(row.tags):
            if tag != OUTSIDE:
                out.add(Span(i, row.word_length, tag[2:]))
    return out


def assign_nested_levels(spans: Iterable[Span]) -> set[NestedSpan]:
    """Level 1 for spans containing no other span, else 1 + deepest contained level."""
    ordered = sorted(set(spans), key=lambda s: (s.length, s.start, s.label))
    levels: dict[Span, int] = {}
    for s in ordered:
        inner = [levels[t] for t in levels if s.contains(t)]
        levels[s] = 1 + max(inner, default=0)
    return {NestedSpan(s, lvl) for s, lvl in levels.items()}


def level_map(spans: Iterable[Span]) -> dict[Span, int]:
    return {ns.span: ns.level for ns in assign_nested_levels(spans)}


def drop_long_spans(spans: Iterable[Span], max_length: int, where: str = "") -> set[Span]:
    """Keep spans up to ``max_length`` words; report the rest."""
    kept = set()
    for s in spans:
        if s.length > max_length:
            log.warning("%sdropping %s: longer than max length %d", f"{where}: " if where else "", s, max_length)
        else:
            kept.add(s)
    return kept


# -- concept candidate filter ------------------------------------------------

POS_TAGS = ("NOUN", "VERB", "CONJ", "ART", "PRON", "OTHER")
_EDGE_NAMES = {"VERB": "verb", "CONJ": "conjunction", "ART": "article", "PRON": "pronoun"}


class FilterResult(NamedTuple):
    accepted: bool
    reason: str


def filter_concept_candidates(tokens: Sequence[str], pos: Sequence[str]) -> FilterResult:
    """Reject candidates without a noun or with a verb/conjunction/article/pronoun at either edge."""
    if not tokens:
        raise EmptyCandidate("candidate has no tokens")
    if len(pos) != len(tokens):
        raise ValueError(f"{len(tokens)} tokens but {len(pos)} POS tags")
    unknown = set(pos) - set(POS_TAGS)
    if unknown:
        raise ValueError(f"unknown POS tags {sorted(unknown)}; expected {POS_TAGS}")
    if "NOUN" not in pos:
        return FilterResult(False, "no-noun")
    if pos[0] in _EDGE_NAMES:
        return FilterResult(False, f"starts-with-{_EDGE_NAMES[pos[0]]}")
    if pos[-1] in _EDGE_NAMES:
        return FilterResult(False, f"ends-with-{_EDGE_NAMES[pos[-1]]}")
    return FilterResult(True, "ok")
