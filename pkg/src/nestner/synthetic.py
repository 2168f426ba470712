"""Rule-planted toy corpus for smoke tests and learnability checks.

Vocabulary (100 words): triggers ``k0-k9``, entity heads ``a*`` (length 1),
``b*`` (length 2), ``c*`` (length 3) and fillers ``w0-w59``.  An entity of
length m starts at an m-class head that directly follows a trigger:

    k a          -> [a]                 length 1
    k b w        -> [b w]               length 2
    k c k a      -> [c k a] and [a]     length 3 with a nested length-1 span

Heads without a preceding trigger and triggers before fillers are
distractors.  Since the deciding context sits at or before the start
token, a left-to-right encoder can learn every rule.
"""
from __future__ import annotations

from .corpus import Corpus, Sentence
from .numerics import make_rng
from .spancodec import Span

TRIGGERS = [f"k{i}" for i in range(10)]
HEADS = {1: [f"a{i}" for i in range(10)], 2: [f"b{i}" for i in range(10)], 3: [f"c{i}" for i in range(10)]}
FILLERS = [f"w{i}" for i in range(60)]
VOCAB = TRIGGERS + HEADS[1] + HEADS[2] + HEADS[3] + FILLERS


def planted_corpus(n_sentences: int = 50, length3: int = 10, seed: int = 0,
                   label: str = "Concept", split: str = "train", prefix: str = "s",
                   per_sentence: tuple[int, int] = (2, 4)) -> Corpus:
    """Generate ``n_sentences`` sentences holding exactly ``length3`` length-3 entities."""
    rng = make_rng(seed, 17)
    pick = lambda words: words[int(rng.integers(len(words)))]
    # spread the length-3 entities over distinct sentences
    with_long = set(int(i) for i in rng.choice(n_sentences, size=min(length3, n_sentences), replace=False))
    corpus = Corpus()
    for k in range(n_sentences):
        n_entities = int(rng.integers(per_sentence[0], per_sentence[1] + 1))
        kinds = [int(rng.choice([1, 1, 2])) for _ in range(n_entities)]
        if k in with_long:
            kinds[int(rng.integers(len(kinds)))] = 3
        tokens: list[str] = []
        spans: set[Span] = set()

        def filler(lo=1, hi=3):
            for _ in range(int(rng.integers(lo, hi + 1))):
                r = rng.random()
                if r < 0.12:
                    tokens.append(pick(HEADS[int(rng.integers(1, 4))]))  # head without trigger
                elif r < 0.2:
                    tokens.append(pick(TRIGGERS))
                    tokens.append(pick(FILLERS))  # trigger before filler
                else:
                    tokens.append(pick(FILLERS))
                # a head right after a trigger would plant an entity by accident
                if len(tokens) >= 2 and tokens[-2] in TRIGGERS and tokens[-1][0] in "abc":
                    tokens[-1] = pick(FILLERS)

        filler(0, 2)
        for kind in kinds:
            tokens.append(pick(TRIGGERS))
            start = len(tokens)
            if kind == 1:
                tokens.append(pick(HEADS[1]))
            elif kind == 2:
                tokens += [pick(HEADS[2]), pick(FILLERS)]
            else:
                tokens += [pick(HEADS[3]), pick(TRIGGERS), pick(HEADS[1])]
                spans.add(Span(start + 2, 1, label))
            spans.add(Span(start, kind, label))
            filler()
        corpus.add(Sentence(f"{prefix}{k + 1}", tuple(tokens)), spans, split)
    return corpus
