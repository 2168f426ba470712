"""Exact-match span scoring: overall, per word length, per class, per nested level.

Gold and predicted spans are given per sentence as ``{sentence_id: spans}``.
A prediction counts as a true positive only when sentence, start, length
and label all match a gold span.
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping

import numpy as np

from .errors import EmptyMap
from .spancodec import Span, level_map

NONE = "none"
GROUPINGS = ("overall", "length", "class", "nested_level")


@dataclass(frozen=True)
class PRF:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(tp, fp, fn, p, r, f1_score(p, r))

    @property
    def empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def _flatten(spans_by_sentence: Mapping[Hashable, Iterable[Span]]) -> set[tuple]:
    return {(sid, s) for sid, spans in spans_by_sentence.items() for s in spans}


def _levels(spans_by_sentence: Mapping[Hashable, Iterable[Span]]) -> dict[tuple, int]:
    out = {}
    for sid, spans in spans_by_sentence.items():
        for s, lvl in level_map(spans).items():
            out[(sid, s)] = lvl
    return out


def score_spans(gold: Mapping[Hashable, Iterable[Span]], predicted: Mapping[Hashable, Iterable[Span]],
                grouping: str = "overall") -> dict:
    """PRF per group.

    For ``nested_level``, true positives and misses are grouped by their
    level among the gold spans, false positives by their level among the
    predicted spans of the same sentence.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    g, p = _flatten(gold), _flatten(predicted)
    tp, fp, fn = g & p, p - g, g - p

    if grouping == "overall":
        return {"overall": PRF.from_counts(len(tp), len(fp), len(fn))}
    if grouping == "length":
        key_g = key_p = lambda item: item[1].length
    elif grouping == "class":
        key_g = key_p = lambda item: item[1].label
    else:
        glev, plev = _levels(gold), _levels(predicted)
        key_g, key_p = glev.__getitem__, plev.__getitem__

    counts: dict = defaultdict(lambda: [0, 0, 0])
    for item in tp:
        counts[key_g(item)][0] += 1
    for item in fp:
        counts[key_p(item)][1] += 1
    for item in fn:
        counts[key_g(item)][2] += 1
    return {k: PRF.from_counts(*counts[k]) for k in sorted(counts, key=_sort_key)}


def _sort_key(k):
    return (0, k, "") if isinstance(k, int) else (1, 0, str(k))


def macro_micro(per_group: Mapping) -> tuple[PRF, PRF]:
    """(macro, micro). Macro averages P, R and F1 over groups that have any span."""
    if not per_group:
        raise EmptyMap("no groups to average")
    tp = sum(v.tp for v in per_group.values())
    fp = sum(v.fp for v in per_group.values())
    fn = sum(v.fn for v in per_group.values())
    micro = PRF.from_counts(tp, fp, fn)
    live = [v for v in per_group.values() if not v.empty]
    if not live:
        return PRF(tp, fp, fn, 0.0, 0.0, 0.0), micro
    k = len(live)
    macro = PRF(tp, fp, fn,
                sum(v.precision for v in live) / k,
                sum(v.recall for v in live) / k,
                sum(v.f1 for v in live) / k)
    return macro, micro


@dataclass
class ConfusionMatrix:
    """Rows are gold labels, columns predicted labels; the last row/column is ``none``."""

    labels: tuple[str, ...]
    counts: np.ndarray

    @property
    def names(self) -> tuple[str, ...]:
        return self.labels + (NONE,)

    def cell(self, gold: str, pred: str) -> int:
        return int(self.counts[self.names.index(gold), self.names.index(pred)])

    def error_total(self) -> int:
        return int(self.counts.sum() - np.trace(self.counts))

    def error_shares(self) -> dict[str, float]:
        """Fractions of all errors that are spurious spans, missed spans and wrong labels."""
        total = self.error_total()
        k = len(self.labels)
        spurious = int(self.counts[k, :k].sum())
        missed = int(self.counts[:k, k].sum())
        wrong = total - spurious - missed
        if not total:
            return {"spurious": 0.0, "missed": 0.0, "wrong_label": 0.0}
        return {"spurious": spurious / total, "missed": missed / total, "wrong_label": wrong / total}


def confusion_matrix(gold: Mapping[Hashable, Iterable[Span]], predicted: Mapping[Hashable, Iterable[Span]],
                     labels: Iterable[str]) -> ConfusionMatrix:
    """Cross-tabulate labels per interval; intervals seen on one side only pair with ``none``."""
    labels = tuple(labels)
    extra = sorted({s.label for d in (gold, predicted) for ss in d.values() for s in ss} - set(labels))
    labels = labels + tuple(extra)
    idx = {lab: i for i, lab in enumerate(labels)}
    none = len(labels)
    counts = np.zeros((none + 1, none + 1), dtype=np.int64)

    by_interval: dict = defaultdict(lambda: ([], []))
    for side, data in ((0, gold), (1, predicted)):
        for sid, spans in data.items():
            for s in set(spans):
                by_interval[(sid, s.start, s.length)][side].append(s.label)
    for g_labels, p_labels in by_interval.values():
        g_left = sorted(set(g_labels) - set(p_labels))
        p_left = sorted(set(p_labels) - set(g_labels))
        for lab in set(g_labels) & set(p_labels):
            counts[idx[lab], idx[lab]] += 1
        for a, b in zip(g_left, p_left):
            counts[idx[a], idx[b]] += 1
        for a in g_left[len(p_left):]:
            counts[idx[a], none] += 1
        for b in p_left[len(g_left):]:
            counts[none, idx[b]] += 1
    return ConfusionMatrix(labels, counts)


def average_length(predicted) -> float:
    """Mean word length of the predicted spans (0.0 when there are none)."""
    if isinstance(predicted, Mapping):
        spans = [s for ss in predicted.values() for s in ss]
    else:
        spans = list(predicted)
    return sum(s.length for s in spans) / len(spans) if spans else 0.0


# -- full report -------------------------------------------------------------

@dataclass
class EvalReport:
    micro: PRF
    macro: PRF
    per_length: dict
    per_class: dict
    per_level: dict
    per_length_class: dict
    average_length: float
    confusion: ConfusionMatrix
    labels: tuple[str, ...]
    model_name: str = "model"

    def to_json_dict(self) -> dict:
        def group(d):
            return {str(k): v.as_dict() for k, v in d.items()}

        return {
            "model": self.model_name,
            "labels": list(self.labels),
            "overall": {"micro": self.micro.as_dict(), "macro": self.macro.as_dict(),
                        "average_length": self.average_length},
            "per_length": group(self.per_length),
            "per_class": group(self.per_class),
            "per_nested_level": group(self.per_level),
            "per_length_class": {f"{m}:{lab}": v.as_dict() for (m, lab), v in self.per_length_class.items()},
            "confusion": {
                "names": list(self.confusion.names),
                "counts": self.confusion.counts.tolist(),
                "error_shares": self.confusion.error_shares(),
            },
        }


def evaluate(gold: Mapping, predicted: Mapping, labels: Iterable[str], model_name: str = "model") -> EvalReport:
    """Everything the report tables need; macro averages run over word lengths."""
    labels = tuple(labels)
    per_length = score_spans(gold, predicted, "length")
    per_class = score_spans(gold, predicted, "class")
    per_level = score_spans(gold, predicted, "nested_level")
    (micro,) = score_spans(gold, predicted, "overall").values()
    macro = macro_micro(per_length)[0] if per_length else PRF(0, 0, 0, 0.0, 0.0, 0.0)

    per_length_class = {}
    for lab in labels:
        sub_g = {sid: [s for s in ss if s.label == lab] for sid, ss in gold.items()}
        sub_p = {sid: [s for s in ss if s.label == lab] for sid, ss in predicted.items()}
        for m, prf in score_spans(sub_g, sub_p, "length").items():
            per_length_class[(m, lab)] = prf
    return EvalReport(micro, macro, per_length, per_class, per_level, per_length_class,
                      average_length(predicted), confusion_matrix(gold, predicted, labels),
                      labels, model_name)


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def report_tables(report: EvalReport) -> dict[str, str]:
    """CSV texts keyed by file name; percentages with one decimal, like the published tables."""
    r = report
    tables = {}
    tables["overall.csv"] = _csv([
        ["model", "P_ma", "P_mi", "R_ma", "R_mi", "F1_ma", "F1_mi", "avg_len"],
        [r.model_name, _pct(r.macro.precision), _pct(r.micro.precision), _pct(r.macro.recall),
         _pct(r.micro.recall), _pct(r.macro.f1), _pct(r.micro.f1), f"{r.average_length:.2f}"],
    ])
    classes = [lab for lab in r.labels if lab in r.per_class] + [k for k in r.per_class if k not in r.labels]
    rows = [["model", "metric"] + classes + ["Overall"]]
    for metric, attr in (("P", "precision"), ("R", "recall"), ("F1", "f1")):
        rows.append([r.model_name, metric] + [_pct(getattr(r.per_class[c], attr)) for c in classes]
                    + [_pct(getattr(r.micro, attr))])
    tables["per_class.csv"] = _csv(rows)
    rows = [["model", "length", "tp", "fp", "fn", "P", "R", "F1"]]
    for m, v in r.per_length.items():
        rows.append([r.model_name, m, v.tp, v.fp, v.fn, _pct(v.precision), _pct(v.recall), _pct(v.f1)])
    tables["per_length.csv"] = _csv(rows)
    rows = [["model", "level", "tp", "fp", "fn", "P", "R", "F1"]]
    for lvl, v in r.per_level.items():
        rows.append([r.model_name, lvl, v.tp, v.fp, v.fn, _pct(v.precision), _pct(v.recall), _pct(v.f1)])
    tables["per_level.csv"] = _csv(rows)
    rows = [["model", "length", "label", "P", "R", "F1"]]
    for (m, lab), v in sorted(r.per_length_class.items()):
        rows.append([r.model_name, m, lab, _pct(v.precision), _pct(v.recall), _pct(v.f1)])
    tables["per_length_class.csv"] = _csv(rows)
    names = r.confusion.names
    rows = [["gold\\pred"] + list(names)]
    for i, g in enumerate(names):
        rows.append([g] + [int(c) for c in r.confusion.counts[i]])
    tables["confusion.csv"] = _csv(rows)
    return tables


def write_reports(report: EvalReport, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = dict(report_tables(report))
    files["report.json"] = json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    written = []
    for name, text in files.items():
        path = out_dir / name
        tmp = path.with_name(name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)
        written.append(path)
    return written
