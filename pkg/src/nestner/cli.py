"""Command line: train, eval, predict, analyze, filter-candidates, selftest.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 internal check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import layers as L
from .config import load_run_config
from .corpus import (FORMATS, Corpus, Sentence, attach_context_vectors, default_genia_label_map, format_predictions,
                     length_level_table, read_context_vectors, read_corpus, read_label_map,
                     read_raw_sentences, atomic_write_text)
from .errors import (AmbiguousGold, CheckpointError, ConfigError, DimMismatch, EmptyCandidate, EmptyCorpus,
                     InvalidSpec, NestnerError, ParseError, SentenceExceedsBudget, SpanOutOfRange)
from .evaluation import evaluate, write_reports
from .model import PartlyLayeredNet, load_weights
from .numerics import make_rng
from .spancodec import filter_concept_candidates
from .training import make_example, train

log = logging.getLogger("nestner")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _label_map(arg):
    if not arg:
        return None
    if arg == "genia":
        return read_label_map(default_genia_label_map())
    return read_label_map(arg)


def _examples(corpus: Corpus, spec):
    return [make_example(s.tokens, corpus.spans[s.id], spec.labels, spec.max_length, s.context, s.id)
            for s in corpus.sentences]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    spec = cfg.model
    train_path = cfg.path("train_corpus")
    if not train_path:
        raise ConfigError("train_corpus is not set")
    fmt = cfg.path("corpus_format", "standoff")
    if fmt not in FORMATS:
        raise ConfigError(f"corpus_format must be one of {FORMATS}, got {fmt!r}")
    lmap = _label_map(cfg.path("label_map"))
    full = read_corpus(train_path, fmt, spec.labels, lmap, spec.max_length)
    train_c = full.subset("train")
    dev_c = full.subset("dev")
    if cfg.path("dev_corpus"):
        dev_c = read_corpus(cfg.path("dev_corpus"), fmt, spec.labels, lmap, spec.max_length, split="dev")
    ctx_path = cfg.path("context_vectors")
    if ctx_path:
        vectors = read_context_vectors(ctx_path)
        attach_context_vectors(train_c, vectors)
        if len(dev_c):
            attach_context_vectors(dev_c, vectors)
    if not len(train_c):
        raise EmptyCorpus(f"{train_path}: no training sentences")

    tokens = [t for s in train_c for t in s.tokens]
    emb_path = cfg.path("embedding_file")
    if emb_path:
        table = L.load_embeddings(emb_path, trainable=spec.trainable_embeddings,
                                  extra_tokens=tokens if spec.trainable_embeddings else (),
                                  rng=make_rng(cfg.train.seed, 3))
        if table.dim != spec.embedding_dim:
            log.info("embedding_dim set to %d from %s", table.dim, emb_path)
            spec = replace(spec, embedding_dim=table.dim)
    else:
        table = L.EmbeddingTable.random(tokens, spec.embedding_dim, make_rng(cfg.train.seed, 3),
                                        trainable=spec.trainable_embeddings)
    net = PartlyLayeredNet.build(spec, table, cfg.train.seed)

    out_dir = Path(cfg.path("output_dir", "runs"))
    tcfg = replace(cfg.train,
                   checkpoint_path=cfg.path("checkpoint", str(out_dir / "model.ckpt")),
                   log_path=cfg.path("log", str(out_dir / "train_log.csv")))
    result = train(net, _examples(train_c, spec), _examples(dev_c, spec) if len(dev_c) else None, tcfg)
    if result.best_epoch is None:
        print(f"trained 0 epochs; no checkpoint written; log: {tcfg.log_path}")
    else:
        print(f"best epoch {result.best_epoch} (validation macro-F1 {result.best_score:.4f}); "
              f"checkpoint: {tcfg.checkpoint_path}; log: {tcfg.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_weights(args.checkpoint)
    spec = net.spec
    corpus = read_corpus(args.corpus, args.format, spec.labels, _label_map(args.label_map), spec.max_length)
    if args.context_vectors:
        attach_context_vectors(corpus, read_context_vectors(args.context_vectors))
    sentences = corpus.sentences
    preds = net.predict([s.tokens for s in sentences],
                        [s.context for s in sentences] if spec.context_dim else None)
    gold = {s.id: corpus.spans[s.id] for s in sentences}
    pred = {s.id: p for s, p in zip(sentences, preds)}
    report = evaluate(gold, pred, spec.labels, args.name)
    out = Path(args.out)
    write_reports(report, out)
    if args.predictions:
        atomic_write_text(out / "predictions.txt",
                          format_predictions([s.id for s in sentences], [s.tokens for s in sentences], preds))
    print(f"P {report.micro.precision:.4f}  R {report.micro.recall:.4f}  F1 {report.micro.f1:.4f}  "
          f"macro-F1 {report.macro.f1:.4f}  avg len {report.average_length:.2f}  reports: {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_weights(args.checkpoint)
    sentences = read_raw_sentences(args.input)
    ids = [str(i) for i in range(1, len(sentences) + 1)]
    contexts = None
    if net.spec.context_dim:
        if not args.context_vectors:
            raise DimMismatch(f"{net.spec.variant} model needs --context-vectors keyed by line number")
        corpus = Corpus()
        for sid, toks in zip(ids, sentences):
            corpus.add(Sentence(sid, toks), ())
        attach_context_vectors(corpus, read_context_vectors(args.context_vectors))
        contexts = [s.context for s in corpus.sentences]
    preds = net.predict(sentences, contexts) if sentences else []
    text = format_predictions(ids, sentences, preds)
    if args.output:
        atomic_write_text(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def analyze_corpus(corpus: Corpus) -> dict:
    stats = length_level_table(corpus)
    lengths = sorted(stats["length"])
    levels = sorted({lvl for (_, lvl) in stats["length_level"]})
    labels = sorted({lab for (_, lab) in stats["length_label"]})
    return {
        "lengths": {m: stats["length"][m] for m in lengths},
        "labels": {m: {lab: stats["length_label"][(m, lab)] for lab in labels} for m in lengths},
        "levels": {m: {lvl: stats["length_level"][(m, lvl)] for lvl in levels} for m in lengths},
        "level_totals": {lvl: sum(stats["length_level"][(m, lvl)] for m in lengths) for lvl in levels},
        "label_totals": {lab: sum(stats["length_label"][(m, lab)] for m in lengths) for lab in labels},
        "total": sum(stats["length"].values()),
    }


def format_analysis(a: dict) -> str:
    labels = list(a["label_totals"])
    levels = list(a["level_totals"])
    show_labels = len(labels) > 1
    head = ["length", "total"] + (labels if show_labels else []) + [f"L{lvl}" for lvl in levels]
    rows = ["\t".join(head)]
    for m, n in a["lengths"].items():
        cells = [str(m), str(n)]
        if show_labels:
            cells += [str(a["labels"][m][lab]) for lab in labels]
        cells += [str(a["levels"][m][lvl]) for lvl in levels]
        rows.append("\t".join(cells))
    cells = ["total", str(a["total"])]
    if show_labels:
        cells += [str(a["label_totals"][lab]) for lab in labels]
    cells += [str(a["level_totals"][lvl]) for lvl in levels]
    rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"


def cmd_analyze(args) -> int:
    corpus = read_corpus(args.corpus, args.format, None, _label_map(args.label_map), args.max_length)
    a = analyze_corpus(corpus)
    if args.json:
        print(json.dumps(a, indent=2, sort_keys=True, default=str))
    else:
        sys.stdout.write(format_analysis(a))
    return EXIT_OK


def parse_candidate_line(line: str, lineno: int) -> tuple[list[str], list[str]]:
    tokens, pos = [], []
    for item in line.split():
        word, sep, tag = item.rpartition("/")
        if not sep or not word:
            raise ParseError(f"expected token/POS, got {item!r}", "<candidates>", lineno)
        tokens.append(word)
        pos.append(tag)
    return tokens, pos


def cmd_filter_candidates(args) -> int:
    fh = open(args.input, encoding="utf-8") if args.input != "-" else sys.stdin
    out = []
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            tokens, pos = parse_candidate_line(line, lineno)
            try:
                res = filter_concept_candidates(tokens, pos)
            except (EmptyCandidate, ValueError) as exc:
                raise ParseError(str(exc), args.input, lineno) from None
            out.append(f"{'accept' if res.accepted else 'reject'}\t{res.reason}\t{' '.join(tokens)}")
    sys.stdout.write("\n".join(out) + ("\n" if out else ""))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(verbose=not args.quiet)
    if failures:
        print(f"selftest: {len(failures)} check(s) failed", file=sys.stderr)
        return EXIT_CHECK
    print("selftest: all checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestner", description="Nested entity recognition with one tagging head per word length.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", help="config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on an annotated corpus and write reports")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--format", default="standoff", choices=FORMATS)
    e.add_argument("--label-map", help="label map file, or 'genia' for the bundled grouping")
    e.add_argument("--context-vectors")
    e.add_argument("--out", default="reports")
    e.add_argument("--name", default="model", help="model name used in the report rows")
    e.add_argument("--predictions", action="store_true", help="also write predictions.txt")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="tag raw whitespace-tokenized sentences, one per line")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--output")
    pr.add_argument("--context-vectors", help="vectors keyed <line-number>:<token-index>")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("analyze", help="gold span counts per word length, label and nested level")
    a.add_argument("--corpus", required=True)
    a.add_argument("--format", default="standoff", choices=FORMATS)
    a.add_argument("--label-map")
    a.add_argument("--max-length", type=int)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("filter-candidates", help="apply the concept candidate filter to token/POS lines")
    f.add_argument("--input", default="-")
    f.set_defaults(func=cmd_filter_candidates)

    s = sub.add_parser("selftest", help="gradient checks and codec round trips")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


DATA_ERRORS = (ParseError, SpanOutOfRange, AmbiguousGold, CheckpointError, DimMismatch,
               EmptyCorpus, SentenceExceedsBudget, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a command is required (train, eval, predict, analyze, filter-candidates, selftest)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NestnerError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
