"""Acceptance suite: one test group per criterion, summarized at the end of the run.

Run alone with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from nestner.cli import main
from nestner.evaluation import (average_length, confusion_matrix, evaluate, macro_micro, report_tables,
                                score_spans)
from nestner.model import NER_LABELS, VARIANTS, ModelSpec, build_model, save_weights
from nestner import numerics as nx
from nestner.selftest import layer_gradient_errors, model_gradient_errors, op_gradient_errors, tiny_spec
from nestner.spancodec import Span, decode_spans, encode_bo, level_map
from nestner.synthetic import VOCAB, planted_corpus
from nestner.training import (AdamWState, ClassWeightTable, TrainConfig, adamw_step, make_example, train,
                              train_step)

from test_evaluation import GOLDEN, golden_case
from test_training import adam_oracle

FIXTURES = Path(__file__).parent / "fixtures"
criterion = pytest.mark.criterion


def random_span_set(rng, n, M, labels=("Concept", "Protein")):
    cells = {}
    for _ in range(int(rng.integers(0, 2 * n + 1))):
        m = int(rng.integers(1, min(M, n) + 1))
        cells[(int(rng.integers(0, n - m + 1)), m)] = labels[int(rng.integers(len(labels)))]
    return {Span(s, m, lab) for (s, m), lab in cells.items()}


@criterion(1, "codec round trip on 10,000 random sentences in < 10 s")
def test_codec_roundtrip():
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(10_000):
        n, M = int(rng.integers(1, 31)), int(rng.integers(1, 8))
        cases.append((n, M, random_span_set(rng, n, M)))
    t0 = time.perf_counter()
    bad = sum(decode_spans(encode_bo(spans, n, M)) != spans for n, M, spans in cases)
    elapsed = time.perf_counter() - t0
    print(f"codec: {len(cases)} sentences, {bad} mismatches, {elapsed:.2f} s")
    assert bad == 0
    assert elapsed < 10


@criterion(2, "nested levels equal the brute-force chain oracle; the California State University example has levels (1,1,1,2,2,3)")
def test_nesting_oracle(csu_spans):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        count = int(rng.integers(0, 13))
        spans = set()
        while len(spans) < count:
            m = int(rng.integers(1, 6))
            spans.add(Span(int(rng.integers(0, 10)), m))
        assert level_map(spans) == oracles.chain_levels(spans)
    assert sorted(level_map(csu_spans).values()) == [1, 1, 1, 2, 2, 3]


@criterion(3, "every layer and each per-task weighted loss pass finite-difference checks at 1e-4 in < 60 s")
def test_gradient_fidelity():
    t0 = time.perf_counter()
    errors = {f"op.{k}": v for k, v in op_gradient_errors().items()}
    errors.update({f"layer.{k}": v for k, v in layer_gradient_errors().items()})
    for variant in VARIANTS:
        errors.update({f"{variant}.{k}": v for k, v in model_gradient_errors(variant).items()})
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    print(f"gradient checks: {len(errors)} entries, worst {worst} = {errors[worst]:.2e}, {elapsed:.1f} s")
    assert errors[worst] <= 1e-4
    assert elapsed < 60


@criterion(4, "AdamW without decay matches Adam to 1e-12; zero-gradient decay is bitwise")
def test_optimizer_contract():
    rng = np.random.default_rng(11)
    theta = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(50)]
    p = nx.Parameter(theta, name="w")
    state = AdamWState(lr=0.003, weight_decay=0.0)
    for g in grads:
        adamw_step([p], [g], state)
    assert np.max(np.abs(p.data - adam_oracle(theta, grads, 0.003))) <= 1e-12

    for lr, lam in ((0.001, 0.01), (0.1, 0.3)):
        q = nx.Parameter(theta, name="q")
        adamw_step([q], [np.zeros_like(theta)], AdamWState(lr=lr, weight_decay=lam))
        assert np.array_equal(q.data, theta * (1 - lr * lam))


@criterion(5, "class-weight defaults equal the published tables")
def test_class_weight_tables():
    cr = ClassWeightTable.concept_recognition()
    assert cr.rows[0] == (0.25, 0.75)
    assert [r[0] for r in cr.rows] == [0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125, 0.001953125]
    assert cr.rows[6][1] == 0.99609375
    assert ClassWeightTable.ner().rows == ((0.005, 0.20, 0.20, 0.30, 0.24, 0.21),) * 6
    flair = ClassWeightTable.ner_flair()
    assert [r[0] for r in flair.rows] == [0.040, 0.030, 0.015, 0.010, 0.008, 0.006]
    assert {r[1:] for r in flair.rows} == {(0.15, 0.18, 0.25, 0.22, 0.20)}


@criterion(6, "a task step leaves other heads (and other Multi encoders) bit-identical")
@pytest.mark.parametrize("variant", VARIANTS)
def test_task_isolation(variant):
    spec = tiny_spec(variant, labels=("Concept",), tagging_dropout=0.2)
    corpus = planted_corpus(4, 2, seed=3)
    rng = np.random.default_rng(0)
    exs = [make_example(s.tokens, corpus.spans[s.id], spec.labels, 3,
                        rng.normal(size=(len(s), spec.context_dim)) if spec.context_dim else None, s.id)
           for s in corpus]
    for m in (1, 2, 3):
        net = build_model(spec, VOCAB, seed=m)
        heads = {k: net.checksum(net.head_parameters(k)) for k in (1, 2, 3)}
        encoders = {k: net.checksum(net.sequence_parameters(k)) for k in (1, 2, 3)}
        for _ in range(3):
            train_step(net, exs, m, TrainConfig(learning_rate=0.01), AdamWState(lr=0.01), nx.make_rng(m, 1))
        for k in (1, 2, 3):
            assert (net.checksum(net.head_parameters(k)) == heads[k]) == (k != m)
            if variant == "Multi":
                assert (net.checksum(net.sequence_parameters(k)) == encoders[k]) == (k != m)
            else:
                assert net.checksum(net.sequence_parameters(k)) != encoders[k]


def _fit(variant, train_corpus, seed):
    spec = ModelSpec(variant=variant, max_length=3, labels=("Concept",), embedding_dim=16, hidden_dim=32,
                     num_layers=1, lstm_dropout=0.0, tagging_dropout=0.0)
    exs = [make_example(s.tokens, train_corpus.spans[s.id], spec.labels, 3, sid=s.id) for s in train_corpus]
    net = build_model(spec, VOCAB, seed=seed)
    config = TrainConfig(epochs=60, batch_size=100, learning_rate=0.01, seed=seed, validate_every=5,
                         class_weights=ClassWeightTable.concept_recognition())
    train(net, exs, None, config)
    return net


def _scores(net, corpus):
    gold = {s.id: corpus.spans[s.id] for s in corpus}
    pred = dict(zip(gold, net.predict([s.tokens for s in corpus])))
    per_length = score_spans(gold, pred, "length")
    macro, micro = macro_micro(per_length)
    return micro.f1, macro.f1, per_length


@criterion(7, "toy corpus: Base learns it; Multi learns length 1 but trails Base on macro-F1")
def test_desk_scale_learnability():
    seed = 0
    t0 = time.perf_counter()
    train_corpus = planted_corpus(50, 10, seed=seed)
    held_out = planted_corpus(200, 40, seed=seed + 1000, prefix="t")
    assert sum(s.length == 3 for ss in train_corpus.spans.values() for s in ss) == 10
    assert len({t for s in train_corpus for t in s.tokens} | set(VOCAB)) == 100

    base = _fit("Base", train_corpus, seed)
    multi = _fit("Multi", train_corpus, seed)
    base_train, multi_train = _scores(base, train_corpus), _scores(multi, train_corpus)
    base_test, multi_test = _scores(base, held_out), _scores(multi, held_out)
    elapsed = time.perf_counter() - t0
    print(f"train micro-F1 Base {base_train[0]:.3f}, Multi length-1 F1 {multi_train[2][1].f1:.3f}; "
          f"held-out macro-F1 Base {base_test[1]:.3f} vs Multi {multi_test[1]:.3f}; {elapsed:.0f} s")
    assert base_train[0] >= 0.95
    assert multi_train[2][1].f1 >= 0.95
    assert multi_test[1] < base_test[1]
    assert elapsed < 300


@criterion(8, "metrics match hand-enumeration oracles on 500 instances; reports match golden files")
def test_metrics_oracle():
    rng = np.random.default_rng(8)
    labels = ("Protein", "DNA", "RNA")

    def draw():
        return Span(int(rng.integers(0, 8)), int(rng.integers(1, 4)), labels[int(rng.integers(3))])

    for _ in range(500):
        sids = ["a", "b", "c"][: int(rng.integers(1, 4))]
        gold = {sid: {draw() for _ in range(int(rng.integers(0, 3)))} for sid in sids}
        pred = {sid: {s for s in gold[sid] if rng.random() < 0.5} | {draw() for _ in range(int(rng.integers(0, 3)))}
                for sid in sids}
        assert sum(len(v) for v in gold.values()) + sum(len(v) for v in pred.values()) <= 20
        glev, plev = oracles.levels_by_sentence(gold), oracles.levels_by_sentence(pred)
        keys = {
            "length": (lambda sid, s: s.length,) * 2,
            "class": (lambda sid, s: s.label,) * 2,
            "nested_level": (lambda sid, s: glev[(sid, s)], lambda sid, s: plev[(sid, s)]),
        }
        for grouping, (kg, kp) in keys.items():
            got = score_spans(gold, pred, grouping)
            want = oracles.count_by(gold, pred, kg, kp)
            assert {k: (v.tp, v.fp, v.fn) for k, v in got.items()} == {k: tuple(c) for k, c in want.items()}
            for k, v in got.items():
                assert (v.precision, v.recall, v.f1) == pytest.approx(oracles.prf(*want[k]), abs=1e-15)
            if got:
                macro, micro = macro_micro(got)
                live = [oracles.prf(*c) for c in want.values() if any(c)]
                tp, fp, fn = (sum(c[i] for c in want.values()) for i in range(3))
                assert micro.f1 == pytest.approx(oracles.prf(tp, fp, fn)[2], abs=1e-15)
                assert macro.f1 == pytest.approx(sum(x[2] for x in live) / len(live) if live else 0.0, abs=1e-15)
        assert confusion_matrix(gold, pred, labels).counts.tolist() == oracles.confusion(gold, pred, labels)
        flat = [s for ss in pred.values() for s in ss]
        assert average_length(pred) == pytest.approx(sum(s.length for s in flat) / len(flat) if flat else 0.0)

    gold, pred = golden_case()
    for name, text in report_tables(evaluate(gold, pred, ("Protein", "DNA"), "golden")).items():
        assert text == (GOLDEN / name).read_text(), name


@criterion(9, "eval on GENIA-style nested IOB data writes the per-class, per-level and confusion reports")
def test_genia_style_reports(tmp_path, capsys):
    spec = tiny_spec("Base", labels=NER_LABELS, max_length=6)
    tokens = [line.split("\t")[0] for line in (FIXTURES / "genia_like.iob").read_text().splitlines()
              if line and not line.startswith("#")]
    save_weights(build_model(spec, tokens, seed=0), tmp_path / "ner.ckpt")
    code = main(["eval", "--checkpoint", str(tmp_path / "ner.ckpt"), "--corpus", str(FIXTURES / "genia_like.iob"),
                 "--format", "iob-nested", "--label-map", "genia", "--out", str(tmp_path / "rep"),
                 "--name", "Base"])
    assert code == 0, capsys.readouterr().err
    rep = tmp_path / "rep"
    per_class = list(csv.reader(io.StringIO((rep / "per_class.csv").read_text())))
    assert per_class[0] == ["model", "metric", *NER_LABELS, "Overall"]
    assert [row[1] for row in per_class[1:]] == ["P", "R", "F1"]
    levels = list(csv.DictReader(io.StringIO((rep / "per_level.csv").read_text())))
    assert [row["level"] for row in levels] == [str(k) for k in range(1, len(levels) + 1)]
    # the lipid annotation maps to '-' and is dropped
    data = json.loads((rep / "report.json").read_text())
    gold_counts = {lab: v["tp"] + v["fn"] for lab, v in data["per_class"].items()}
    assert gold_counts == {"Protein": 3, "DNA": 1, "RNA": 1, "CellType": 2, "CellLine": 1}
    gold_levels = {lvl: v["tp"] + v["fn"] for lvl, v in data["per_nested_level"].items() if v["tp"] + v["fn"]}
    assert gold_levels == {"1": 6, "2": 2}
    assert data["confusion"]["names"] == [*NER_LABELS, "none"]
    confusion = list(csv.reader(io.StringIO((rep / "confusion.csv").read_text())))
    assert len(confusion) == 1 + len(NER_LABELS) + 1


@criterion(10, "two identical train runs give byte-identical logs and checkpoints")
def test_determinism(tmp_path, capsys):
    from nestner.corpus import write_standoff

    write_standoff(planted_corpus(12, 3, seed=5), tmp_path / "train.txt")
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["train", "--set", f"train_corpus={tmp_path / 'train.txt'}", "--set", "variant=InputDrop",
                     "--set", "max_length=3", "--set", "embedding_dim=8", "--set", "hidden_dim=10",
                     "--set", "num_layers=2", "--set", "epochs=3", "--set", "batch_size=60",
                     "--set", "class_weights=cr", "--set", "task_order=shuffled", "--set", "seed=42",
                     "--set", f"output_dir={out}"])
        assert code == 0, capsys.readouterr().err
        outputs.append(((out / "train_log.csv").read_bytes(), (out / "model.ckpt").read_bytes()))
    assert outputs[0] == outputs[1]
    assert len(outputs[0][0].splitlines()) == 1 + 3 * 3


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
