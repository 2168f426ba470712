import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestner import numerics as nx
from nestner.errors import (EmptyCorpus, IndexOutOfRange, NonFiniteGradient, SentenceExceedsBudget, ShapeMismatch,
                            UnknownLabel)
from nestner.model import build_model
from nestner.selftest import tiny_spec
from nestner.spancodec import Span
from nestner.synthetic import VOCAB, planted_corpus
from nestner.training import (LOG_HEADER, AdamWState, ClassWeightTable, TrainConfig, adamw_step, clip_global_norm,
                              make_batches, make_example, train, train_step, weighted_cross_entropy)


def examples_from(corpus, spec):
    return [make_example(s.tokens, corpus.spans[s.id], spec.labels, spec.max_length, sid=s.id) for s in corpus]


def adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


class TestWeightedCrossEntropy:
    def test_uniform_logits(self):
        for target in (0, 1):
            loss = weighted_cross_entropy(nx.Tensor([[0.3, 0.3]]), [target], [1.0, 1.0])
            assert abs(loss.item() - math.log(2)) < 1e-15

    def test_class_weights_single_token(self):
        loss = weighted_cross_entropy(nx.Tensor([[0.0, 0.0]]), [1], [0.25, 0.75])
        assert abs(loss.item() - (0.75 * math.log(2)) / 0.75) < 1e-15

    def test_weighted_mean_by_hand(self):
        z = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        y, w = [0, 1, 1], np.array([0.2, 0.9])
        nll = [math.log(1 + math.exp(-2)), math.log(1 + math.exp(-1)), math.log(2)]
        expect = (0.2 * nll[0] + 0.9 * nll[1] + 0.9 * nll[2]) / (0.2 + 0.9 + 0.9)
        assert abs(weighted_cross_entropy(nx.Tensor(z), y, w).item() - expect) < 1e-15

    def test_row_mask_drops_rows(self):
        z = nx.Tensor([[2.0, 0.0], [0.0, 9.0]])
        a = weighted_cross_entropy(z, [0, 0], [1.0, 1.0], [1.0, 0.0]).item()
        b = weighted_cross_entropy(nx.Tensor([[2.0, 0.0]]), [0], [1.0, 1.0]).item()
        assert a == b

    @given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**16))
    def test_unit_weights_equal_plain_mean(self, n, C, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, C)) * 3
        y = rng.integers(0, C, size=n)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        plain = float(np.mean(-np.log(p[np.arange(n), y])))
        assert abs(weighted_cross_entropy(nx.Tensor(z), y, np.ones(C)).item() - plain) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        y, w = rng.integers(0, 3, size=3), rng.uniform(0.1, 1.0, size=3)
        err = nx.check_gradient(lambda t: weighted_cross_entropy(t, y, w), rng.normal(size=(3, 3)))
        assert err <= 1e-6

    def test_errors(self):
        with pytest.raises(IndexOutOfRange):
            weighted_cross_entropy(nx.Tensor([[0.0, 0.0]]), [2], [1.0, 1.0])
        with pytest.raises(ShapeMismatch):
            weighted_cross_entropy(nx.Tensor([[0.0, 0.0]]), [0], [1.0, 1.0, 1.0])


class TestClassWeights:
    def test_tables(self):
        cr = ClassWeightTable.concept_recognition()
        assert cr.rows[0] == (0.25, 0.75)
        assert cr.rows[5] == (2 ** -7, 1 - 2 ** -7)
        assert cr.rows[6] == (2 ** -9, 1 - 2 ** -8)
        assert ClassWeightTable.ner().rows == ((0.005, 0.20, 0.20, 0.30, 0.24, 0.21),) * 6
        assert [r[0] for r in ClassWeightTable.ner_flair().rows] == [0.040, 0.030, 0.015, 0.010, 0.008, 0.006]

    def test_named_and_checks(self):
        assert ClassWeightTable.named("uniform", 3, 2).rows == ((1.0, 1.0),) * 3
        with pytest.raises(ValueError):
            ClassWeightTable.named("cw", 3, 2)
        with pytest.raises(ShapeMismatch):
            ClassWeightTable.ner().check_against(6, 2)
        with pytest.raises(ShapeMismatch):
            ClassWeightTable.ner().check_against(7, 6)
        with pytest.raises(ValueError):
            ClassWeightTable(((1.0, 0.0),))


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = nx.Parameter(np.array([1.0, -2.0]), name="p")
        adamw_step([p], [np.zeros(2)], AdamWState(weight_decay=0.0))
        assert p.data.tolist() == [1.0, -2.0]

    def test_zero_gradient_pure_shrinkage(self):
        theta = np.array([1.0, -2.0, 0.3])
        p = nx.Parameter(theta, name="p")
        state = AdamWState(lr=0.001, weight_decay=0.01)
        adamw_step([p], [np.zeros(3)], state)
        assert np.array_equal(p.data, theta * (1 - 0.001 * 0.01))

    def test_single_step_closed_form(self):
        p = nx.Parameter(np.array([1.0]), name="p")
        adamw_step([p], [np.array([1.0])], AdamWState(lr=0.001, weight_decay=0.01))
        # m_hat = v_hat = 1
        expect = 1.0 * (1 - 0.001 * 0.01) - 0.001 * 1.0 / (1.0 + 1e-8)
        assert abs(p.data[0] - expect) < 1e-15
        assert abs(p.data[0] - 0.99899000001) < 1e-12

    def test_matches_adam_without_decay(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(20)]
        p = nx.Parameter(theta, name="p")
        state = AdamWState(lr=0.01, weight_decay=0.0)
        for g in grads:
            adamw_step([p], [g], state)
        np.testing.assert_allclose(p.data, adam_oracle(theta, grads, 0.01), rtol=0, atol=1e-12)
        assert state.step["p"] == 20

    def test_non_finite(self):
        p = nx.Parameter(np.zeros(2), name="p")
        with pytest.raises(NonFiniteGradient):
            adamw_step([p], [np.array([np.nan, 0.0])], AdamWState())
        assert p.data.tolist() == [0.0, 0.0]

    def test_clip(self):
        g = [np.array([3.0]), np.array([4.0])]
        out = clip_global_norm(g, 1.0)
        assert abs(math.sqrt(sum(float(x @ x) for x in out)) - 1.0) < 1e-15
        assert clip_global_norm(g, None) is g


class TestBatches:
    def ex(self, n):
        return make_example(["w"] * n, set(), ("Concept",), 2)

    def test_greedy(self):
        batches = make_batches([self.ex(4)] * 3, 10, 0, shuffle=False)
        assert [[len(e) for e in b] for b in batches] == [[4, 4], [4]]

    def test_single_batch(self):
        assert len(make_batches([self.ex(4)] * 3, 20000, 0)) == 1

    def test_reproducible(self):
        exs = [self.ex(n) for n in (1, 2, 3, 4, 5, 6, 7)]
        a = make_batches(exs, 8, 5)
        b = make_batches(exs, 8, 5)
        assert [[id(e) for e in x] for x in a] == [[id(e) for e in x] for x in b]
        assert sorted(id(e) for x in a for e in x) == sorted(id(e) for e in exs)

    def test_sentence_unit(self):
        assert [len(b) for b in make_batches([self.ex(9)] * 5, 2, 0, unit="sentences", shuffle=False)] == [2, 2, 1]

    def test_too_long(self):
        with pytest.raises(SentenceExceedsBudget):
            make_batches([self.ex(11)], 10, 0)


class TestExamples:
    def test_targets(self):
        ex = make_example(["a", "b", "c"], {Span(0, 2, "DNA"), Span(2, 1, "RNA")}, ("DNA", "RNA"), 2)
        assert ex.targets.tolist() == [[0, 0, 2], [1, 0, 0]]

    def test_unknown_label(self):
        with pytest.raises(UnknownLabel):
            make_example(["a"], {Span(0, 1, "Cell")}, ("DNA",), 1)


@pytest.fixture
def small_setup():
    spec = tiny_spec("Base", labels=("Concept",), hidden_dim=8, embedding_dim=6, num_layers=1)
    corpus = planted_corpus(5, 2, seed=4)
    return spec, examples_from(corpus, spec)


class TestTrainStep:
    def test_loss_decreases(self, small_setup):
        spec, exs = small_setup
        net = build_model(spec, VOCAB, seed=0)
        config = TrainConfig(learning_rate=0.01)
        states = {m: config.new_optimizer() for m in (1, 2, 3)}
        losses = []
        for _ in range(50):
            losses.append(sum(train_step(net, exs, m, config, states[m]) for m in (1, 2, 3)))
        smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert (np.diff(smooth) < 0).all()
        assert losses[-1] < 0.5 * losses[0]

    def test_empty_batch(self, small_setup):
        spec, _ = small_setup
        net = build_model(spec, VOCAB)
        with pytest.raises(EmptyCorpus):
            train_step(net, [], 1, TrainConfig(), AdamWState())


class TestTrain:
    def test_zero_epochs(self, small_setup, tmp_path):
        spec, exs = small_setup
        net = build_model(spec, VOCAB, seed=0)
        before = net.checksum()
        ckpt = tmp_path / "m.ckpt"
        result = train(net, exs, None, TrainConfig(epochs=0, checkpoint_path=str(ckpt),
                                                   log_path=str(tmp_path / "log.csv")))
        assert result.best_epoch is None and net.checksum() == before
        assert not ckpt.exists()
        assert (tmp_path / "log.csv").read_text() == ",".join(LOG_HEADER) + "\n"

    def test_log_and_checkpoint(self, small_setup, tmp_path):
        spec, exs = small_setup
        net = build_model(spec, VOCAB, seed=0)
        config = TrainConfig(epochs=4, batch_size=40, learning_rate=0.01, validate_every=2,
                             checkpoint_path=str(tmp_path / "m.ckpt"), log_path=str(tmp_path / "log.csv"))
        result = train(net, exs, exs[:2], config)
        rows = list(csv.DictReader(io.StringIO((tmp_path / "log.csv").read_text())))
        assert len(rows) == 4 * 3 and list(rows[0]) == LOG_HEADER
        assert rows[0]["val_ma_f1"] == "" and rows[3]["val_ma_f1"] != ""
        assert result.best_epoch in (2, 4) and (tmp_path / "m.ckpt").exists()

    def test_deterministic(self, small_setup):
        spec, exs = small_setup
        spec = replace(spec, tagging_dropout=0.3, lstm_dropout=0.2, num_layers=2)
        logs = []
        for _ in range(2):
            net = build_model(spec, VOCAB, seed=1)
            config = TrainConfig(epochs=2, batch_size=30, learning_rate=0.01, seed=9, task_order="shuffled")
            logs.append((train(net, exs, None, config).log_csv(), net.checksum()))
        assert logs[0] == logs[1]

    def test_restores_best_weights(self, small_setup):
        spec, exs = small_setup
        net = build_model(spec, VOCAB, seed=0)
        result = train(net, exs, None, TrainConfig(epochs=3, batch_size=40, learning_rate=0.01))
        from nestner.training import validation_scores
        assert validation_scores(net, exs)["ma_f1"] == result.best_score

    def test_empty(self, small_setup):
        spec, _ = small_setup
        with pytest.raises(EmptyCorpus):
            train(build_model(spec, VOCAB), [], None, TrainConfig())


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["Base", "InputDrop", "Norm", "NormFlair", "Multi"]), st.integers(1, 3), st.integers(0, 99))
def test_train_step_touches_only_its_task(variant, m, seed):
    spec = tiny_spec(variant, labels=("Concept",), tagging_dropout=0.2)
    net = build_model(spec, VOCAB, seed=seed)
    corpus = planted_corpus(3, 1, seed=seed)
    rng = np.random.default_rng(seed)
    exs = [make_example(s.tokens, corpus.spans[s.id], spec.labels, 3,
                        rng.normal(size=(len(s), spec.context_dim)) if spec.context_dim else None, s.id)
           for s in corpus]
    others = {k: net.checksum(net.head_parameters(k)) for k in (1, 2, 3) if k != m}
    enc_others = {k: net.checksum(net.sequence_parameters(k)) for k in (1, 2, 3) if k != m}
    own = net.checksum(net.head_parameters(m))
    train_step(net, exs, m, TrainConfig(learning_rate=0.01), AdamWState(lr=0.01), nx.make_rng(seed, 1))
    assert {k: net.checksum(net.head_parameters(k)) for k in others} == others
    assert net.checksum(net.head_parameters(m)) != own
    if variant == "Multi":
        assert {k: net.checksum(net.sequence_parameters(k)) for k in enc_others} == enc_others
