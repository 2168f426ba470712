from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestner import layers as L
from nestner import numerics as nx
from nestner.errors import CorruptFile, DimMismatch, InvalidSpec, SpecMismatch, VersionMismatch
from nestner.model import (NER_LABELS, VARIANTS, ModelSpec, PartlyLayeredNet, build_model, checkpoint_bytes,
                           load_weights, predict_tags, save_weights)
from nestner.selftest import tiny_spec
from nestner.spancodec import Span

WORDS = ["California", "State", "University", "is", "big"]


def tiny_net(variant="Base", seed=0, **kw):
    return build_model(tiny_spec(variant, **kw), WORDS, seed=seed)


def context_for(net, n, seed=0):
    if not net.spec.context_dim:
        return None
    return np.random.default_rng(seed).normal(size=(n, net.spec.context_dim))


class TestSpec:
    def test_defaults(self):
        spec = ModelSpec()
        assert (spec.variant, spec.max_length, spec.labels) == ("Base", 7, ("Concept",))
        assert spec.num_classes == 2 and spec.tag_names == ("O", "B-Concept")
        assert not spec.bidirectional

    def test_aliases(self):
        assert ModelSpec(variant="norm-flair", context_dim=4).variant == "NormFlair"
        assert ModelSpec(variant="input-drop", input_dropout=0.2).variant == "InputDrop"

    @pytest.mark.parametrize("kw", [
        dict(max_length=0), dict(labels=()), dict(labels=("A", "A")), dict(labels=("O",)),
        dict(labels=("two words",)), dict(variant="InputDrop"), dict(variant="NormFlair"),
        dict(variant="Transformer"), dict(lstm_dropout=1.0), dict(hidden_dim=0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpec):
            ModelSpec(**kw)

    def test_items_roundtrip(self):
        spec = ModelSpec(variant="NormFlair", max_length=6, labels=NER_LABELS, context_dim=7,
                         input_dropout=0.2, bidirectional=True)
        assert ModelSpec.from_items(dict(spec.to_items())) == spec


class TestStructure:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_heads_and_encoders(self, variant):
        net = tiny_net(variant)
        M = net.spec.max_length
        assert len(net.heads) == M
        assert len(net.sequence_layers) == (M if variant == "Multi" else 1)
        for head in net.heads:
            assert len(head.denses) == (2 if variant == "NormFlair" else 1)
            assert head.denses[-1].weight.shape[1] == net.spec.num_classes
        names = set(net.named_parameters())
        assert len(names) == len(net.parameters())
        assert ("seq.norm.gain" in names) == (variant in ("Norm", "NormFlair"))

    def test_multi_tasks_use_own_encoder(self):
        net = tiny_net("Multi")
        assert {p.name.split(".")[0] for p in net.sequence_parameters(2)} == {"seq2"}
        assert net.embedding.vectors in net.task_parameters(2)

    def test_shared_encoder(self):
        net = tiny_net("Base")
        assert net.sequence_parameters(1) == net.sequence_parameters(3)

    def test_frozen_embedding_not_a_task_parameter(self):
        emb = L.EmbeddingTable.random(WORDS, 4, nx.make_rng(0), trainable=False)
        net = PartlyLayeredNet.build(tiny_spec("Base"), emb)
        assert emb.vectors not in net.task_parameters(1)

    def test_embedding_dim_checked(self):
        emb = L.EmbeddingTable.random(WORDS, 6, nx.make_rng(0))
        with pytest.raises(InvalidSpec):
            PartlyLayeredNet.build(tiny_spec("Base"), emb)

    def test_inner_width_default(self):
        spec = tiny_spec("NormFlair", hidden_dim=8)
        assert spec.inner_width == 4
        assert build_model(spec, WORDS).heads[0].denses[0].weight.shape == (8, 4)


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shapes_and_determinism(self, variant):
        net = tiny_net(variant, labels=("Concept",))
        toks = WORDS[:3]
        ctx = context_for(net, 3)
        out = net.forward(toks, "eval", context=ctx)
        assert [t.shape for t in out] == [(3, 2)] * 3
        again = net.forward(toks, "eval", context=ctx)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(out, again))

    def test_train_mode_uses_dropout(self):
        net = tiny_net("InputDrop", input_dropout=0.5, tagging_dropout=0.5)
        a = net.forward(WORDS, "train", nx.make_rng(1))[0].data
        b = net.forward(WORDS, "train", nx.make_rng(2))[0].data
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("variant", ["Base", "Multi", "NormFlair"])
    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_batch_equals_single(self, variant, bidirectional):
        net = tiny_net(variant, bidirectional=bidirectional)
        sents = [WORDS, WORDS[:2], WORDS[1:4]]
        ctxs = [context_for(net, len(s), i) for i, s in enumerate(sents)]
        batch = net.make_batch(sents, ctxs if net.spec.context_dim else None)
        logits = net.forward_batch(batch)
        for b, s in enumerate(sents):
            single = net.forward(s, context=ctxs[b])
            for m in range(1, 4):
                np.testing.assert_allclose(logits[m].data[batch.rows(b)], single[m - 1].data,
                                           rtol=0, atol=1e-13)

    def test_context_vectors_required(self):
        net = tiny_net("NormFlair")
        with pytest.raises(DimMismatch):
            net.forward(WORDS)
        with pytest.raises(DimMismatch):
            net.forward(WORDS, context=np.zeros((len(WORDS), 2)))

    def test_predict_returns_spans_in_range(self):
        net = tiny_net("Base")
        for spans, toks in zip(net.predict([WORDS, WORDS[:1]]), [WORDS, WORDS[:1]]):
            assert all(s.end <= len(toks) and s.length <= 3 for s in spans)


class TestPredictTags:
    def test_all_outside(self):
        rows = predict_tags([np.array([[2.0, 0.0]] * 3)] * 3, ("Concept",))
        assert all(set(r.tags) == {"O"} for r in rows)

    def test_ties(self):
        (row,) = predict_tags([np.array([[1.0, 1.0], [0.0, 2.0]])], ("Concept",))
        assert row.tags == ("O", "B-Concept")
        (row,) = predict_tags([np.array([[0.0, 3.0, 3.0]])], ("DNA", "RNA"))
        assert row.tags == ("B-DNA",)

    def test_overrun_forced_outside(self):
        rows = predict_tags([np.array([[0.0, 5.0]] * 3)] * 3, ("Concept",))
        assert [r.tags.count("B-Concept") for r in rows] == [3, 2, 1]
        assert rows[2].tags == ("B-Concept", "O", "O")

    def test_reproduces_planted_tags(self, csu_spans):
        from nestner.spancodec import decode_spans, encode_bo
        rows = encode_bo(csu_spans, 3, 3)
        logits = [np.array([[0.0, 4.0] if t != "O" else [4.0, 0.0] for t in r.tags]) for r in rows]
        assert decode_spans(predict_tags(logits, ("Concept",))) == csu_spans


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_roundtrip_bitwise(self, tmp_path, variant):
        net = tiny_net(variant, seed=3, labels=("DNA", "RNA"), bidirectional=variant == "Norm")
        path = tmp_path / "m.ckpt"
        save_weights(net, path)
        back = load_weights(path, expected=net.spec)
        assert back.spec == net.spec and back.embedding.vocab == net.embedding.vocab
        assert back.checksum() == net.checksum()
        ctx = context_for(net, 4)
        for a, b in zip(net.forward(WORDS[:4], context=ctx), back.forward(WORDS[:4], context=ctx)):
            assert np.array_equal(a.data, b.data)
        assert checkpoint_bytes(back) == path.read_bytes()

    def test_wrong_max_length(self, tmp_path):
        net = tiny_net()
        save_weights(net, tmp_path / "m.ckpt")
        with pytest.raises(SpecMismatch):
            load_weights(tmp_path / "m.ckpt", expected=replace(net.spec, max_length=5))

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_weights(tiny_net(), path)
        blob = path.read_bytes()
        for cut in (len(blob) - 1, len(blob) // 2, 30):
            path.write_bytes(blob[:cut])
            with pytest.raises(CorruptFile):
                load_weights(path)

    def test_flipped_byte(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_weights(tiny_net(), path)
        blob = bytearray(path.read_bytes())
        blob[-40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptFile):
            load_weights(path)

    def test_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_weights(tiny_net(), path)
        path.write_bytes(path.read_bytes().replace(b"version=1", b"version=9", 1))
        with pytest.raises(VersionMismatch):
            load_weights(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_text("hello\n")
        with pytest.raises(CorruptFile):
            load_weights(path)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.sampled_from(WORDS + ["unseen"]), min_size=1, max_size=6), st.integers(1, 4))
def test_padding_never_leaks(tokens, extra):
    # a sentence batched next to a longer one sees exactly its own logits
    net = tiny_net("Norm")
    longer = tokens + ["big"] * extra
    batch = net.make_batch([tokens, longer])
    logits = net.forward_batch(batch)
    alone = net.forward(tokens)
    for m in range(1, 4):
        np.testing.assert_allclose(logits[m].data[batch.rows(0)], alone[m - 1].data, rtol=0, atol=1e-13)
