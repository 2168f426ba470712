"""Built-in consistency checks run by ``nestner selftest``.

Gradient checks compare tape gradients against central differences on tiny
models; codec checks round-trip random span sets through the BO encoding.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import layers as L
from . import numerics as nx
from .model import PartlyLayeredNet, ModelSpec, VARIANTS
from .spancodec import Span, assign_nested_levels, decode_spans, encode_bo
from .training import ClassWeightTable, make_example, task_loss

GRAD_TOL = 1e-4


def op_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = nx.make_rng(seed, 99)
    a = rng.normal(size=(3, 4))
    w = nx.Tensor(rng.normal(size=(4, 2)))
    b = nx.Tensor(rng.normal(size=(3, 4)))
    bias = nx.Tensor(rng.normal(size=4))
    shift = nx.Tensor(np.full((3, 4), 0.3))
    out = {
        "matmul": nx.check_gradient(lambda x: nx.sum_all(nx.matmul(x, w)), a),
        "add_bias": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.add_bias(x, bias), b)), a),
        "mul": nx.check_gradient(lambda x: nx.sum_all(nx.mul(x, x)), a),
        "sub": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.sub(x, b), b)), a),
        "sigmoid": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.sigmoid(x), b)), a),
        "tanh": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.tanh(x), b)), a),
        # keep inputs away from the kink at 0
        "relu": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.relu(nx.add(x, shift)), b)),
                                  np.where(np.abs(a + 0.3) < 0.05, 0.5, a)),
        "softmax_rows": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.softmax_rows(x), b)), a),
        "gather_rows": nx.check_gradient(lambda x: nx.sum_all(nx.mul(nx.gather_rows(x, [2, 0, 2]), b)), a),
        "concat": nx.check_gradient(
            lambda x: nx.sum_all(nx.mul(nx.concat_rows([nx.slice_rows(x, 1, 3), nx.slice_rows(x, 0, 1)]),
                                        nx.concat_cols([nx.slice_cols(b, 0, 2), nx.slice_cols(b, 2, 4)]))), a),
    }
    return out


def layer_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = nx.make_rng(seed, 98)
    x = rng.normal(size=(5, 4))
    proj = nx.Tensor(rng.normal(size=(5, 6)))
    dense_p = L.DenseParams.init(4, 6, rng, "d")
    gain = nx.Tensor(rng.normal(size=6) + 1.0)
    bias = nx.Tensor(rng.normal(size=6))
    out = {
        "dense": nx.check_gradient(lambda t: nx.sum_all(nx.mul(L.dense(t, dense_p), proj)), x),
        "layer_norm": nx.check_gradient(
            lambda t: nx.sum_all(nx.mul(L.layer_norm(L.dense(t, dense_p), gain, bias), proj)), x),
    }
    z, state = rng.normal(size=(5, 12)), rng.normal(size=(5, 6))
    cell_proj = nx.Tensor(rng.normal(size=(5, 6)))
    out["lstm_cell.first"] = nx.check_gradient(lambda t: nx.sum_all(nx.mul(L.lstm_cell(t, None), cell_proj)), z)
    out["lstm_cell.z"] = nx.check_gradient(
        lambda t: nx.sum_all(nx.mul(L.lstm_cell(t, nx.Tensor(state)), cell_proj)), z)
    out["lstm_cell.state"] = nx.check_gradient(
        lambda t: nx.sum_all(nx.mul(L.lstm_cell(nx.Tensor(z), t), cell_proj)), state)
    for tag, bidir in (("lstm", False), ("lstm_bidirectional", True)):
        p = L.LstmParams.init(4, 3, 2, rng, tag, bidirectional=bidir)
        target = nx.Tensor(rng.normal(size=(5, p.output_dim)))
        out[tag] = nx.check_gradient(lambda t: nx.sum_all(nx.mul(L.lstm_forward(t, p), target)), x)
        errs = nx.check_parameter_gradients(
            lambda: nx.sum_all(nx.mul(L.lstm_forward(nx.Tensor(x), p), target)), p.parameters())
        out[f"{tag}.parameters"] = max(errs.values())
    return out


def tiny_spec(variant: str, **kw) -> ModelSpec:
    labels = kw.pop("labels", ("Concept",))
    base = dict(variant=variant, max_length=3, labels=labels, embedding_dim=4, hidden_dim=5,
                num_layers=2, lstm_dropout=0.0, tagging_dropout=0.0,
                input_dropout=0.0 if variant == "InputDrop" else None,
                context_dim=3 if variant == "NormFlair" else 0)
    base.update(kw)
    return ModelSpec(**base)


# NormFlair has a ReLU between its dense layers; a smaller step keeps the
# stencil from straddling the kink
MODEL_CHECK_EPS = {"NormFlair": 3e-4}


def model_gradient_errors(variant: str, seed: int = 0, labels=("Concept", "Other"),
                          eps: float | None = None, points: int = 5, **spec_kw) -> dict[str, float]:
    """Per-parameter error of every task loss of a tiny ``variant`` model.

    Deep recurrent weights get gradient entries near 1e-8, where two-point
    differences at eps=1e-5 hit round-off; the five-point stencil resolves them.
    """
    spec = tiny_spec(variant, labels=labels, **spec_kw)
    eps = eps if eps is not None else MODEL_CHECK_EPS.get(spec.variant, 1e-3)
    sents = [("a", "b", "c", "d"), ("c", "a", "e")]
    spans = [{Span(0, 2, labels[0]), Span(1, 1, labels[-1])}, {Span(0, 3, labels[0])}]
    net = PartlyLayeredNet.build(spec, L.EmbeddingTable.random("abcde", spec.embedding_dim,
                                                                nx.make_rng(seed, 3)), seed)
    rng = nx.make_rng(seed, 97)
    examples = [make_example(t, s, spec.labels, spec.max_length,
                             rng.normal(size=(len(t), spec.context_dim)) if spec.context_dim else None, f"x{i}")
                for i, (t, s) in enumerate(zip(sents, spans))]
    weights = ClassWeightTable.uniform(spec.max_length, spec.num_classes)
    errors = {}
    for m in range(1, spec.max_length + 1):
        w = weights.for_length(m) * np.linspace(1.0, 2.0, spec.num_classes)  # non-uniform weights
        errs = nx.check_parameter_gradients(lambda: task_loss(net, examples, m, w, "eval"),
                                            net.task_parameters(m), eps, points)
        errors.update({f"task{m}:{k}": v for k, v in errs.items()})
    return errors


def random_spans(rng, n: int, max_length: int, labels=("Concept",), count=None) -> set[Span]:
    count = int(rng.integers(0, 2 * n + 1)) if count is None else count
    out = set()
    for _ in range(count):
        m = int(rng.integers(1, min(max_length, n) + 1))
        out.add(Span(int(rng.integers(0, n - m + 1)), m, labels[int(rng.integers(len(labels)))]))
    return out


def codec_roundtrip_failures(trials: int = 500, seed: int = 0) -> int:
    rng = nx.make_rng(seed, 96)
    bad = 0
    for _ in range(trials):
        n = int(rng.integers(1, 31))
        M = int(rng.integers(1, 8))
        spans = random_spans(rng, n, M, ("A", "B"))
        # one label per (start, length): encoding is only defined for unambiguous gold
        unique = {}
        for s in sorted(spans):
            unique.setdefault((s.start, s.length), s)
        spans = set(unique.values())
        if decode_spans(encode_bo(spans, n, M)) != spans:
            bad += 1
    return bad


def _chain_levels(spans: set[Span]) -> dict[Span, int]:
    intervals = sorted({(s.start, s.end) for s in spans})
    best = {}
    for iv in intervals:
        inner = [j for j in intervals if j != iv and iv[0] <= j[0] and j[1] <= iv[1]]
        best[iv] = 1
        for r in range(1, len(inner) + 1):
            for combo in itertools.combinations(inner, r):
                chain = sorted(combo, key=lambda j: j[1] - j[0])
                if all(chain[k + 1] != chain[k] and chain[k + 1][0] <= chain[k][0] and chain[k][1] <= chain[k + 1][1]
                       for k in range(len(chain) - 1)):
                    best[iv] = max(best[iv], r + 1)
    return {s: best[(s.start, s.end)] for s in spans}


def nesting_failures(trials: int = 200, seed: int = 0) -> int:
    rng = nx.make_rng(seed, 95)
    bad = 0
    for _ in range(trials):
        spans = random_spans(rng, 10, 6, count=int(rng.integers(0, 9)))
        got = {ns.span: ns.level for ns in assign_nested_levels(spans)}
        if got != _chain_levels(spans):
            bad += 1
    return bad


def run_selftest(verbose: bool = True) -> list[str]:
    failures = []

    def report(name, ok, detail):
        if verbose:
            print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failures.append(name)

    for group, errs in (("op", op_gradient_errors()), ("layer", layer_gradient_errors())):
        for k, v in errs.items():
            report(f"{group} gradient {k}", v <= GRAD_TOL, f"max rel error {v:.2e}")
    for variant in VARIANTS:
        worst = max(model_gradient_errors(variant).values())
        report(f"{variant} loss gradient", worst <= GRAD_TOL, f"max rel error {worst:.2e}")
    bad = codec_roundtrip_failures()
    report("codec round trip", bad == 0, f"{bad}/500 mismatches")
    bad = nesting_failures()
    report("nested levels", bad == 0, f"{bad}/200 mismatches")
    return failures
