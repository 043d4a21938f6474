"""Finite-difference checks for every autodiff op and the energy compositions.

Each case is a builder ``rng -> (fn, arrays)`` where ``fn`` maps leaf tensors
to a scalar. Elementwise outputs are contracted with fixed random weights so
that every output entry contributes to the gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .constraints import (DiscriminativeConstraint, GenerativeConstraint, KeywordConstraint,
                          energy)
from .geometry import SoftSequence, token_log_distribution_t
from .models import (AttributeClassifier, CausalLM, ClassifierConfig, ConditionalLM,
                     EmbeddingTable, Lexicon, LMConfig, classifier_logprob)

FD_STEP = 1e-5
TOLERANCE = 1e-4


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.sum(ad.mul(out, ad.constant(w)))


def _unary(op, positive=False, shape=(3, 4)):
    def build(rng):
        x = rng.normal(size=shape)
        if positive:
            x = np.abs(x) + 0.5
        w = rng.normal(size=op(ad.constant(x)).shape)
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4), sout=None):
    def build(rng):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=sout or np.broadcast_shapes(sa, sb))
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _matmul(sa, sb):
    def build(rng):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=np.empty(sa).shape[:-1] + np.empty(sb).shape[1:])
        return (lambda x, y: _weighted(ad.matmul(x, y), w)), [a, b]
    return build


def _layer_norm(rng):
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    return (lambda a, gg, bb: _weighted(ad.layer_norm(a, gg, bb), w)), [x, g, b]


def _concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 3))
    return (lambda x, y: _weighted(ad.concat([x, y]), w)), [a, b]


def _slice(rng):
    a = rng.normal(size=(5, 3))
    w = rng.normal(size=(2, 3))
    return (lambda x: _weighted(x[1:3], w)), [a]


def _take_rows(rng):
    a = rng.normal(size=(5, 3))
    ids = [4, 0, 4, 2]
    w = rng.normal(size=(4, 3))
    return (lambda x: _weighted(ad.take_rows(x, ids), w)), [a]


def _pick(rng):
    a = rng.normal(size=(4, 5))
    cols = [1, 0, 4, 4]
    w = rng.normal(size=4)
    return (lambda x: _weighted(ad.pick(x, cols), w)), [a]


def _tile(rng):
    v = rng.normal(size=4)
    w = rng.normal(size=(3, 4))
    return (lambda x: _weighted(ad.tile_rows(x, 3), w)), [v]


def _reduce(axis, use_mean=False):
    def build(rng):
        a = rng.normal(size=(3, 4))
        red = ad.mean if use_mean else ad.sum
        shape = np.empty((3, 4)).sum(axis=axis).shape
        w = rng.normal(size=shape)
        return (lambda x: _weighted(red(x, axis), w)), [a]
    return build


def _scalar_mul(rng):
    a, s = rng.normal(size=(3, 4)), rng.normal()
    w = rng.normal(size=(3, 4))
    return (lambda x, y: _weighted(ad.mul(x, y), w)), [a, np.asarray(s)]


def _composition(rng):
    """Three layers: matmul -> tanh -> layer_norm -> softmax -> log."""
    x = rng.normal(size=(4, 5))
    w1 = rng.normal(size=(5, 6)) * 0.5
    w2 = rng.normal(size=(6, 3)) * 0.5
    g, b = np.ones(6) + 0.1 * rng.normal(size=6), 0.1 * rng.normal(size=6)
    weights = rng.normal(size=(4, 3))

    def fn(a, m1, m2):
        h = ad.tanh(a @ m1)
        h = ad.layer_norm(h, ad.constant(g), ad.constant(b))
        p = ad.softmax(h @ m2)
        return _weighted(ad.log(p), weights)

    return fn, [x, w1, w2]


OP_CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_scalar": _scalar_mul,
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "neg": _unary(ad.neg),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "tanh": _unary(ad.tanh),
    "square": _unary(ad.square),
    "softmax": _unary(ad.softmax),
    "log_softmax": _unary(ad.log_softmax),
    "logsumexp": _unary(ad.logsumexp, shape=(4,)),
    "transpose": _unary(ad.transpose),
    "reshape": _unary(lambda a: ad.reshape(a, (2, 6))),
    "sum_all": _reduce(None),
    "sum_axis0": _reduce(0),
    "mean_axis1": _reduce(1, use_mean=True),
    "matmul_mm": _matmul((3, 4), (4, 2)),
    "matmul_mv": _matmul((3, 4), (4,)),
    "matmul_vm": _matmul((4,), (4, 2)),
    "sqdist": _binary(ad.sqdist, (3, 4), (5, 4), (3, 5)),
    "layer_norm": _layer_norm,
    "concat": _concat,
    "slice": _slice,
    "take_rows": _take_rows,
    "pick": _pick,
    "tile_rows": _tile,
    "composition": _composition,
}


# --------------------------------------------------------------------------
# model compositions on a tiny random world

def tiny_world(rng, V: int = 10, d: int = 8):
    lex = Lexicon(["<s>"] + [f"w{i}" for i in range(1, V)])
    table = EmbeddingTable.random(lex, d, rng, scale=0.7)
    lm = CausalLM.init(table, LMConfig(d_ff=12, context_limit=32, init_scale=0.4), rng)
    for k in lm.params:
        if k.endswith(".b") or k.startswith("out"):
            lm.params[k] = 0.2 * rng.normal(size=lm.params[k].shape)
    clf = AttributeClassifier.init(table, ClassifierConfig(hidden=6, init_scale=0.8), rng)
    lm2 = CausalLM.init(table, LMConfig(d_ff=12, context_limit=32, init_scale=0.4), rng)
    cond = ConditionalLM(["a", "b"], [lm, lm2])
    return table, lm, clf, cond


def _soft_vectors(table, rng, L):
    ids = rng.integers(1, table.vocab_size, size=L)
    return table.weight[ids] + 0.3 * rng.normal(size=(L, table.dim))


def _lm_case(rng):
    table, lm, _, _ = tiny_world(rng)
    x = _soft_vectors(table, rng, 3)
    prompt = [1, 2]
    seq = SoftSequence(x).refresh(table)
    return (lambda v: lm.nll(prompt, seq, v)), [x]


def _lm_param_case(rng):
    table, lm, _, _ = tiny_world(rng)
    x = _soft_vectors(table, rng, 3)
    seq = SoftSequence(x).refresh(table)

    def fn(wq, w1):
        P = lm.tensors()
        P["l0.wq"], P["l0.w1"] = wq, w1
        return lm.nll([3], seq, ad.constant(x), params=P)

    return fn, [lm.params["l0.wq"], lm.params["l0.w1"]]


def _clf_case(rng):
    table, _, clf, _ = tiny_world(rng)
    x = _soft_vectors(table, rng, 4)
    seq = SoftSequence(x).refresh(table)
    return (lambda v: classifier_logprob(clf, [1], seq, 1, v)), [x]


def _gen_case(rng):
    table, _, _, cond = tiny_world(rng)
    x = _soft_vectors(table, rng, 3)
    seq = SoftSequence(x).refresh(table)
    c = GenerativeConstraint(cond, 0, 1)
    return (lambda v: c.f([2], seq, v)), [x]


def _keyword_case(rng):
    table, _, _, _ = tiny_world(rng)
    x = _soft_vectors(table, rng, 4)
    seq = SoftSequence(x).refresh(table)
    seed = int(rng.integers(1 << 30))
    kc = KeywordConstraint.__new__(KeywordConstraint)
    kc.table, kc.phrase, kc.tau, kc.hard = table, [3, 5], 0.7, False

    def fn(v):
        return kc.f((), seq, v, np.random.default_rng(seed))

    return fn, [x]


def _pi_case(rng):
    table, _, _, _ = tiny_world(rng)
    x = _soft_vectors(table, rng, 3)
    w = rng.normal(size=(3, table.vocab_size))
    return (lambda v, E: _weighted(token_log_distribution_t(E, v), w)), [x, table.weight.copy()]


def _energy_case(rng):
    table, lm, clf, cond = tiny_world(rng)
    x = _soft_vectors(table, rng, 3)
    seq = SoftSequence(x).refresh(table)
    cs = [DiscriminativeConstraint(clf, 1, 0.9), GenerativeConstraint(cond, 0, 1)]
    cs[0].lam, cs[1].lam = 0.7, 1.3
    return (lambda v: energy([4], seq, lm, cs, v).energy), [x]


COMPOSITION_CASES = {
    "lm_nll": _lm_case,
    "lm_nll_params": _lm_param_case,
    "classifier_logprob": _clf_case,
    "generative_constraint": _gen_case,
    "keyword_distance_relaxed": _keyword_case,
    "token_log_distribution": _pi_case,
    "energy": _energy_case,
}


@dataclass
class GradCheckResult:
    name: str
    instances: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(instances_per_case: int = 4, seed: int = 0, cases: dict | None = None) -> list[GradCheckResult]:
    cases = cases or {**OP_CASES, **COMPOSITION_CASES}
    results = []
    for k, (name, build) in enumerate(cases.items()):
        worst = 0.0
        for i in range(instances_per_case):
            rng = np.random.default_rng([seed, k, i])
            fn, arrays = build(rng)
            worst = max(worst, ad.gradcheck(fn, *arrays, h=FD_STEP))
        results.append(GradCheckResult(name, instances_per_case, worst))
    return results
