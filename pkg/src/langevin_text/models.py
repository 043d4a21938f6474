"""Desk-scale neural models sharing one embedding table.

All models read token embeddings from a single :class:`EmbeddingTable`. The
causal LM ties its input and output embeddings to that table; classifiers and
class-conditional LMs take embedding sequences directly and never update it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import SoftSequence, verify_separation

log = logging.getLogger(__name__)

BOS = "<s>"
CHECKPOINT_VERSION = 1
_MAGIC = b"LTCK"


class TrainingDiverged(RuntimeError):
    pass


class ContextLengthError(ValueError):
    pass


# --------------------------------------------------------------------------
# lexicon and table

class Lexicon:
    """Whitespace word-level token <-> id map. Id 0 is always the BOS marker."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != BOS:
            raise ValueError("lexicon must start with the BOS token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in lexicon")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_corpus(cls, lines: Sequence[str]) -> "Lexicon":
        words = sorted({w for line in lines for w in line.split()} - {BOS})
        return cls([BOS, *words])

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in lexicon") from None

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)


class EmbeddingTable:
    """The shared V x d matrix. Models hold a reference, never a copy."""

    def __init__(self, weight: np.ndarray, lexicon: Lexicon):
        weight = np.ascontiguousarray(weight, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] != len(lexicon):
            raise ValueError(f"table shape {weight.shape} does not match lexicon size {len(lexicon)}")
        self.weight = weight
        self.lexicon = lexicon
        self.frozen = False

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weight, dtype="<f8").tobytes())
        h.update("\x00".join(self.lexicon.tokens).encode())
        return h.hexdigest()

    @classmethod
    def random(cls, lexicon: Lexicon, dim: int, rng: np.random.Generator,
               scale: float = 0.5) -> "EmbeddingTable":
        return cls(rng.normal(0.0, scale, size=(len(lexicon), dim)), lexicon)


def _positions(n: int, d: int, offset: np.ndarray | None = None) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64) if offset is None else offset.astype(np.float64)
    k = np.arange(d // 2, dtype=np.float64)
    freq = 1.0 / (100.0 ** (2 * k / d))
    ang = pos[:, None] * freq[None, :]
    out = np.zeros((len(pos), d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : d - d // 2]
    return 0.5 * out


def _attention_mask(segments: np.ndarray) -> np.ndarray:
    T = len(segments)
    causal = np.tril(np.ones((T, T), dtype=bool))
    same = segments[:, None] == segments[None, :]
    return np.where(causal & same, 0.0, -1e9)


# --------------------------------------------------------------------------
# causal language model

@dataclass
class LMConfig:
    d_ff: int = 64
    n_layers: int = 1
    context_limit: int = 1100
    init_scale: float = 0.1


class CausalLM:
    """Small pre-norm causal transformer with tied input/output embeddings.

    ``params`` holds every weight except the embedding table, which lives on
    ``table`` and is shared by reference.
    """

    kind = "lm"

    def __init__(self, table: EmbeddingTable, params: dict[str, np.ndarray], config: LMConfig):
        self.table = table
        self.params = params
        self.config = config

    @classmethod
    def init(cls, table: EmbeddingTable, config: LMConfig | None = None,
             rng: np.random.Generator | None = None, zero: bool = False) -> "CausalLM":
        config = config or LMConfig()
        rng = rng or np.random.default_rng(0)
        d, f, s = table.dim, config.d_ff, config.init_scale
        params: dict[str, np.ndarray] = {}
        for i in range(config.n_layers):
            params[f"l{i}.ln1.g"] = np.ones(d)
            params[f"l{i}.ln1.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                params[f"l{i}.{name}"] = rng.normal(0, s, (d, d))
            params[f"l{i}.ln2.g"] = np.ones(d)
            params[f"l{i}.ln2.b"] = np.zeros(d)
            params[f"l{i}.w1"] = rng.normal(0, s, (d, f))
            params[f"l{i}.b1"] = np.zeros(f)
            params[f"l{i}.w2"] = rng.normal(0, s, (f, d))
            params[f"l{i}.b2"] = np.zeros(d)
        params["lnf.g"] = np.ones(d)
        params["lnf.b"] = np.zeros(d)
        params["out.b"] = np.zeros(table.vocab_size)
        if zero:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(table, params, config)

    # -- graph construction -------------------------------------------------

    def tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad) for k, v in self.params.items()}

    def hidden(self, P: dict[str, ad.Tensor], x: ad.Tensor,
               segments: np.ndarray | None = None, offsets: np.ndarray | None = None) -> ad.Tensor:
        T, d = x.shape
        longest = T if offsets is None else int(offsets.max()) + 1
        if longest > self.config.context_limit:
            raise ContextLengthError(f"sequence of length {longest} exceeds context limit "
                                     f"{self.config.context_limit}")
        segments = np.zeros(T, dtype=np.int64) if segments is None else segments
        h = ad.add(x, ad.constant(_positions(T, d, offsets)))
        mask = ad.constant(_attention_mask(segments))
        inv = 1.0 / np.sqrt(d)
        for i in range(self.config.n_layers):
            a = ad.layer_norm(h, P[f"l{i}.ln1.g"], P[f"l{i}.ln1.b"])
            q = a @ P[f"l{i}.wq"]
            k = a @ P[f"l{i}.wk"]
            v = a @ P[f"l{i}.wv"]
            att = ad.softmax(ad.add(ad.scale(q @ k.T, inv), mask))
            h = h + (att @ v) @ P[f"l{i}.wo"]
            a = ad.layer_norm(h, P[f"l{i}.ln2.g"], P[f"l{i}.ln2.b"])
            ff = ad.tanh(ad.add(a @ P[f"l{i}.w1"], ad.tile_rows(P[f"l{i}.b1"], T)))
            h = h + ad.add(ff @ P[f"l{i}.w2"], ad.tile_rows(P[f"l{i}.b2"], T))
        return ad.layer_norm(h, P["lnf.g"], P["lnf.b"])

    def logits(self, P, E: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
        return ad.add(h @ E.T, ad.tile_rows(P["out.b"], h.shape[0]))

    # -- scoring ------------------------------------------------------------

    def nll(self, prompt: Sequence[int], seq: SoftSequence, vectors: ad.Tensor | None = None,
            *, prefix: Sequence[int] = (), include_prompt: bool = False,
            params: dict[str, ad.Tensor] | None = None, table: ad.Tensor | None = None) -> ad.Tensor:
        """Negative log-likelihood (nats) of the continuous outputs given the context.

        The context is ``[BOS] + prefix + prompt`` looked up from the table. Each
        output factor is ``softmax(h . e_j + b_j)`` evaluated at the continuous
        target vector in place of a table row, with the bias of its projected
        id. ``include_prompt`` also scores the prompt tokens (as constants).
        """
        P = params or self.tensors()
        E = table if table is not None else ad.constant(self.table.weight)
        vec = vectors if vectors is not None else ad.constant(seq.vectors)
        if seq.projected_ids is None:
            seq.refresh(self.table)
        ctx = [0, *prefix, *prompt]
        L = vec.shape[0]
        x = ad.concat([ad.take_rows(E, ctx), vec])
        h = self.hidden(P, x)
        start = len(ctx) - 1
        hs = h[start:start + L]
        lse = ad.logsumexp(self.logits(P, E, hs))
        bias = P["out.b"].data[np.asarray(seq.projected_ids)]
        tgt = ad.add(ad.sum(ad.mul(hs, vec), axis=1), ad.constant(bias))
        total = ad.sum(ad.sub(lse, tgt))
        if include_prompt and prompt:
            k = len(prefix)
            lp = ad.log_softmax(self.logits(P, E, h[k:k + len(prompt)]))
            total = ad.sub(total, ad.sum(ad.pick(lp, list(prompt))))
        return total

    def sequence_nll(self, prompt: Sequence[int], ids: Sequence[int], *,
                     prefix: Sequence[int] = ()) -> float:
        """Teacher-forced NLL (nats) of discrete output tokens given the context."""
        ctx = [0, *prefix, *prompt]
        full = ctx + list(ids)
        P = self.tensors()
        E = ad.constant(self.table.weight)
        h = self.hidden(P, ad.take_rows(E, full))
        lp = ad.log_softmax(self.logits(P, E, h[len(ctx) - 1:len(full) - 1]))
        return -float(ad.pick(lp, list(ids)).data.sum())

    def token_nlls(self, prompt: Sequence[int], ids: Sequence[int]) -> np.ndarray:
        full = [0, *prompt, *ids]
        P = self.tensors()
        E = ad.constant(self.table.weight)
        h = self.hidden(P, ad.take_rows(E, full))
        lp = ad.log_softmax(self.logits(P, E, h[len(prompt):len(full) - 1]))
        return -ad.pick(lp, list(ids)).data

    def next_token_probs(self, context: Sequence[int]) -> np.ndarray:
        full = [0, *context]
        P = self.tensors()
        E = ad.constant(self.table.weight)
        h = self.hidden(P, ad.take_rows(E, full))
        return ad.softmax(self.logits(P, E, h[len(full) - 1:len(full)])).data[0]


def lm_nll(lm: CausalLM, prompt: Sequence[int], seq: SoftSequence,
           vectors: ad.Tensor | None = None, **kw) -> ad.Tensor:
    if not np.all(np.isfinite(seq.vectors)):
        raise ad.NonFiniteError("non-finite output vectors")
    return lm.nll(prompt, seq, vectors, **kw)


# --------------------------------------------------------------------------
# attribute classifier

@dataclass
class ClassifierConfig:
    hidden: int = 32
    labels: tuple[str, ...] = ("negative", "positive")
    init_scale: float = 0.3


class AttributeClassifier:
    """Mean-pooled one-layer encoder reading token embeddings directly."""

    kind = "classifier"

    def __init__(self, table: EmbeddingTable, params: dict[str, np.ndarray], config: ClassifierConfig):
        self.table = table
        self.params = params
        self.config = config

    @property
    def n_labels(self) -> int:
        return len(self.config.labels)

    @classmethod
    def init(cls, table, config: ClassifierConfig | None = None, rng=None, zero: bool = False):
        config = config or ClassifierConfig()
        rng = rng or np.random.default_rng(0)
        d, hdim, C = table.dim, config.hidden, len(config.labels)
        params = {
            "w1": rng.normal(0, config.init_scale, (d, hdim)),
            "b1": np.zeros(hdim),
            "w2": rng.normal(0, config.init_scale, (hdim, C)),
            "b2": np.zeros(C),
        }
        if zero:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(table, params, config)

    def tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad) for k, v in self.params.items()}

    def _encode(self, P, x: ad.Tensor) -> ad.Tensor:
        T = x.shape[0]
        return ad.tanh(ad.add(x @ P["w1"], ad.tile_rows(P["b1"], T)))

    def log_probs(self, prompt: Sequence[int], vectors: ad.Tensor,
                  params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        P = params or self.tensors()
        E = ad.constant(self.table.weight)
        x = ad.concat([ad.take_rows(E, list(prompt)), vectors]) if len(prompt) else vectors
        pooled = ad.mean(self._encode(P, x), axis=0)
        return ad.log_softmax(ad.add(pooled @ P["w2"], P["b2"]))

    def predict_ids(self, ids: Sequence[int]) -> np.ndarray:
        """Class probabilities for a discrete token sequence."""
        x = ad.constant(self.table.weight[np.asarray(ids, dtype=np.int64)])
        return np.exp(self.log_probs((), x).data)


def classifier_logprob(clf: AttributeClassifier, prompt: Sequence[int], seq: SoftSequence,
                       label: int, vectors: ad.Tensor | None = None) -> ad.Tensor:
    if not 0 <= label < clf.n_labels:
        raise IndexError(f"label {label} out of range for {clf.n_labels} labels")
    vec = vectors if vectors is not None else ad.constant(seq.vectors)
    return clf.log_probs(prompt, vec)[label]


# --------------------------------------------------------------------------
# class-conditional LMs

class ConditionalLM:
    """p(text | label) through either one LM per label or one LM with a label prefix."""

    kind = "conditional"

    def __init__(self, labels: Sequence[str], lms: Sequence[CausalLM],
                 prefixes: Sequence[Sequence[int]] | None = None):
        self.labels = list(labels)
        self.lms = list(lms)
        if prefixes is None:
            if len(self.lms) != len(self.labels):
                raise ValueError("need one LM per label when no verbalizer prefixes are given")
            self.prefixes = [()] * len(self.labels)
        else:
            if len(self.lms) != 1 or len(prefixes) != len(self.labels):
                raise ValueError("verbalizer variant takes one LM and one prefix per label")
            self.lms = self.lms * len(self.labels)
            self.prefixes = [tuple(p) for p in prefixes]
        tables = {id(lm.table) for lm in self.lms}
        if len(tables) != 1:
            raise ValueError("all class-conditional LMs must share one embedding table")
        self.table = self.lms[0].table

    def class_nll(self, label: int, prompt, seq: SoftSequence,
                  vectors: ad.Tensor | None = None) -> ad.Tensor:
        return self.lms[label].nll(prompt, seq, vectors, prefix=self.prefixes[label],
                                   include_prompt=True)


def generative_log_posterior(cond: ConditionalLM, prompt, seq: SoftSequence,
                             vectors: ad.Tensor | None = None) -> ad.Tensor:
    """log p(label | prompt, text) for every label under a uniform prior."""
    nlls = [cond.class_nll(k, prompt, seq, vectors) for k in range(len(cond.labels))]
    stacked = ad.concat([ad.reshape(ad.neg(n), (1,)) for n in nlls])
    return ad.log_softmax(stacked)


def generative_classprob(cond: ConditionalLM, prompt, seq: SoftSequence, label: int) -> float:
    return float(np.exp(generative_log_posterior(cond, prompt, seq).data[label]))


# --------------------------------------------------------------------------
# autoregressive sampling

def nucleus_filter(probs: np.ndarray, nucleus_p: float) -> np.ndarray:
    """Renormalised smallest prefix of the sorted distribution with mass >= nucleus_p."""
    if not 0.0 < nucleus_p <= 1.0:
        raise ValueError(f"nucleus_p must be in (0, 1], got {nucleus_p}")
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    keep = int(np.searchsorted(csum, nucleus_p * csum[-1], side="left")) + 1
    out = np.zeros_like(probs)
    kept = order[:min(keep, len(order))]
    out[kept] = probs[kept]
    return out / out.sum()


def ar_sample(lm: CausalLM, prompt: Sequence[int], max_len: int, nucleus_p: float = 0.96,
              rng: np.random.Generator | None = None) -> list[int]:
    """Left-to-right nucleus sampling."""
    if not 0.0 < nucleus_p <= 1.0:
        raise ValueError(f"nucleus_p must be in (0, 1], got {nucleus_p}")
    rng = rng or np.random.default_rng()
    out: list[int] = []
    for _ in range(max_len):
        probs = nucleus_filter(lm.next_token_probs([*prompt, *out]), nucleus_p)
        cdf = np.cumsum(probs)
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        out.append(min(tok, len(probs) - 1))
    return out


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    holdout_fraction: float = 0.1
    optimizer: str = "adam"
    train_table: bool = True
    log_every: int = 100


@dataclass
class TrainSummary:
    train_loss: float
    heldout_nll: float
    uniform_nll: float
    steps: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


class _Adam:
    def __init__(self, arrays: dict[str, np.ndarray], lr: float, kind: str = "adam",
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.arrays, self.lr, self.kind = arrays, lr, kind
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            arr = self.arrays[k]
            if self.kind == "sgd":
                arr -= self.lr * g
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            arr -= self.lr * mh / (np.sqrt(vh) + self.eps)


def _split(items: list, frac: float, rng: np.random.Generator) -> tuple[list, list]:
    order = rng.permutation(len(items))
    n_hold = max(1, int(round(frac * len(items)))) if len(items) > 1 else 0
    hold = [items[i] for i in order[:n_hold]]
    train = [items[i] for i in order[n_hold:]] or hold
    return train, hold


def _pack(seqs: Sequence[Sequence[int]]):
    tokens, targets, segs, offs = [], [], [], []
    for s, seq in enumerate(seqs):
        full = [0, *seq]
        tokens.extend(full[:-1])
        targets.extend(full[1:])
        segs.extend([s] * (len(full) - 1))
        offs.extend(range(len(full) - 1))
    return (np.asarray(tokens), np.asarray(targets), np.asarray(segs), np.asarray(offs))


def _lm_batch_loss(lm: CausalLM, P, E: ad.Tensor, seqs) -> ad.Tensor:
    tokens, targets, segs, offs = _pack(seqs)
    h = lm.hidden(P, ad.take_rows(E, tokens), segments=segs, offsets=offs)
    lp = ad.log_softmax(lm.logits(P, E, h))
    return ad.neg(ad.mean(ad.pick(lp, targets)))


def corpus_nll(lm: CausalLM, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """Mean per-token NLL of discrete sequences (each scored after BOS)."""
    P = lm.tensors()
    E = ad.constant(lm.table.weight)
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        n = sum(len(s) for s in chunk)
        total += _lm_batch_loss(lm, P, E, chunk).item() * n
        count += n
    return total / count




def train_lm(corpus: Sequence[Sequence[int]], table: EmbeddingTable,
             config: TrainConfig | None = None, lm_config: LMConfig | None = None,
             init: CausalLM | None = None, prefixes: Sequence[Sequence[int]] | None = None) -> tuple[CausalLM, TrainSummary]:
    """Fit a causal LM on token-id sequences.

    ``init`` warm-starts from an existing LM (its params are copied).
    ``prefixes`` optionally prepends a per-sequence verbalizer that is
    conditioned on but not scored.
    """
    config = config or TrainConfig()
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    rng = np.random.default_rng(config.seed)
    if init is not None:
        lm = CausalLM(table, {k: v.copy() for k, v in init.params.items()}, init.config)
    else:
        lm = CausalLM.init(table, lm_config, rng)
    items = list(zip(corpus, prefixes)) if prefixes is not None else [(s, ()) for s in corpus]
    train, hold = _split(items, config.holdout_fraction, rng)
    arrays = dict(lm.params)
    train_table = config.train_table and not table.frozen
    if train_table:
        arrays["__table__"] = table.weight
    opt = _Adam(arrays, config.lr, config.optimizer)

    def batch_loss(batch, P, E):
        seqs = [list(p) + list(s) for s, p in batch]
        if not any(p for _, p in batch):
            return _lm_batch_loss(lm, P, E, seqs)
        # mask out prefix positions from the loss
        tokens, targets, segs, offs = _pack(seqs)
        keep = np.concatenate([np.arange(len(s) + len(p)) >= len(p) for s, p in batch])
        h = lm.hidden(P, ad.take_rows(E, tokens), segments=segs, offsets=offs)
        lp = ad.log_softmax(lm.logits(P, E, h[np.flatnonzero(keep)]))
        return ad.neg(ad.mean(ad.pick(lp, targets[keep])))

    loss_v = float("nan")
    for step in range(config.steps):
        idx = rng.choice(len(train), size=min(config.batch_size, len(train)), replace=False)
        batch = [train[i] for i in idx]
        P = lm.tensors(requires_grad=True)
        E = ad.Tensor(table.weight, requires_grad=train_table)
        loss = batch_loss(batch, P, E)
        loss_v = loss.item()
        if not np.isfinite(loss_v):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        grads = ad.backward(loss)
        g = {k: grads[t] for k, t in P.items() if t in grads}
        if train_table and E in grads:
            g["__table__"] = grads[E]
        opt.step(g)
        if config.log_every and step % config.log_every == 0:
            log.info("lm step %d loss %.4f", step, loss_v)

    P = lm.tensors()
    E = ad.constant(table.weight)
    hold_nll = float("nan")
    if hold:
        n_tok = [len(s) for s, _ in hold]
        parts = [batch_loss(hold[i:i + 64], P, E).item() * sum(n_tok[i:i + 64])
                 for i in range(0, len(hold), 64)]
        hold_nll = sum(parts) / sum(n_tok)
    if not np.isfinite(hold_nll):
        raise TrainingDiverged("held-out NLL is non-finite")
    sep = verify_separation(table)
    summary = TrainSummary(loss_v, hold_nll, float(np.log(table.vocab_size)), config.steps,
                           {"separation_ok": sep.ok, "separation_violations": len(sep.violations),
                            "column_margin": sep.column_margin})
    return lm, summary


def train_classifier(sequences: Sequence[Sequence[int]], labels: Sequence[int],
                     table: EmbeddingTable, config: TrainConfig | None = None,
                     clf_config: ClassifierConfig | None = None) -> tuple[AttributeClassifier, TrainSummary]:
    """Fit the classifier with the shared table held fixed."""
    config = config or TrainConfig(lr=0.02)
    if not sequences:
        raise ValueError("cannot train on an empty corpus")
    rng = np.random.default_rng(config.seed)
    clf = AttributeClassifier.init(table, clf_config, rng)
    items = list(zip(sequences, labels))
    train, hold = _split(items, config.holdout_fraction, rng)
    opt = _Adam(clf.params, config.lr, config.optimizer)
    E = table.weight

    def batch_logprobs(batch, P):
        ids = np.concatenate([np.asarray(s) for s, _ in batch])
        lens = [len(s) for s, _ in batch]
        pool = np.zeros((len(batch), len(ids)))
        o = 0
        for b, n in enumerate(lens):
            pool[b, o:o + n] = 1.0 / n
            o += n
        hid = clf._encode(P, ad.constant(E[ids]))
        pooled = ad.constant(pool) @ hid
        logits = ad.add(pooled @ P["w2"], ad.tile_rows(P["b2"], len(batch)))
        return ad.log_softmax(logits)

    loss_v = float("nan")
    for step in range(config.steps):
        idx = rng.choice(len(train), size=min(config.batch_size, len(train)), replace=False)
        batch = [train[i] for i in idx]
        P = clf.tensors(requires_grad=True)
        lp = batch_logprobs(batch, P)
        loss = ad.neg(ad.mean(ad.pick(lp, [y for _, y in batch])))
        loss_v = loss.item()
        if not np.isfinite(loss_v):
            raise TrainingDiverged(f"classifier loss non-finite at step {step}")
        grads = ad.backward(loss)
        opt.step({k: grads[t] for k, t in P.items() if t in grads})

    lp = batch_logprobs(hold, clf.tensors()).data
    acc = float(np.mean(lp.argmax(axis=1) == np.asarray([y for _, y in hold])))
    nll = float(-np.mean(lp[np.arange(len(hold)), [y for _, y in hold]]))
    summary = TrainSummary(loss_v, nll, float(np.log(clf.n_labels)), config.steps,
                           {"heldout_accuracy": acc})
    return clf, summary


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, model) -> None:
    """JSON header + little-endian float64 payload.

    Layout: magic, u64 header length, header JSON, payload. The table is
    always stored first so every checkpoint carries its own copy for the
    content-hash check at load time.
    """
    arrays = [("__table__", model.table.weight)] + sorted(model.params.items())
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": asdict(model.config),
        "lexicon": model.table.lexicon.tokens,
        "table_hash": model.table.content_hash(),
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(blob)) + blob + payload)


def load_checkpoint(path: str | Path, table: EmbeddingTable | None = None):
    """Load a model; when ``table`` is given it must match the stored table exactly."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header['version']} unsupported "
                         f"(expected {CHECKPOINT_VERSION})")
    payload = raw[12 + hlen:]
    expected = 8 * sum(int(np.prod(a["shape"])) for a in header["arrays"])
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arrays, off = {}, 0
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(
            spec["shape"]).astype(np.float64)
        off += 8 * n
    lexicon = Lexicon(header["lexicon"])
    stored = EmbeddingTable(arrays.pop("__table__"), lexicon)
    if stored.content_hash() != header["table_hash"]:
        raise ValueError(f"{path}: embedding table hash mismatch (corrupted checkpoint)")
    if table is not None:
        if table.content_hash() != header["table_hash"]:
            raise ValueError(f"{path}: embedding table differs from the shared table "
                             f"({header['table_hash'][:12]} vs {table.content_hash()[:12]})")
        stored = table
    kind = header["kind"]
    if kind == "lm":
        cfg = LMConfig(**header["config"])
        return CausalLM(stored, arrays, cfg)
    if kind == "classifier":
        c = dict(header["config"])
        c["labels"] = tuple(c["labels"])
        return AttributeClassifier(stored, arrays, ClassifierConfig(**c))
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
