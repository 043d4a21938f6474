"""Differentiable constraints f(prompt, y) <= epsilon and their Lagrange multipliers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import SoftSequence, token_log_distribution, token_log_distribution_t, verify_separation
from .models import (AttributeClassifier, CausalLM, ConditionalLM, EmbeddingTable,
                     classifier_logprob, lm_nll)

DEFAULT_DELTA = 0.1
DEFAULT_TAU = 0.5
TOXICITY_THRESHOLD = 0.01


class SeparationError(ValueError):
    """Raised when the keyword threshold guarantee would not hold for a token."""


class ConstraintError(ValueError):
    pass


class ConstraintSpec:
    """One constraint ``f <= epsilon`` with a live, non-negative multiplier."""

    def __init__(self, name: str, epsilon: float):
        self.name = name
        self.epsilon = float(epsilon)
        self.lam = 0.0
        self._avg_slack = 0.0

    def f(self, prompt: Sequence[int], seq: SoftSequence, vectors: ad.Tensor,
          rng: np.random.Generator | None = None) -> ad.Tensor:
        raise NotImplementedError

    def check(self, prompt: Sequence[int], seq: SoftSequence) -> float:
        """Deterministic constraint value used for satisfaction decisions."""
        return self.f(prompt, seq, ad.constant(seq.vectors)).item()

    def satisfied(self, value: float) -> bool:
        return value <= self.epsilon

    def reset(self) -> None:
        self.lam = 0.0
        self._avg_slack = 0.0

    def describe(self) -> dict:
        return {"name": self.name, "epsilon": self.epsilon, "lambda": self.lam}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, eps={self.epsilon:.4g}, lam={self.lam:.4g})"


class FunctionConstraint(ConstraintSpec):
    """Wraps an arbitrary differentiable ``fn(prompt, seq, vectors) -> Tensor``."""

    def __init__(self, name: str, fn: Callable, epsilon: float):
        super().__init__(name, epsilon)
        self.fn = fn

    def f(self, prompt, seq, vectors, rng=None):
        return self.fn(prompt, seq, vectors)


# --------------------------------------------------------------------------
# model-based constraints

class DiscriminativeConstraint(ConstraintSpec):
    """Classifier constraint in log space.

    ``lower`` form: p(label) >= p_bound  as  -log p(label) <= -log p_bound.
    ``upper`` form: p(label) <= p_bound  as   log p(label) <= log p_bound.
    """

    def __init__(self, clf: AttributeClassifier, label: int, p_bound: float, upper: bool = False,
                 name: str | None = None):
        if not 0.0 < p_bound < 1.0:
            raise ConstraintError(f"probability threshold must lie strictly in (0, 1), got {p_bound}")
        if not 0 <= label < clf.n_labels:
            raise ConstraintError(f"label {label} out of range for {clf.n_labels} labels")
        eps = math.log(p_bound) if upper else -math.log(p_bound)
        tag = clf.config.labels[label]
        super().__init__(name or f"disc:{tag}{'<=' if upper else '>='}{p_bound:g}", eps)
        self.clf, self.label, self.p_bound, self.upper = clf, label, p_bound, upper

    def f(self, prompt, seq, vectors, rng=None):
        lp = classifier_logprob(self.clf, prompt, seq, self.label, vectors)
        return lp if self.upper else ad.neg(lp)


def disc_constraint(clf: AttributeClassifier, desired: int, p_min: float) -> DiscriminativeConstraint:
    return DiscriminativeConstraint(clf, desired, p_min)


def toxicity_constraint(clf: AttributeClassifier, toxic_label: int,
                        p_max: float = TOXICITY_THRESHOLD) -> DiscriminativeConstraint:
    """``p_toxic <= p_max`` realised as ``log p_toxic <= log p_max``."""
    return DiscriminativeConstraint(clf, toxic_label, p_max, upper=True)


class GenerativeConstraint(ConstraintSpec):
    """``p(prompt, y | desired) >= p(prompt, y | other)`` in log space, epsilon 0."""

    def __init__(self, cond: ConditionalLM, desired: int, other: int, name: str | None = None):
        super().__init__(name or f"gen:{cond.labels[desired]}>{cond.labels[other]}", 0.0)
        self.cond, self.desired, self.other = cond, desired, other

    def f(self, prompt, seq, vectors, rng=None):
        # log p(.|other) - log p(.|desired) = nll_desired - nll_other
        return ad.sub(self.cond.class_nll(self.desired, prompt, seq, vectors),
                      self.cond.class_nll(self.other, prompt, seq, vectors))


def gen_constraint(cond: ConditionalLM, desired: int, other: int) -> GenerativeConstraint:
    return GenerativeConstraint(cond, desired, other)


def gen_constraints(cond: ConditionalLM, desired: int) -> list[GenerativeConstraint]:
    """n-1 pairwise constraints making ``desired`` the most likely of n labels."""
    return [GenerativeConstraint(cond, desired, k) for k in range(len(cond.labels)) if k != desired]


# --------------------------------------------------------------------------
# lexical constraints

def _window_scores(logpi: ad.Tensor, phrase: Sequence[int]) -> ad.Tensor:
    """g_n = mean_u log pi_{n+u}[w_u] for every window start n."""
    L, l = logpi.shape[0], len(phrase)
    starts = np.arange(L - l + 1)
    parts = [ad.index(logpi, (starts + u, np.full(len(starts), w))) for u, w in enumerate(phrase)]
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.scale(total, 1.0 / l)


def _window_scores_np(logpi: np.ndarray, phrase: Sequence[int]) -> np.ndarray:
    L, l = logpi.shape[0], len(phrase)
    starts = np.arange(L - l + 1)
    return sum(logpi[starts + u, w] for u, w in enumerate(phrase)) / l


def gumbel_hard_sample(scores: ad.Tensor, tau: float, rng: np.random.Generator,
                       hard: bool = True) -> ad.Tensor:
    """One-hot gumbel-softmax sample over ``scores / tau`` with a straight-through backward.

    ``hard=False`` returns the relaxed sample itself (used for gradient checks).
    """
    u = rng.random(scores.shape)
    gumbel = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
    soft = ad.softmax(ad.add(ad.scale(scores, 1.0 / tau), ad.constant(gumbel)))
    if not hard:
        return soft
    hard = np.zeros(scores.shape)
    hard[int(np.argmax(soft.data))] = 1.0
    return ad.straight_through(soft, hard)


def keyword_threshold(table: EmbeddingTable, phrase: Sequence[int], delta: float = DEFAULT_DELTA,
                      report=None) -> float:
    """epsilon = mean_u -log pi_{w_u}[w_u] + delta.

    Raises :class:`SeparationError` unless every phrase token is column-maximal
    in the pi matrix with a margin wide enough that a mismatch at any single
    window position pushes the distance past epsilon.
    """
    report = report or verify_separation(table)
    W = table.weight
    phrase = list(phrase)
    bad = {v["token"] for v in report.violations}
    for w in phrase:
        if w in bad:
            raise SeparationError(f"token {w} violates the separation property")
        margin = report.per_token_column_margin[w]
        if margin <= len(phrase) * delta:
            raise SeparationError(f"token {w}: column margin {margin:.4g} does not exceed "
                                  f"phrase length x delta = {len(phrase) * delta:.4g}")
    self_lp = [token_log_distribution(W, W[w])[w] for w in phrase]
    return float(-np.mean(self_lp) + delta)


class KeywordConstraint(ConstraintSpec):
    """The word or phrase ``phrase`` must occur contiguously in the output."""

    def __init__(self, table: EmbeddingTable, phrase: Sequence[int], tau: float = DEFAULT_TAU,
                 delta: float = DEFAULT_DELTA, name: str | None = None, report=None,
                 hard: bool = True):
        phrase = [int(w) for w in phrase]
        if not phrase:
            raise ConstraintError("keyword phrase must contain at least one token")
        if tau <= 0 or delta <= 0:
            raise ConstraintError("tau and delta must be positive")
        eps = keyword_threshold(table, phrase, delta, report)
        super().__init__(name or "keyword:" + table.lexicon.decode(phrase).replace(" ", "_"), eps)
        self.table, self.phrase, self.tau, self.delta = table, phrase, tau, delta
        self.hard = hard

    def scores(self, vectors: ad.Tensor) -> ad.Tensor:
        if vectors.shape[0] < len(self.phrase):
            raise ConstraintError(f"sequence of length {vectors.shape[0]} is shorter than "
                                  f"phrase of length {len(self.phrase)}")
        logpi = token_log_distribution_t(ad.constant(self.table.weight), vectors)
        return _window_scores(logpi, self.phrase)

    def f(self, prompt, seq, vectors, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        g = self.scores(vectors)
        q = gumbel_hard_sample(g, self.tau, rng, self.hard)
        return ad.neg(ad.sum(ad.mul(q, g)))

    def window_distances(self, seq: SoftSequence) -> np.ndarray:
        """-g_n for every window; the value of d under each admissible one-hot q."""
        if len(seq) < len(self.phrase):
            raise ConstraintError("sequence shorter than phrase")
        return -_window_scores_np(token_log_distribution(self.table.weight, seq.vectors), self.phrase)

    def check(self, prompt, seq):
        return float(self.window_distances(seq).min())


def keyword_distance(kc: KeywordConstraint, seq: SoftSequence, rng: np.random.Generator,
                     vectors: ad.Tensor | None = None) -> ad.Tensor:
    return kc.f((), seq, vectors if vectors is not None else ad.constant(seq.vectors), rng)


class KeywordSetConstraint(ConstraintSpec):
    """At least one of several keywords must occur.

    Value is ``min_k (d_k - epsilon_k)`` against threshold 0, so it is satisfied
    exactly when some member's own constraint is.
    """

    def __init__(self, table: EmbeddingTable, words: Sequence[Sequence[int] | int],
                 tau: float = DEFAULT_TAU, delta: float = DEFAULT_DELTA, name: str | None = None):
        if not words:
            raise ConstraintError("keyword set must be non-empty")
        report = verify_separation(table)
        self.members = [KeywordConstraint(table, [w] if isinstance(w, (int, np.integer)) else w,
                                          tau, delta, report=report) for w in words]
        super().__init__(name or "keyword-set:" + "|".join(m.name[8:] for m in self.members), 0.0)

    def f(self, prompt, seq, vectors, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        slacks = [ad.sub(m.f(prompt, seq, vectors, rng), m.epsilon) for m in self.members]
        best = int(np.argmin([s.item() for s in slacks]))
        return slacks[best]

    def check(self, prompt, seq):
        return min(m.check(prompt, seq) - m.epsilon for m in self.members)


def keyword_set_constraint(words, table: EmbeddingTable, tau: float = DEFAULT_TAU,
                           delta: float = DEFAULT_DELTA) -> KeywordSetConstraint:
    return KeywordSetConstraint(table, words, tau, delta)


def contains_phrase(ids: Sequence[int], phrase: Sequence[int]) -> bool:
    ids, phrase = list(ids), list(phrase)
    l = len(phrase)
    return any(ids[i:i + l] == phrase for i in range(len(ids) - l + 1))


# --------------------------------------------------------------------------
# energy and multipliers

@dataclass
class MultiplierSchedule:
    alpha: float = 1.0
    cadence: int = 20
    violation_boost: bool = True
    # exponential moving average of the slack; 0 disables damping
    damping: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.cadence < 1 or not 0.0 <= self.damping < 1.0:
            raise ValueError(f"invalid multiplier schedule {self}")


@dataclass
class EnergyTerms:
    energy: ad.Tensor
    nll: ad.Tensor
    f_values: list[ad.Tensor] = field(default_factory=list)


def energy(prompt: Sequence[int], seq: SoftSequence, lm: CausalLM,
           constraints: Sequence[ConstraintSpec], vectors: ad.Tensor | None = None,
           rng: np.random.Generator | None = None) -> EnergyTerms:
    """lm_nll - sum_i lambda_i (epsilon_i - f_i), accumulated in declaration order."""
    vec = vectors if vectors is not None else ad.constant(seq.vectors)
    nll = lm_nll(lm, prompt, seq, vec)
    total = nll
    fs = []
    for c in constraints:
        try:
            fv = c.f(prompt, seq, vec, rng)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise ad.NonFiniteError(f"constraint {c.name!r}: {exc}") from exc
        fs.append(fv)
        total = ad.sub(total, ad.scale(ad.sub(ad.constant(c.epsilon), fv), c.lam))
    return EnergyTerms(total, nll, fs)


def update_multipliers(constraints: Sequence[ConstraintSpec], f_values: Sequence[float],
                       schedule: MultiplierSchedule, iteration: int | None = None,
                       stalled: bool = False, force: bool = False) -> list[float]:
    """Projected ascent: lambda <- max(0, lambda + alpha (f - epsilon)).

    Applied when ``iteration`` falls on the cadence, when ``force`` is set, or,
    with ``violation_boost``, to each violated constraint while ``stalled``.
    """
    on_cadence = force or (iteration is not None and iteration % schedule.cadence == 0)
    for c, fv in zip(constraints, f_values):
        fv = float(fv)
        if not math.isfinite(fv):
            raise ad.NonFiniteError(f"constraint {c.name!r}: non-finite value")
        slack = fv - c.epsilon
        boosted = schedule.violation_boost and stalled and slack > 0
        if not (on_cadence or boosted):
            continue
        if schedule.damping:
            c._avg_slack = schedule.damping * c._avg_slack + (1 - schedule.damping) * slack
            slack = c._avg_slack
        c.lam = max(0.0, c.lam + schedule.alpha * slack)
    return [c.lam for c in constraints]
