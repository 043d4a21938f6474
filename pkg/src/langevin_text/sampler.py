"""Projected Langevin sampling over token embeddings with Lagrangian constraints."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .constraints import ConstraintSpec, MultiplierSchedule, energy, update_multipliers
from .geometry import SoftSequence, project_many
from .models import CausalLM, EmbeddingTable, ar_sample

log = logging.getLogger(__name__)

RECORD_VERSION = 1

CONVERGED = "converged-early-stop"
SELECTED = "selected-by-repeat"
FALLBACK = "fallback-autoregressive"
FAILED = "failed-restart-exhausted"


class MemoryCapExceeded(MemoryError):
    pass


@dataclass
class NoiseSchedule:
    beta_init: float = 5.0
    beta_floor: float = 0.05
    anneal_steps: int = 100

    def __post_init__(self):
        if not 0 <= self.beta_floor <= self.beta_init or self.anneal_steps < 1:
            raise ValueError(f"invalid noise schedule {self}")


def beta_at(schedule: NoiseSchedule, t: int) -> float:
    """Geometric decay from beta_init at t=0 to beta_floor at t=anneal_steps-1, then flat."""
    if t < 0:
        raise ValueError("t must be non-negative")
    n = schedule.anneal_steps
    if t >= n or n == 1 or schedule.beta_floor == 0.0:
        return schedule.beta_init if t == 0 else schedule.beta_floor
    r = (schedule.beta_floor / schedule.beta_init) ** (1.0 / (n - 1))
    return schedule.beta_init * r ** t


@dataclass
class SamplerConfig:
    max_steps: int = 250
    eta: float = 0.3
    eta_max: float = 1.0
    stall_window: int = 40
    beta_init: float = 5.0
    beta_floor: float = 0.05
    beta_anneal_steps: int = 100
    multipliers: MultiplierSchedule = field(default_factory=MultiplierSchedule)
    restarts: int = 3
    min_repeats: int = 5
    seed: int = 0
    # None means 1e-6 * sqrt(d)
    stall_tolerance: float | None = None
    nucleus_p: float = 0.96
    fallback: bool = True
    keep_trace: bool = True
    # optional overrides for the ablation that decouples init from noise
    init_seed: int | None = None
    noise_seed: int | None = None

    def __post_init__(self):
        if isinstance(self.multipliers, dict):
            self.multipliers = MultiplierSchedule(**self.multipliers)
        if not 0 < self.eta <= self.eta_max:
            raise ValueError("need 0 < eta <= eta_max")
        if self.beta_floor > self.beta_init:
            raise ValueError("beta_floor must not exceed beta_init")
        for name in ("max_steps", "stall_window", "beta_anneal_steps", "min_repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")

    @property
    def noise(self) -> NoiseSchedule:
        return NoiseSchedule(self.beta_init, self.beta_floor, self.beta_anneal_steps)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SampleRecord:
    prompt: list[int]
    output_ids: list[int]
    termination: str
    constraints: list[dict]
    nll: float
    iterations: int
    attempts: int
    trace: list[dict] = field(default_factory=list)
    output_text: str = ""
    prompt_text: str = ""
    chain: int = 0
    state_params: int = 0

    @property
    def is_fallback(self) -> bool:
        return self.termination == FALLBACK

    def to_json(self, include_trace: bool = False) -> dict:
        out = {
            "version": RECORD_VERSION,
            "prompt": self.prompt_text,
            "prompt_ids": self.prompt,
            "output_ids": self.output_ids,
            "output_text": self.output_text,
            "termination": self.termination,
            "constraints": self.constraints,
            "nll": self.nll,
            "iterations": self.iterations,
            "attempts": self.attempts,
            "chain": self.chain,
        }
        if include_trace:
            out["trace"] = self.trace
        return out


# --------------------------------------------------------------------------
# state accounting for the memory ablation

class StateAccountant:
    """Tracks bytes of optimizer-state arrays (state, gradient, noise buffers)."""

    def __init__(self, cap_bytes: float | None = None):
        self.cap = cap_bytes
        self.current = 0
        self.peak = 0

    def allocate(self, shape: tuple[int, ...]) -> np.ndarray:
        nbytes = int(np.prod(shape)) * 8
        if self.cap is not None and self.current + nbytes > self.cap:
            raise MemoryCapExceeded(f"allocating {nbytes} bytes would exceed cap {self.cap:.0f}")
        arr = np.zeros(shape)
        self.current += arr.nbytes
        self.peak = max(self.peak, self.current)
        return arr

    def release(self, arr: np.ndarray) -> None:
        self.current -= arr.nbytes


# --------------------------------------------------------------------------
# building blocks

def init_sequence(table: EmbeddingTable, L: int, rng: np.random.Generator) -> SoftSequence:
    """Each position starts at a uniformly chosen table row."""
    if L < 1:
        raise ValueError("L must be >= 1")
    ids = rng.integers(0, table.vocab_size, size=L)
    return SoftSequence(table.weight[ids].copy(), ids)


def langevin_step(seq: SoftSequence, gradients: np.ndarray, eta: float, beta: float,
                  rng: np.random.Generator, table: EmbeddingTable,
                  iteration: int | None = None, noise_out: np.ndarray | None = None) -> SoftSequence:
    """Proj_E(e - eta * grad + sqrt(2 eta beta) z), z ~ N(0, I) per coordinate."""
    if eta <= 0 or beta < 0:
        raise ValueError("need eta > 0 and beta >= 0")
    z = rng.standard_normal(seq.vectors.shape)
    if noise_out is not None:
        noise_out[...] = z
    moved = seq.vectors - eta * gradients + math.sqrt(2.0 * eta * beta) * z
    if not np.all(np.isfinite(moved)):
        raise ad.NonFiniteError(f"non-finite Langevin update at iteration {iteration}")
    ids = project_many(table, moved)
    return SoftSequence(table.weight[ids].copy(), ids)


def _ids_hash(ids) -> str:
    return hashlib.sha1(np.asarray(ids, dtype="<i8").tobytes()).hexdigest()[:12]


def _chain_rngs(config: SamplerConfig, chain: int):
    base = np.random.SeedSequence([config.seed, chain])
    init_ss, noise_ss, fallback_ss = base.spawn(3)
    if config.init_seed is not None:
        init_ss = np.random.SeedSequence([config.init_seed, chain, 1])
    if config.noise_seed is not None:
        noise_ss = np.random.SeedSequence([config.noise_seed, chain, 2])
    return (np.random.default_rng(init_ss), np.random.default_rng(noise_ss),
            np.random.default_rng(fallback_ss))


def constraint_report(prompt, ids, constraints: Sequence[ConstraintSpec], table) -> list[dict]:
    seq = SoftSequence.from_ids(table, ids)
    out = []
    for c in constraints:
        v = c.check(prompt, seq)
        out.append({"name": c.name, "f_final": v, "epsilon": c.epsilon,
                    "satisfied": bool(c.satisfied(v))})
    return out


# --------------------------------------------------------------------------
# the sampler

class _Attempt:
    """Bookkeeping for one optimization attempt."""

    def __init__(self):
        self.seen: dict[tuple, list] = {}  # ids -> [count, nll]
        self.iterations = 0

    def note(self, ids, nll_fn):
        key = tuple(int(i) for i in ids)
        if key not in self.seen:
            self.seen[key] = [0, nll_fn(key)]
        self.seen[key][0] += 1

    def select(self, min_repeats: int):
        best = None
        for key, (count, nll) in self.seen.items():
            if count >= min_repeats and (best is None or nll < best[1]):
                best = (key, nll)
        return best


def _run_attempt(lm, prompt, constraints, config: SamplerConfig, seq: SoftSequence,
                 noise_rng, trace: list, check_purity: bool, state_step, readout,
                 start_iteration: int):
    """One pass of the Langevin loop. Returns (ids, nll, termination) or None on failure."""
    table = lm.table
    sched = config.multipliers
    for c in constraints:
        c.reset()
    eta_t = config.eta
    stalled_for = 0
    att = _Attempt()
    noise = config.noise
    state = seq
    for t in range(config.max_steps):
        vec_leaf, vectors, cur = readout(state)
        terms = energy(prompt, cur, lm, constraints, vectors, noise_rng)
        grads = ad.backward(terms.energy, [vec_leaf])
        f_vals = [fv.item() for fv in terms.f_values]
        nll = terms.nll.item()
        disc = SoftSequence.from_ids(table, cur.projected_ids)
        checks = [c.check(prompt, disc) for c in constraints]
        all_ok = all(c.satisfied(v) for c, v in zip(constraints, checks))
        if check_purity and all_ok and all(c.lam == 0.0 for c in constraints):
            if terms.energy.item() != nll:
                raise AssertionError(f"energy {terms.energy.item()!r} != nll {nll!r} at t={t}")
        beta = beta_at(noise, t)
        if config.keep_trace:
            trace.append({"t": start_iteration + t, "energy": terms.energy.item(), "nll": nll,
                          "f": f_vals, "satisfied": [bool(c.satisfied(v)) for c, v in zip(constraints, checks)],
                          "lambda": [c.lam for c in constraints], "beta": beta,
                          "eta": eta_t, "ids": _ids_hash(cur.projected_ids)})
        if all_ok:
            att.note(cur.projected_ids, lambda key: lm.sequence_nll(prompt, key))
        new_state, moved = state_step(state, grads[vec_leaf], eta_t, beta, noise_rng, t)
        att.iterations = t + 1
        update_multipliers(constraints, f_vals, sched, iteration=t + 1, stalled=not moved)
        if moved:
            stalled_for = 0
            eta_t = config.eta
        elif all_ok:
            stalled_for += 1
            if stalled_for >= config.stall_window:
                ids = list(map(int, cur.projected_ids))
                return ids, lm.sequence_nll(prompt, ids), CONVERGED, att.iterations
            frac = stalled_for / config.stall_window
            eta_t = config.eta + (config.eta_max - config.eta) * frac
        state = new_state
    best = att.select(config.min_repeats)
    if best is None:
        return None, None, None, att.iterations
    return list(best[0]), best[1], SELECTED, att.iterations


def sample(lm: CausalLM, prompt: Sequence[int], L: int, constraints: Sequence[ConstraintSpec],
           config: SamplerConfig | None = None, chain: int = 0, *, check_purity: bool = False,
           accountant: StateAccountant | None = None) -> SampleRecord:
    """Run the constrained Langevin sampler with restarts and autoregressive fallback."""
    config = config or SamplerConfig()
    table = lm.table
    for c in constraints:
        owner = getattr(getattr(c, "clf", None), "table", None) or getattr(c, "table", None)
        if owner is not None and owner is not table and owner.content_hash() != table.content_hash():
            raise ValueError(f"constraint {c.name!r} uses a different embedding table")
    tol = config.stall_tolerance if config.stall_tolerance is not None else 1e-6 * math.sqrt(table.dim)
    init_rng, noise_rng, fb_rng = _chain_rngs(config, chain)
    accountant = accountant or StateAccountant()

    state_buf = accountant.allocate((L, table.dim))
    grad_buf = accountant.allocate((L, table.dim))
    noise_buf = accountant.allocate((L, table.dim))

    def readout(state: SoftSequence):
        leaf = ad.Tensor(state.vectors, requires_grad=True)
        return leaf, leaf, state

    def state_step(state, g, eta, beta, rng, t):
        grad_buf[...] = g
        new = langevin_step(state, grad_buf, eta, beta, rng, table, iteration=t, noise_out=noise_buf)
        state_buf[...] = new.vectors
        disp = float(np.max(np.linalg.norm(new.vectors - state.vectors, axis=1)))
        moved = bool(np.any(new.projected_ids != state.projected_ids)) or disp >= tol
        return new, moved

    trace: list[dict] = []
    total_iter = 0
    attempts = 0
    result = (None, None, None)
    for attempt in range(config.restarts + 1):
        attempts += 1
        seq = init_sequence(table, L, init_rng)
        ids, nll, term, n_it = _run_attempt(lm, prompt, constraints, config, seq, noise_rng,
                                            trace, check_purity, state_step, readout, total_iter)
        total_iter += n_it
        if ids is not None:
            result = (ids, nll, term)
            break
        log.debug("attempt %d failed", attempt)
    for buf in (state_buf, grad_buf, noise_buf):
        accountant.release(buf)

    ids, nll, term = result
    if ids is None:
        if config.fallback:
            ids = ar_sample(lm, prompt, L, config.nucleus_p, fb_rng)
            term = FALLBACK
        else:
            ids = list(map(int, project_many(table, state_buf))) if np.any(state_buf) else [0] * L
            term = FAILED
        nll = lm.sequence_nll(prompt, ids)
    lex = table.lexicon
    return SampleRecord(
        prompt=list(map(int, prompt)), output_ids=list(map(int, ids)), termination=term,
        constraints=constraint_report(prompt, ids, constraints, table), nll=float(nll),
        iterations=total_iter, attempts=attempts, trace=trace,
        output_text=lex.decode(ids), prompt_text=lex.decode(prompt), chain=chain,
        state_params=L * table.dim)


# --------------------------------------------------------------------------
# vocabulary-simplex ablation

def simplex_sample(lm: CausalLM, prompt: Sequence[int], L: int,
                   constraints: Sequence[ConstraintSpec], config: SamplerConfig | None = None,
                   chain: int = 0, *, init_logit: float = 5.0,
                   accountant: StateAccountant | None = None) -> SampleRecord:
    """Same Langevin and multiplier machinery over L x V logits instead of L x d vectors.

    Each position feeds ``softmax(logits) @ E`` to the models; the readout is the
    per-position argmax. No projection is applied to the state.
    """
    config = config or SamplerConfig()
    table = lm.table
    V = table.vocab_size
    init_rng, noise_rng, fb_rng = _chain_rngs(config, chain)
    accountant = accountant or StateAccountant()
    logits = accountant.allocate((L, V))
    grad_buf = accountant.allocate((L, V))
    noise_buf = accountant.allocate((L, V))
    E = ad.constant(table.weight)

    def readout(state):
        leaf = ad.Tensor(state, requires_grad=True)
        vectors = ad.softmax(leaf) @ E
        ids = np.argmax(state, axis=1)
        return leaf, vectors, SoftSequence(vectors.data, ids)

    def state_step(state, g, eta, beta, rng, t):
        grad_buf[...] = g
        noise_buf[...] = rng.standard_normal(state.shape)
        new = state - eta * grad_buf + math.sqrt(2.0 * eta * beta) * noise_buf
        if not np.all(np.isfinite(new)):
            raise ad.NonFiniteError(f"non-finite simplex update at iteration {t}")
        moved = bool(np.any(np.argmax(new, axis=1) != np.argmax(state, axis=1)))
        return new, moved

    trace: list[dict] = []
    total_iter, attempts, result = 0, 0, (None, None, None)
    for _ in range(config.restarts + 1):
        attempts += 1
        ids0 = init_rng.integers(0, V, size=L)
        logits[...] = 0.0
        logits[np.arange(L), ids0] = init_logit
        ids, nll, term, n_it = _run_attempt(lm, prompt, constraints, config, logits.copy(),
                                            noise_rng, trace, False, state_step, readout, total_iter)
        total_iter += n_it
        if ids is not None:
            result = (ids, nll, term)
            break
    for buf in (logits, grad_buf, noise_buf):
        accountant.release(buf)
    ids, nll, term = result
    if ids is None:
        ids = ar_sample(lm, prompt, L, config.nucleus_p, fb_rng)
        term = FALLBACK
        nll = lm.sequence_nll(prompt, ids)
    lex = table.lexicon
    return SampleRecord(
        prompt=list(map(int, prompt)), output_ids=list(map(int, ids)), termination=term,
        constraints=constraint_report(prompt, ids, constraints, table), nll=float(nll),
        iterations=total_iter, attempts=attempts, trace=trace,
        output_text=lex.decode(ids), prompt_text=lex.decode(prompt), chain=chain,
        state_params=L * V)


def with_overrides(config: SamplerConfig, **kw) -> SamplerConfig:
    return replace(config, **kw)
