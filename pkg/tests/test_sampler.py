import json
import math

import numpy as np
import pytest

from langevin_text.constraints import FunctionConstraint, KeywordConstraint, contains_phrase
from langevin_text.geometry import SoftSequence, project_many
from langevin_text import autodiff as ad
from langevin_text.sampler import (CONVERGED, FALLBACK, FAILED, SELECTED, MemoryCapExceeded,
                                   NoiseSchedule, SamplerConfig, StateAccountant, _chain_rngs,
                                   beta_at, init_sequence, langevin_step, sample, simplex_sample)


def test_config_defaults_and_validation():
    c = SamplerConfig()
    assert c.max_steps == 250
    assert (c.beta_init, c.beta_floor, c.beta_anneal_steps) == (5.0, 0.05, 100)
    assert c.stall_window == 40 and c.restarts == 3 and c.min_repeats == 5
    assert c.eta_max == 1.0 and c.nucleus_p == 0.96
    assert (c.multipliers.alpha, c.multipliers.cadence) == (1.0, 20)
    for bad in (dict(eta=0.0), dict(eta=2.0, eta_max=1.0), dict(beta_floor=6.0),
                dict(max_steps=0), dict(restarts=-1), dict(min_repeats=0)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_beta_schedule():
    s = NoiseSchedule()
    assert beta_at(s, 0) == 5.0
    assert all(beta_at(s, t) == 0.05 for t in (100, 101, 250, 10_000))
    r = (0.05 / 5.0) ** (1 / 99)
    assert beta_at(s, 50) == pytest.approx(5.0 * r ** 50, rel=1e-14)
    assert beta_at(s, 99) == pytest.approx(0.05, rel=1e-12)
    seq = [beta_at(s, t) for t in range(120)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        beta_at(s, -1)


def test_init_sequence(world):
    a = init_sequence(world.table, 7, np.random.default_rng(3))
    b = init_sequence(world.table, 7, np.random.default_rng(3))
    np.testing.assert_array_equal(a.vectors, b.vectors)
    np.testing.assert_array_equal(project_many(world.table, a.vectors), a.projected_ids)
    np.testing.assert_array_equal(world.table.weight[a.projected_ids], a.vectors)
    with pytest.raises(ValueError):
        init_sequence(world.table, 0, np.random.default_rng(0))


def test_init_distribution_is_uniform():
    from langevin_text.models import EmbeddingTable, Lexicon
    V = 20
    table = EmbeddingTable(np.eye(V), Lexicon(["<s>"] + [f"t{i}" for i in range(1, V)]))
    seq = init_sequence(table, 100_000, np.random.default_rng(0))
    counts = np.bincount(seq.projected_ids, minlength=V)
    expected = 100_000 / V
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # chi-square with 19 dof: mean 19, sd sqrt(38); 3 sigma bound
    assert chi2 < 19 + 3 * math.sqrt(38)


def test_langevin_step_fixed_point_and_noise_scale(world):
    seq = SoftSequence.from_ids(world.table, [5, 9, 12])
    zero = np.zeros_like(seq.vectors)
    out = langevin_step(seq, zero, 0.1, 0.0, np.random.default_rng(0), world.table)
    np.testing.assert_array_equal(out.projected_ids, seq.projected_ids)
    noise = np.empty((2000, world.table.dim))
    base = SoftSequence(np.zeros((2000, world.table.dim)), np.zeros(2000, dtype=int))
    langevin_step(base, np.zeros_like(noise), 0.1, 5.0, np.random.default_rng(1), world.table,
                  noise_out=noise)
    assert math.sqrt(2 * 0.1 * 5.0) == pytest.approx(1.0)
    assert noise.std() == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ad.NonFiniteError, match="iteration 7"):
        langevin_step(seq, np.full_like(seq.vectors, np.inf), 0.1, 1.0,
                      np.random.default_rng(0), world.table, iteration=7)


def test_step_determinism(world):
    seq = SoftSequence.from_ids(world.table, [5, 9, 12])
    g = np.random.default_rng(2).normal(size=seq.vectors.shape)
    a = langevin_step(seq, g, 0.3, 1.0, np.random.default_rng(4), world.table)
    b = langevin_step(seq, g, 0.3, 1.0, np.random.default_rng(4), world.table)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_unconstrained_sample(world):
    prompt = world.lex.encode("the food was")
    rec = sample(world.lm, prompt, 5, [], SamplerConfig(), chain=0)
    assert rec.termination in (CONVERGED, SELECTED)
    assert len(rec.output_ids) == 5 and rec.iterations <= 250
    assert rec.nll == pytest.approx(world.lm.sequence_nll(prompt, rec.output_ids))
    again = sample(world.lm, prompt, 5, [], SamplerConfig(), chain=0)
    assert json.dumps(again.to_json(True)) == json.dumps(rec.to_json(True))
    trace = rec.trace
    assert [t["t"] for t in trace] == list(range(len(trace)))
    assert {"energy", "nll", "f", "lambda", "beta", "eta", "ids"} <= set(trace[0])


def test_trace_consistent_with_termination(world):
    prompt = world.lex.encode("the movie is")
    rec = sample(world.lm, prompt, 5, [], SamplerConfig(), chain=1)
    if rec.termination == CONVERGED:
        tail = [t["ids"] for t in rec.trace[-SamplerConfig().stall_window:]]
        assert len(set(tail)) == 1
    else:
        assert rec.iterations == 250 * rec.attempts


def test_keyword_sample_contains_phrase(world):
    prompt = world.lex.encode("the service was")
    phrase = world.lex.encode("lovely")
    kc = KeywordConstraint(world.table, phrase)
    rec = sample(world.lm, prompt, 6, [kc], SamplerConfig(), chain=2)
    assert rec.termination != FALLBACK
    assert contains_phrase(rec.output_ids, phrase)
    assert rec.constraints[0]["satisfied"]


def test_unsatisfiable_pair_falls_back(world):
    def mean_first(p, s, v):
        return ad.sum(v[0:1])
    up = FunctionConstraint("x<=-1", mean_first, -100.0)
    down = FunctionConstraint("-x<=-1", lambda p, s, v: ad.neg(mean_first(p, s, v)), -100.0)
    cfg = SamplerConfig(max_steps=30, restarts=1)
    rec = sample(world.lm, world.lex.encode("the food was"), 4, [up, down], cfg, chain=0)
    assert rec.termination == FALLBACK and rec.is_fallback and rec.attempts == 2
    rec2 = sample(world.lm, world.lex.encode("the food was"), 4, [up, down],
                  SamplerConfig(max_steps=30, restarts=0, fallback=False), chain=0)
    assert rec2.termination == FAILED


def test_purity_assertion_runs_every_iteration(world):
    prompt = world.lex.encode("the food was")
    kc = KeywordConstraint(world.table, world.lex.encode("good"))
    rec = sample(world.lm, prompt, 5, [kc], SamplerConfig(max_steps=80), chain=3, check_purity=True)
    assert rec.iterations > 0


def test_zero_noise_selection_no_worse_than_init(world):
    cfg = SamplerConfig(beta_init=0.0, beta_floor=0.0, max_steps=60, keep_trace=False)
    prompt = world.lex.encode("the food was")
    for chain in range(5):
        rec = sample(world.lm, prompt, 5, [], cfg, chain=chain)
        init_rng, _, _ = _chain_rngs(cfg, chain)
        start = init_sequence(world.table, 5, init_rng)
        assert rec.nll <= world.lm.sequence_nll(prompt, start.projected_ids)


def test_chain_streams_are_independent(world):
    prompt = world.lex.encode("the food was")
    a = sample(world.lm, prompt, 5, [], SamplerConfig(max_steps=20), chain=0)
    b = sample(world.lm, prompt, 5, [], SamplerConfig(max_steps=20), chain=1)
    assert a.trace[0]["ids"] != b.trace[0]["ids"] or a.output_ids != b.output_ids


def test_simplex_state_size_and_readout(world):
    V, d = world.table.vocab_size, world.table.dim
    acc_e, acc_s = StateAccountant(), StateAccountant()
    prompt = world.lex.encode("the food was")
    cfg = SamplerConfig(max_steps=3, restarts=0, fallback=False, keep_trace=False)
    re = sample(world.lm, prompt, 20, [], cfg, accountant=acc_e)
    rs = simplex_sample(world.lm, prompt, 20, [], cfg, accountant=acc_s)
    assert re.state_params == 20 * d and rs.state_params == 20 * V
    assert acc_s.peak / acc_e.peak == pytest.approx(V / d)


def test_simplex_near_one_hot_readout_matches_discrete(world):
    ids = world.lex.encode("really great and fresh .")
    logits = np.full((len(ids), world.table.vocab_size), -50.0)
    logits[np.arange(len(ids)), ids] = 50.0
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(p @ world.table.weight, world.table.weight[ids], atol=1e-12)
    np.testing.assert_array_equal(np.argmax(logits, axis=1), ids)


def test_memory_cap():
    acc = StateAccountant(cap_bytes=1000)
    a = acc.allocate((10, 10))
    with pytest.raises(MemoryCapExceeded):
        acc.allocate((10, 10))
    acc.release(a)
    acc.allocate((10, 10))
    assert acc.peak == 800


def test_mismatched_table_rejected(world):
    from langevin_text.models import EmbeddingTable
    other = EmbeddingTable(world.table.weight + 1e-3, world.lex)
    kc = KeywordConstraint(other, world.lex.encode("good"))
    with pytest.raises(ValueError, match="different embedding table"):
        sample(world.lm, world.lex.encode("the food was"), 4, [kc], SamplerConfig(max_steps=5))
