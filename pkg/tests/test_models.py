import math

import numpy as np
import pytest

from langevin_text import autodiff as ad
from langevin_text.geometry import SoftSequence
from langevin_text.models import (AttributeClassifier, CausalLM, ConditionalLM, ContextLengthError,
                                  EmbeddingTable, Lexicon, LMConfig, TrainConfig, ar_sample,
                                  classifier_logprob, corpus_nll, generative_classprob, lm_nll,
                                  load_checkpoint, nucleus_filter, save_checkpoint, train_lm)


def small_table(V=8, d=6, seed=0):
    lex = Lexicon(["<s>"] + [f"t{i}" for i in range(1, V)])
    return EmbeddingTable.random(lex, d, np.random.default_rng(seed), 0.8)


def test_lexicon_roundtrip_and_unknown_token():
    lex = Lexicon.from_corpus(["b a", "c a"])
    assert lex.tokens == ["<s>", "a", "b", "c"]
    assert lex.decode(lex.encode("c b a")) == "c b a"
    with pytest.raises(KeyError, match="zz"):
        lex.encode("a zz")


def test_zero_lm_gives_uniform_nll():
    table = small_table()
    lm = CausalLM.init(table, LMConfig(d_ff=4), zero=True)
    seq = SoftSequence(np.random.default_rng(1).normal(size=(5, 6))).refresh(table)
    # zero params -> layer norm output zero -> all logits zero, target dot zero
    assert lm_nll(lm, [1, 2], seq).item() == pytest.approx(5 * math.log(8), abs=1e-12)


def test_continuous_nll_equals_discrete_on_table_rows(world):
    prompt = world.lex.encode("the food was")
    for ids in world.seqs[:20]:
        seq = SoftSequence.from_ids(world.table, ids)
        cont = lm_nll(world.lm, prompt, seq).item()
        assert abs(cont - world.lm.sequence_nll(prompt, ids)) <= 1e-9


def test_next_token_distribution_normalised(world):
    p = world.lm.next_token_probs(world.lex.encode("the movie"))
    assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0)


def test_tied_embeddings_share_storage():
    table = small_table()
    lm = CausalLM.init(table, LMConfig(d_ff=4), np.random.default_rng(0))
    before = lm.next_token_probs([1, 2])
    table.weight[3] += np.random.default_rng(1).normal(size=table.dim)
    after = lm.next_token_probs([1, 2])
    assert not np.allclose(before, after)
    assert lm.table.weight is table.weight


def test_context_limit_and_non_finite():
    table = small_table()
    lm = CausalLM.init(table, LMConfig(d_ff=4, context_limit=6))
    with pytest.raises(ContextLengthError):
        lm.sequence_nll([1, 2, 3], [1, 2, 3, 4])
    bad = SoftSequence(np.full((2, 6), np.inf), np.zeros(2, dtype=int))
    with pytest.raises(ad.NonFiniteError):
        lm_nll(lm, [1], bad)


def test_training_beats_uniform_and_keeps_separation(world):
    s = world.lm_summary
    assert s.heldout_nll < s.uniform_nll
    assert s.extra["separation_ok"]


def test_alternating_corpus_is_learned():
    lex = Lexicon(["<s>", "a", "b"])
    table = EmbeddingTable.random(lex, 8, np.random.default_rng(0), 0.5)
    corpus = [[1, 2] * 6 for _ in range(40)]
    lm, summary = train_lm(corpus, table, TrainConfig(steps=300, lr=0.03, batch_size=8),
                           LMConfig(d_ff=8))
    # bigram-oracle entropy is 0 after the first token; first token is also always "a"
    assert summary.heldout_nll < 0.1


def test_training_is_deterministic_and_rejects_empty():
    def run():
        table = small_table()
        lm, _ = train_lm([[1, 2, 3], [3, 2, 1]] * 5, table, TrainConfig(steps=5, seed=3),
                         LMConfig(d_ff=4))
        return lm, table
    (a, ta), (b, tb) = run(), run()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert np.array_equal(ta.weight, tb.weight)
    with pytest.raises(ValueError):
        train_lm([], small_table())


def test_classifier_uniform_and_normalised():
    table = small_table()
    seq = SoftSequence(np.random.default_rng(2).normal(size=(4, 6))).refresh(table)
    zero = AttributeClassifier.init(table, zero=True)
    assert classifier_logprob(zero, [1], seq, 0).item() == pytest.approx(math.log(0.5), abs=1e-15)
    clf = AttributeClassifier.init(table, rng=np.random.default_rng(0))
    total = sum(math.exp(classifier_logprob(clf, [1], seq, k).item()) for k in range(2))
    assert abs(total - 1) < 1e-9
    with pytest.raises(IndexError):
        classifier_logprob(clf, [1], seq, 2)


def test_trained_classifier_separates_sentiment(world):
    pos = world.lex.encode("the food was great . i loved it .")
    neg = world.lex.encode("the food was awful . i hated it .")
    assert world.clf.predict_ids(pos)[1] > 0.9
    assert world.clf.predict_ids(neg)[0] > 0.9


def test_generative_posterior():
    table = small_table()
    seq = SoftSequence(np.random.default_rng(3).normal(size=(3, 6))).refresh(table)
    a = CausalLM.init(table, LMConfig(d_ff=4), np.random.default_rng(1))
    b = CausalLM.init(table, LMConfig(d_ff=4), np.random.default_rng(2))
    same = ConditionalLM(["x", "y"], [a, a])
    assert generative_classprob(same, [1], seq, 0) == pytest.approx(0.5, abs=1e-15)
    cond = ConditionalLM(["x", "y"], [a, b])
    na = a.nll([1], seq, include_prompt=True).item()
    nb = b.nll([1], seq, include_prompt=True).item()
    expected = math.exp(-na) / (math.exp(-na) + math.exp(-nb))
    assert generative_classprob(cond, [1], seq, 0) == pytest.approx(expected, rel=1e-12)
    p = [generative_classprob(cond, [1], seq, k) for k in range(2)]
    assert abs(sum(p) - 1) < 1e-12 and all(0 < x < 1 for x in p)


def test_verbalizer_variant_is_two_prefixed_nlls():
    table = small_table()
    lm = CausalLM.init(table, LMConfig(d_ff=4), np.random.default_rng(1))
    seq = SoftSequence(np.random.default_rng(3).normal(size=(3, 6))).refresh(table)
    cond = ConditionalLM(["x", "y"], [lm], prefixes=[[5], [6]])
    for k, pre in enumerate([[5], [6]]):
        direct = lm.nll([1], seq, prefix=pre, include_prompt=True).item()
        assert cond.class_nll(k, [1], seq).item() == direct


def test_nucleus_filter_limits():
    p = np.array([0.1, 0.5, 0.15, 0.25])
    np.testing.assert_allclose(nucleus_filter(p, 1.0), p)
    np.testing.assert_allclose(nucleus_filter(p, 1e-9), [0, 1, 0, 0])
    np.testing.assert_allclose(nucleus_filter(p, 0.7), [0, 0.5 / 0.75, 0, 0.25 / 0.75])
    with pytest.raises(ValueError):
        nucleus_filter(p, 0.0)


def test_ancestral_sampling_matches_model_distribution():
    table = small_table()
    lm = CausalLM.init(table, LMConfig(d_ff=4, init_scale=0.8), np.random.default_rng(4))
    lm.params["out.b"] = np.random.default_rng(5).normal(size=8)
    p = lm.next_token_probs([2])
    rng = np.random.default_rng(6)
    n = 10_000
    counts = np.bincount([ar_sample(lm, [2], 1, 1.0, rng)[0] for _ in range(n)], minlength=8)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)


def test_greedy_limit():
    table = small_table()
    lm = CausalLM.init(table, LMConfig(d_ff=4, init_scale=0.8), np.random.default_rng(4))
    out = ar_sample(lm, [1], 4, 1e-12, np.random.default_rng(0))
    ctx = [1]
    for tok in out:
        assert tok == int(np.argmax(lm.next_token_probs(ctx)))
        ctx.append(tok)


def test_checkpoint_roundtrip_bitwise(world, tmp_path):
    path = tmp_path / "lm.ck"
    save_checkpoint(path, world.lm)
    back = load_checkpoint(path)
    assert back.table.content_hash() == world.table.content_hash()
    for k, v in world.lm.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "again.ck", back)
    assert (tmp_path / "again.ck").read_bytes() == path.read_bytes()
    clf_path = tmp_path / "clf.ck"
    save_checkpoint(clf_path, world.clf)
    clf = load_checkpoint(clf_path, table=back.table)
    assert clf.table is back.table


def test_checkpoint_corruption_detected(world, tmp_path):
    path = tmp_path / "lm.ck"
    save_checkpoint(path, world.lm)
    raw = path.read_bytes()
    (tmp_path / "short.ck").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="payload"):
        load_checkpoint(tmp_path / "short.ck")
    other = small_table(V=len(world.lex), d=world.table.dim)
    other.lexicon = world.lex
    with pytest.raises(ValueError, match="differs"):
        load_checkpoint(path, table=other)


def test_corpus_nll_close_to_heldout(world):
    assert corpus_nll(world.lm, world.seqs[:200]) < world.lm_summary.uniform_nll
