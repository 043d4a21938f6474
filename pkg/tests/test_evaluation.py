import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langevin_text.evaluation import (MetricReport, build_report, coverage, dist_n, dist_n_single,
                                      perplexity, rows_to_csv, state_memory_report)


def brute_dist(samples, n):
    seen, total = [], 0
    for s in samples:
        for i in range(len(s) - n + 1):
            g = tuple(s[i:i + n])
            total += 1
            if g not in seen:
                seen.append(g)
    return len(seen) / total


def test_dist_n_examples():
    assert dist_n_single([[1, 2, 3], [1, 2, 4]], 1) == 4 / 6
    assert dist_n_single([[1, 2, 3], [1, 2, 4]], 2) == 3 / 4
    assert dist_n([[1, 1], [1, 1], [5, 6], [7, 8]], 1, groups=["a", "a", "b", "b"]) == (0.25 + 1.0) / 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 5), min_size=3, max_size=8), min_size=1, max_size=10),
       st.integers(1, 3))
def test_dist_n_matches_recount(samples, n):
    assert dist_n(samples, n) == brute_dist(samples, n)


def test_dist_n_short_samples_warn():
    with pytest.warns(UserWarning, match="shorter"):
        assert dist_n([[1], [1, 2, 3]], 2) == 1.0
    with pytest.raises(ValueError), pytest.warns(UserWarning):
        dist_n([[1]], 2)
    with pytest.raises(ValueError):
        dist_n([[1, 2]], 0)


def test_coverage():
    samples = [[1, 2, 3, 4], [4, 4, 1], [9]]
    kws = [[[2, 3], [4]]]
    count, full = coverage(samples, kws)
    assert count == pytest.approx((2 + 1 + 0) / 3)
    assert full == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        coverage([], kws)


def test_perplexity_matches_direct_formula(world):
    prompt = world.lex.encode("the food was")
    pairs = [(prompt, world.lex.encode("great and fresh .")), (prompt, world.lex.encode("so bad ."))]
    nll = sum(world.lm.sequence_nll(p, o) for p, o in pairs)
    assert perplexity(world.lm, pairs) == pytest.approx(np.exp(nll / 7))


def test_state_memory_report():
    rows = state_memory_report([10, 20, 50], 256, 32)
    assert rows[1]["embeds"] == 640 and rows[1]["simplex"] == 5120
    assert all(r["ratio"] == 8 for r in rows)
    assert [r["embeds"] for r in rows] == sorted(r["embeds"] for r in rows)
    csv = rows_to_csv(rows)
    assert csv.splitlines()[0] == "L,embeds,simplex,ratio"


def _records():
    return [
        {"version": 1, "prompt": "a", "prompt_ids": [1], "output_ids": [2, 3, 4], "termination": "converged-early-stop",
         "constraints": [{"name": "k", "satisfied": True, "f_final": 0.1, "epsilon": 1.0}], "nll": 3.0},
        {"version": 1, "prompt": "a", "prompt_ids": [1], "output_ids": [2, 3, 5], "termination": "fallback-autoregressive",
         "constraints": [{"name": "k", "satisfied": False, "f_final": 2.0, "epsilon": 1.0}], "nll": 6.0},
    ]


def test_build_report_equals_direct_calls():
    recs = _records()
    rep = build_report(recs, keyword_sets=[[[3]]])
    outs = [r["output_ids"] for r in recs]
    assert rep.dist_2 == dist_n(outs, 2, ["a", "a"])
    assert rep.satisfaction == {"k": 0.5} and rep.fallback_rate == 0.5
    assert rep.mean_nll == pytest.approx(9.0 / 6)
    assert (rep.keyword_count, rep.keyword_percent) == (1.0, 1.0)
    json.dumps(rep.to_json())
    header, row = rep.to_csv().splitlines()
    assert "satisfaction[k]" in header.split(",")
    with pytest.raises(ValueError):
        build_report([])
