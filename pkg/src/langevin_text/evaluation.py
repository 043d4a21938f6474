"""Metrics over sample sets: dist-n, coverage, self-perplexity, state memory."""
from __future__ import annotations

import csv
import io
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .constraints import contains_phrase


def _ngrams(seq: Sequence, n: int) -> list[tuple]:
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def dist_n_single(samples: Sequence[Sequence], n: int) -> float:
    """Distinct n-grams over total n-grams within one sample set."""
    grams = [g for s in samples for g in _ngrams(list(s), n)]
    if not grams:
        raise ValueError("no n-grams to count")
    return len(set(grams)) / len(grams)


def dist_n(samples: Sequence[Sequence], n: int, groups: Sequence | None = None) -> float:
    """Mean over groups (e.g. prompts) of the per-group dist-n ratio.

    Samples shorter than ``n`` are dropped with a warning.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    groups = list(groups) if groups is not None else [0] * len(samples)
    by_group: dict = defaultdict(list)
    short = 0
    for s, g in zip(samples, groups):
        if len(s) < n:
            short += 1
            continue
        by_group[g].append(s)
    if short:
        warnings.warn(f"dist-{n}: excluded {short} sample(s) shorter than {n}", stacklevel=2)
    if not by_group:
        raise ValueError("no samples long enough for dist-n")
    ratios = [dist_n_single(v, n) for _, v in sorted(by_group.items(), key=lambda kv: str(kv[0]))]
    return float(np.mean(ratios))


def coverage(samples: Sequence[Sequence[int]],
             keyword_sets: Sequence[Sequence[Sequence[int]]]) -> tuple[float, float]:
    """(mean number of keywords present, fraction of samples containing all of them).

    ``keyword_sets`` gives one set per sample, or a single set reused for all.
    Each keyword is a token-id phrase matched as a contiguous subsequence.
    """
    if not samples:
        raise ValueError("coverage of an empty sample set is undefined")
    if len(keyword_sets) == 1 and len(samples) != 1:
        keyword_sets = list(keyword_sets) * len(samples)
    if len(keyword_sets) != len(samples):
        raise ValueError("need one keyword set per sample")
    counts, full = [], []
    for s, kws in zip(samples, keyword_sets):
        present = sum(contains_phrase(s, k) for k in kws)
        counts.append(present)
        full.append(present == len(kws))
    return float(np.mean(counts)), float(np.mean(full))


def tokenize_keywords(lexicon, keywords: Iterable[str]) -> list[list[int]]:
    return [lexicon.encode(k) for k in keywords]


def perplexity(lm, samples: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """exp of the corpus mean per-token NLL of (prompt, output) pairs under ``lm``."""
    if not samples:
        raise ValueError("perplexity of an empty sample set is undefined")
    total, count = 0.0, 0
    for prompt, ids in samples:
        total += lm.sequence_nll(prompt, ids)
        count += len(ids)
    return math.exp(total / count)


def state_memory_report(lengths: Sequence[int], V: int, d: int,
                        measured: dict | None = None) -> list[dict]:
    """State-size rows for the embedding vs vocabulary-simplex parameterisations.

    ``measured`` optionally maps L -> {"embeds": bytes|None, "simplex": bytes|None}
    from instrumented runs (None marks a run that hit the memory cap).
    """
    if V < 1 or d < 1 or any(L < 1 for L in lengths):
        raise ValueError("dimensions must be positive")
    rows = []
    for L in lengths:
        row = {"L": L, "embeds": L * d, "simplex": L * V, "ratio": V / d}
        if measured and L in measured:
            m = measured[L]
            row["embeds_peak_bytes"] = m.get("embeds")
            row["simplex_peak_bytes"] = m.get("simplex")
            if m.get("embeds") and m.get("simplex"):
                row["measured_ratio"] = m["simplex"] / m["embeds"]
        rows.append(row)
    return rows


@dataclass
class MetricReport:
    sample_count: int
    dist_1: float
    dist_2: float
    dist_3: float
    mean_nll: float
    perplexity: float
    satisfaction: dict = field(default_factory=dict)
    all_satisfied_rate: float | None = None
    fallback_rate: float = 0.0
    keyword_count: float | None = None
    keyword_percent: float | None = None
    state_params: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        flat = {k: v for k, v in self.to_json().items() if not isinstance(v, dict)}
        for name, rate in self.satisfaction.items():
            flat[f"satisfaction[{name}]"] = rate
        for k, v in self.extra.items():
            flat[k] = v
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(flat.keys())
        w.writerow(flat.values())
        return buf.getvalue()


def rows_to_csv(rows: Sequence[dict]) -> str:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def build_report(records: Sequence[dict], lm=None, keyword_sets=None) -> MetricReport:
    """Aggregate JSONL sample records (as dicts) into a :class:`MetricReport`."""
    if not records:
        raise ValueError("no records to evaluate")
    outs = [r["output_ids"] for r in records]
    prompts = [r.get("prompt_ids", []) for r in records]
    groups = [r.get("prompt", "") for r in records]
    sat: dict[str, list[bool]] = defaultdict(list)
    for r in records:
        for c in r.get("constraints", []):
            sat[c["name"]].append(bool(c["satisfied"]))
    all_ok = [all(c["satisfied"] for c in r.get("constraints", [])) for r in records]
    n_tok = sum(len(o) for o in outs)
    if lm is not None:
        nlls = [lm.sequence_nll(p, o) for p, o in zip(prompts, outs)]
    else:
        nlls = [r["nll"] for r in records]
    mean_nll = sum(nlls) / n_tok
    report = MetricReport(
        sample_count=len(records),
        dist_1=dist_n(outs, 1, groups), dist_2=dist_n(outs, 2, groups), dist_3=dist_n(outs, 3, groups),
        mean_nll=mean_nll, perplexity=math.exp(mean_nll),
        satisfaction={k: float(np.mean(v)) for k, v in sat.items()},
        all_satisfied_rate=float(np.mean(all_ok)),
        fallback_rate=float(np.mean([r["termination"] == "fallback-autoregressive" for r in records])),
    )
    if keyword_sets is not None:
        report.keyword_count, report.keyword_percent = coverage(outs, keyword_sets)
    return report
