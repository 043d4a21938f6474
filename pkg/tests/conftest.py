"""Shared fixtures: one trained toy world per test session."""
from dataclasses import dataclass

import numpy as np
import pytest

from langevin_text.corpus import bundled_path, read_corpus
from langevin_text.models import (ClassifierConfig, EmbeddingTable, Lexicon, TrainConfig,
                                  train_classifier, train_lm)
from langevin_text.sampler import SamplerConfig


@dataclass
class World:
    lm: object
    table: object
    lex: object
    clf: object
    judge: object
    seqs: list
    labels: list
    lm_summary: object


def build_world(steps: int = 1500) -> World:
    pos = read_corpus(bundled_path("positive.txt"))
    neg = read_corpus(bundled_path("negative.txt"))
    lex = Lexicon.from_corpus(pos + neg + ["negative positive"])
    table = EmbeddingTable.random(lex, 32, np.random.default_rng([0, 0]), 0.25)
    seqs = [lex.encode(s) for s in neg + pos]
    labels = [0] * len(neg) + [1] * len(pos)
    lm, summary = train_lm(seqs, table, TrainConfig(steps=steps, seed=0))
    clf, _ = train_classifier(seqs, labels, table, TrainConfig(steps=300, lr=0.02, seed=0))
    # the judge is trained separately (different seed, width, data order)
    judge, _ = train_classifier(seqs, labels, table, TrainConfig(steps=300, lr=0.02, seed=1),
                                ClassifierConfig(hidden=16))
    return World(lm, table, lex, clf, judge, seqs, labels, summary)


@pytest.fixture(scope="session")
def world() -> World:
    return build_world()


@pytest.fixture
def fast_config() -> SamplerConfig:
    return SamplerConfig(max_steps=60, keep_trace=True, restarts=1)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
