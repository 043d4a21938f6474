"""Corpus ingestion and the bundled toy review grammar."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

SUBJECTS = ["the food", "the service", "the movie", "the staff", "the room",
            "the view", "the music", "the book", "the coffee", "the show"]
VERBS = ["was", "is", "felt", "seemed"]
INTENSIFIERS = ["very", "really", "so", "quite"]
ADJECTIVES = {
    "positive": ["great", "good", "lovely", "excellent", "wonderful",
                 "amazing", "nice", "perfect", "fresh", "friendly"],
    "negative": ["bad", "awful", "terrible", "poor", "horrible",
                 "bland", "rude", "boring", "cold", "dirty"],
}
CLOSINGS = {
    "positive": ["i loved it", "we will return", "highly recommended", "what a treat",
                 "a must try"],
    "negative": ["i hated it", "we will not return", "never again", "what a mess",
                 "a total disaster"],
}
TEMPLATES = [
    "{subj} {verb} {int} {adj} and {adj2} .",
    "{subj} {verb} {adj} . {close} .",
    "{subj} {verb} {int} {adj} . {close} .",
    "{subj} {verb} {adj} and {int} {adj2} .",
]


def read_corpus(path: str | Path) -> list[str]:
    """UTF-8 text, one sequence per line; blank lines are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln.strip() for ln in text.splitlines()]
    return [ln for ln in lines if ln]


def review_sentence(label: str, rng: np.random.Generator) -> str:
    adjs = ADJECTIVES[label]
    a, b = rng.choice(len(adjs), size=2, replace=False)
    tpl = TEMPLATES[rng.integers(len(TEMPLATES))]
    return tpl.format(
        subj=SUBJECTS[rng.integers(len(SUBJECTS))],
        verb=VERBS[rng.integers(len(VERBS))],
        int=INTENSIFIERS[rng.integers(len(INTENSIFIERS))],
        adj=adjs[a], adj2=adjs[b],
        close=CLOSINGS[label][rng.integers(len(CLOSINGS[label]))],
    )


def review_corpus(n_per_class: int, seed: int = 0) -> dict[str, list[str]]:
    rng = np.random.default_rng(seed)
    return {label: [review_sentence(label, rng) for _ in range(n_per_class)]
            for label in ("negative", "positive")}


def review_prompts() -> list[str]:
    """Fifteen neutral prompts (subject + verb) for the two-class campaign."""
    return [f"{s} {v}" for s in SUBJECTS[:5] for v in VERBS[:3]]


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("langevin_text") / "data" / name))


def write_bundled(out_dir: str | Path, n_per_class: int = 1500, seed: int = 0) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for label, lines in review_corpus(n_per_class, seed).items():
        (out / f"{label}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "prompts.txt").write_text("\n".join(review_prompts()) + "\n", encoding="utf-8")
