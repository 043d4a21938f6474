"""Command-line workbench: train, sample, evaluate, ablate, verify.

Every subcommand takes a JSON run config (``--config``); ``--seed`` and
``--out`` override the corresponding config keys. Configs are validated
against a schema before any compute and unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import gradsuite
from .constraints import (ConstraintError, DiscriminativeConstraint, GenerativeConstraint,
                          KeywordConstraint, KeywordSetConstraint, SeparationError,
                          TOXICITY_THRESHOLD, DEFAULT_DELTA, DEFAULT_TAU)
from .corpus import bundled_path, read_corpus
from .evaluation import build_report, rows_to_csv, state_memory_report, tokenize_keywords
from .geometry import verify_separation
from .models import (ClassifierConfig, ConditionalLM, EmbeddingTable, Lexicon, LMConfig,
                     TrainConfig, TrainingDiverged, ar_sample, load_checkpoint, save_checkpoint,
                     train_classifier, train_lm)
from .sampler import (RECORD_VERSION, MemoryCapExceeded, SamplerConfig, StateAccountant,
                      sample, simplex_sample)

log = logging.getLogger("langevin_text")

DATA_ENV = "LANGEVIN_TEXT_DATA"
DEFAULT_LENGTHS = [10, 20, 50, 100, 200, 500, 1000]
DEFAULT_TABLE_SCALE = 0.25
DEFAULT_DIM = 32


class UsageError(Exception):
    """A config or input problem reported to the operator without a traceback."""


# --------------------------------------------------------------------------
# schemas

def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_STR = {"type": "string"}
_STRS = {"type": "array", "items": _STR}

_TRAIN = _obj({"steps": _POS_INT, "batch_size": _POS_INT, "lr": {"type": "number", "exclusiveMinimum": 0},
               "holdout_fraction": {"type": "number", "minimum": 0, "maximum": 0.5},
               "optimizer": {"enum": ["adam", "sgd"]}, "log_every": _INT})

SCHEMAS = {
    "train-lm": _obj({
        "corpora": {"type": "object", "additionalProperties": _STR},
        "extra_tokens": _STRS,
        "verbalize": {"type": "boolean"},
        "table_from": _STR,
        "dim": _POS_INT,
        "table_scale": {"type": "number", "exclusiveMinimum": 0},
        "lm": _obj({"d_ff": _POS_INT, "n_layers": _POS_INT, "context_limit": _POS_INT,
                    "init_scale": _NUM}),
        "train": _TRAIN,
        "seed": _INT,
        "out": _STR,
    }, ["out"]),
    "train-classifier": _obj({
        "table_from": _STR,
        "corpora": {"type": "object", "additionalProperties": _STR},
        "hidden": _POS_INT,
        "init_scale": _NUM,
        "train": _TRAIN,
        "seed": _INT,
        "out": _STR,
    }, ["table_from", "out"]),
    "sample": _obj({
        "lm": _STR,
        "prompts": _STRS,
        "prompts_file": _STR,
        "lengths": {"type": "array", "items": _POS_INT, "minItems": 1},
        "samples_per_prompt": _POS_INT,
        "constraints": {"type": "array", "items": _obj({
            "type": {"enum": ["disc", "disc-upper", "toxicity", "gen", "keyword", "keyword-set"]},
            "parameters": {"type": "object"},
            "threshold": {"type": ["number", "null"]},
        }, ["type"])},
        "sampler": {"type": "object"},
        "parameterization": {"enum": ["embeds", "simplex"]},
        "continuation": {"type": "integer", "minimum": 0},
        "include_trace": {"type": "boolean"},
        "seed": _INT,
        "out": _STR,
    }, ["lm", "out"]),
    "eval": _obj({
        "samples": _STR,
        "lm": _STR,
        "keywords": {"type": "array", "items": _STRS},
        "csv": _STR,
        "out": _STR,
    }),
    "ablate-memory": _obj({
        "lm": _STR,
        "prompt": _STR,
        "lengths": {"type": "array", "items": _POS_INT, "minItems": 1},
        "cap_bytes": {"type": "number", "exclusiveMinimum": 0},
        "steps": _POS_INT,
        "seed": _INT,
        "out": _STR,
        "csv": _STR,
    }, ["lm"]),
    "verify-embeddings": _obj({"checkpoints": _STRS, "out": _STR, "seed": _INT}),
    "verify": _obj({
        "checkpoints": _STRS,
        "gradcheck_instances": _POS_INT,
        "skip_gradcheck": {"type": "boolean"},
        "seed": _INT,
        "out": _STR,
    }),
}

_SAMPLER_KEYS = {f.name for f in fields(SamplerConfig)}
_PATH_KEYS = {"lm", "table_from", "prompts_file", "samples"}


def validate_config(command: str, cfg: dict, base: Path | None = None) -> dict:
    """Schema check plus file-existence checks; returns cfg with resolved paths.

    Relative paths inside a config file are taken relative to that file.
    """
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise UsageError(f"invalid {command} config at {where}: {exc.message}") from None
    base = base or Path.cwd()

    def resolve(p: str) -> str:
        q = Path(p)
        return str(q if q.is_absolute() else base / q)

    cfg = dict(cfg)
    missing = []
    for key in _PATH_KEYS & cfg.keys():
        cfg[key] = resolve(cfg[key])
        if not Path(cfg[key]).exists():
            missing.append(cfg[key])
    if "corpora" in cfg:
        cfg["corpora"] = {k: resolve(v) for k, v in cfg["corpora"].items()}
        missing += [p for p in cfg["corpora"].values() if not Path(p).exists()]
    if "checkpoints" in cfg:
        cfg["checkpoints"] = [resolve(p) for p in cfg["checkpoints"]]
        missing += [p for p in cfg["checkpoints"] if not Path(p).exists()]
    for c in cfg.get("constraints", []):
        params = dict(c.get("parameters", {}))
        for key in ("model", "models"):
            if key in params:
                vals = params[key] if isinstance(params[key], list) else [params[key]]
                vals = [resolve(v) for v in vals]
                missing += [v for v in vals if not Path(v).exists()]
                params[key] = vals if isinstance(params[key], list) else vals[0]
        c["parameters"] = params
    if "sampler" in cfg:
        unknown = set(cfg["sampler"]) - _SAMPLER_KEYS
        if unknown:
            raise UsageError(f"unknown sampler keys: {sorted(unknown)}")
        try:
            SamplerConfig(**cfg["sampler"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid sampler settings: {exc}") from None
    for key in ("out", "csv"):
        if key in cfg:
            cfg[key] = resolve(cfg[key])
    if missing:
        raise UsageError("missing file(s): " + ", ".join(missing))
    return cfg


def data_dir() -> Path:
    env = os.environ.get(DATA_ENV)
    return Path(env) if env else bundled_path("")


def default_corpora() -> dict[str, str]:
    d = data_dir()
    return {"negative": str(d / "negative.txt"), "positive": str(d / "positive.txt")}


def _train_config(cfg: dict, seed: int, **defaults) -> TrainConfig:
    kw = {**defaults, **cfg.get("train", {})}
    return TrainConfig(seed=seed, **kw)


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# training

def cmd_train_lm(cfg: dict) -> int:
    seed = cfg.get("seed", 0)
    corpora = cfg.get("corpora") or default_corpora()
    texts = {label: read_corpus(p) for label, p in corpora.items()}
    if not any(texts.values()):
        raise UsageError("corpus is empty")
    verbalize = cfg.get("verbalize", False)
    if "table_from" in cfg:
        table = load_checkpoint(cfg["table_from"]).table
        table.frozen = True
    else:
        lines = [s for v in texts.values() for s in v]
        extra = list(corpora) + cfg.get("extra_tokens", [])
        lex = Lexicon.from_corpus(lines + [" ".join(extra)])
        rng = np.random.default_rng([seed, 0])
        table = EmbeddingTable.random(lex, cfg.get("dim", DEFAULT_DIM), rng,
                                      cfg.get("table_scale", DEFAULT_TABLE_SCALE))
    lex = table.lexicon
    seqs, prefixes = [], []
    try:
        for label, lines in texts.items():
            for s in lines:
                seqs.append(lex.encode(s))
                prefixes.append(lex.encode(label) if verbalize else [])
    except KeyError as exc:
        raise UsageError(f"corpus uses a token outside the shared lexicon: {exc}") from None
    lm_cfg = LMConfig(**cfg.get("lm", {}))
    lm, summary = train_lm(seqs, table, _train_config(cfg, seed, steps=1500),
                           lm_cfg, prefixes=prefixes if verbalize else None)
    save_checkpoint(cfg["out"], lm)
    report = summary.to_json()
    report.update({"checkpoint": cfg["out"], "table_hash": table.content_hash(),
                   "vocab_size": table.vocab_size, "dim": table.dim,
                   "separation": verify_separation(table).to_json()})
    _emit(report)
    return 0


def cmd_train_classifier(cfg: dict) -> int:
    seed = cfg.get("seed", 0)
    table = load_checkpoint(cfg["table_from"]).table
    corpora = cfg.get("corpora") or default_corpora()
    labels = list(corpora)
    if len(labels) < 2:
        raise UsageError("a classifier needs at least two labelled corpora")
    seqs, ys = [], []
    try:
        for k, label in enumerate(labels):
            for s in read_corpus(corpora[label]):
                seqs.append(table.lexicon.encode(s))
                ys.append(k)
    except KeyError as exc:
        raise UsageError(f"corpus uses a token outside the shared lexicon: {exc}") from None
    ccfg = ClassifierConfig(hidden=cfg.get("hidden", 32), labels=tuple(labels),
                            init_scale=cfg.get("init_scale", 0.3))
    clf, summary = train_classifier(seqs, ys, table, _train_config(cfg, seed, steps=300, lr=0.02), ccfg)
    save_checkpoint(cfg["out"], clf)
    report = summary.to_json()
    report.update({"checkpoint": cfg["out"], "table_hash": table.content_hash(), "labels": labels})
    _emit(report)
    return 0


# --------------------------------------------------------------------------
# sampling

class _Models:
    """Loads checkpoints once and enforces a single shared embedding table."""

    def __init__(self, lm_path: str):
        self.lm = load_checkpoint(lm_path)
        self.table = self.lm.table
        self.cache: dict[str, object] = {lm_path: self.lm}

    def get(self, path: str):
        if path not in self.cache:
            try:
                self.cache[path] = load_checkpoint(path, table=self.table)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
        return self.cache[path]


def _label_index(labels, name) -> int:
    if isinstance(name, int):
        if not 0 <= name < len(labels):
            raise UsageError(f"label index {name} out of range for {list(labels)}")
        return name
    if name not in labels:
        raise UsageError(f"unknown label {name!r}; known labels {list(labels)}")
    return list(labels).index(name)


def build_constraints(decls: list[dict], models: _Models) -> list:
    """Instantiate constraint declarations ``{type, parameters, threshold}``."""
    out = []
    table = models.table
    for i, d in enumerate(decls):
        kind, p, thr = d["type"], d.get("parameters", {}), d.get("threshold")
        try:
            if kind in ("disc", "disc-upper", "toxicity"):
                clf = models.get(p["model"])
                if clf.kind != "classifier":
                    raise UsageError(f"constraint {i}: {p['model']} is not a classifier")
                label = _label_index(clf.config.labels, p["label"])
                if kind == "disc":
                    out.append(DiscriminativeConstraint(clf, label, 0.9 if thr is None else thr))
                else:
                    bound = TOXICITY_THRESHOLD if thr is None else thr
                    out.append(DiscriminativeConstraint(clf, label, bound, upper=True))
            elif kind == "gen":
                labels = p["labels"]
                if "models" in p:
                    cond = ConditionalLM(labels, [models.get(m) for m in p["models"]])
                else:
                    lm = models.get(p["model"])
                    cond = ConditionalLM(labels, [lm], [table.lexicon.encode(l) for l in labels])
                desired = _label_index(labels, p["desired"])
                out.extend(GenerativeConstraint(cond, desired, k)
                           for k in range(len(labels)) if k != desired)
            elif kind == "keyword":
                out.append(KeywordConstraint(table, table.lexicon.encode(p["phrase"]),
                                             p.get("tau", DEFAULT_TAU),
                                             DEFAULT_DELTA if thr is None else thr))
            elif kind == "keyword-set":
                words = [table.lexicon.encode(w) for w in p["words"]]
                out.append(KeywordSetConstraint(table, words, p.get("tau", DEFAULT_TAU),
                                                DEFAULT_DELTA if thr is None else thr))
        except KeyError as exc:
            raise UsageError(f"constraint {i} ({kind}): missing or unknown {exc}") from None
        except (ConstraintError, SeparationError) as exc:
            raise UsageError(f"constraint {i} ({kind}): {exc}") from None
    return out


def _prompts(cfg: dict) -> list[str]:
    if "prompts" in cfg:
        return list(cfg["prompts"])
    path = cfg.get("prompts_file") or str(data_dir() / "prompts.txt")
    return read_corpus(path)


def _sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(**{**cfg.get("sampler", {}), "seed": cfg.get("seed", 0)})


# Worker state lives at module level so process pools rebuild it once per worker.
_WORKER: dict = {}


def _init_worker(cfg: dict) -> None:
    models = _Models(cfg["lm"])
    _WORKER.update(cfg=cfg, models=models, constraints=build_constraints(cfg.get("constraints", []), models),
                   sampler=_sampler_config(cfg))


def _run_chain(job: tuple[int, str]) -> dict:
    chain, prompt_text = job
    cfg, models = _WORKER["cfg"], _WORKER["models"]
    lm, lex = models.lm, models.table.lexicon
    prompt = lex.encode(prompt_text)
    fn = simplex_sample if cfg.get("parameterization") == "simplex" else sample
    best, best_key = None, None
    for L in cfg.get("lengths", [10]):
        rec = fn(lm, prompt, L, _WORKER["constraints"], _WORKER["sampler"], chain)
        ok = all(c["satisfied"] for c in rec.constraints) and not rec.is_fallback
        key = (not ok, rec.nll / L)  # satisfying first, then lowest per-token NLL
        if best is None or key < best_key:
            best, best_key = rec, key
    out = best.to_json(include_trace=cfg.get("include_trace", False))
    out["length"] = len(best.output_ids)
    n_cont = cfg.get("continuation", 0)
    if n_cont:
        rng = np.random.default_rng([_WORKER["sampler"].seed, chain, 3])
        cont = ar_sample(lm, [*prompt, *best.output_ids], n_cont, _WORKER["sampler"].nucleus_p, rng)
        out["continuation_ids"] = cont
        out["continuation_text"] = lex.decode(cont)
    return out


def cmd_sample(cfg: dict, jobs: int = 1) -> int:
    prompts = _prompts(cfg)
    if not prompts:
        raise UsageError("no prompts given")
    _init_worker(cfg)  # validates models, tables and constraints before any sampling
    lex = _WORKER["models"].table.lexicon
    for p in prompts:
        try:
            lex.encode(p)
        except KeyError as exc:
            raise UsageError(f"prompt {p!r}: {exc}") from None
    spp = cfg.get("samples_per_prompt", 1)
    jobs_list = [(i * spp + k, p) for i, p in enumerate(prompts) for k in range(spp)]
    out_path = Path(cfg["out"])
    n_ok = n_fb = n = 0
    t0 = time.time()
    status = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        try:
            if jobs > 1:
                with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cfg,)) as pool:
                    results = pool.map(_run_chain, jobs_list)
                    for rec in results:
                        n, n_ok, n_fb = _write(fh, rec, n, n_ok, n_fb)
            else:
                for job in jobs_list:
                    n, n_ok, n_fb = _write(fh, _run_chain(job), n, n_ok, n_fb)
        except Exception as exc:  # a chain died: keep the flushed prefix, report, fail
            log.error("chain %d failed: %s: %s", n, type(exc).__name__, exc)
            status = 1
    summary = {"records": n, "expected": len(jobs_list), "satisfied_rate": n_ok / n if n else 0.0,
               "fallback_rate": n_fb / n if n else 0.0, "seconds": round(time.time() - t0, 2),
               "out": str(out_path)}
    print(json.dumps(summary, sort_keys=True))
    return status


def _write(fh, rec: dict, n: int, n_ok: int, n_fb: int):
    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    fh.flush()
    ok = all(c["satisfied"] for c in rec["constraints"])
    return n + 1, n_ok + ok, n_fb + (rec["termination"] == "fallback-autoregressive")


# --------------------------------------------------------------------------
# evaluation

def read_records(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict) or "output_ids" not in rec:
                raise UsageError(f"{path}:{lineno}: not a sample record")
            if rec.get("version") != RECORD_VERSION:
                raise UsageError(f"{path}:{lineno}: record version {rec.get('version')} "
                                 f"unsupported (this build reads version {RECORD_VERSION})")
            records.append(rec)
    if not records:
        raise UsageError(f"{path}: no records")
    return records


def cmd_eval(cfg: dict) -> int:
    if "samples" not in cfg:
        raise UsageError("eval needs a samples path")
    records = read_records(cfg["samples"])
    lm = load_checkpoint(cfg["lm"]) if "lm" in cfg else None
    kw = None
    if "keywords" in cfg:
        if lm is None:
            raise UsageError("keyword coverage needs an lm checkpoint for its lexicon")
        try:
            kw = [tokenize_keywords(lm.table.lexicon, ks) for ks in cfg["keywords"]]
        except KeyError as exc:
            raise UsageError(f"keyword: {exc}") from None
    try:
        report = build_report(records, lm, kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(report.to_json(), cfg.get("out"))
    if "csv" in cfg:
        Path(cfg["csv"]).write_text(report.to_csv(), encoding="utf-8")
    return 0


# --------------------------------------------------------------------------
# memory ablation

def cmd_ablate_memory(cfg: dict) -> int:
    lm = load_checkpoint(cfg["lm"])
    table = lm.table
    lengths = cfg.get("lengths", DEFAULT_LENGTHS)
    prompt = table.lexicon.encode(cfg.get("prompt", "the food was"))
    cap = cfg.get("cap_bytes", 400_000.0)
    sc = SamplerConfig(max_steps=cfg.get("steps", 2), restarts=0, fallback=False, keep_trace=False,
                       seed=cfg.get("seed", 0))
    measured, runs = {}, []
    for L in lengths:
        m = {}
        for name, fn in (("embeds", sample), ("simplex", simplex_sample)):
            acc = StateAccountant(cap)
            t = time.time()
            try:
                fn(lm, prompt, L, [], sc, accountant=acc)
                m[name] = acc.peak
                outcome = "ok"
            except MemoryCapExceeded:
                m[name] = None
                outcome = "cap-exceeded"
            runs.append({"L": L, "sampler": name, "outcome": outcome, "peak_bytes": m[name],
                         "seconds": round(time.time() - t, 3)})
        measured[L] = m
    rows = state_memory_report(lengths, table.vocab_size, table.dim, measured)
    max_ok = {name: max([r["L"] for r in runs if r["sampler"] == name and r["outcome"] == "ok"],
                        default=0) for name in ("embeds", "simplex")}
    _emit({"cap_bytes": cap, "V": table.vocab_size, "d": table.dim, "rows": rows,
           "runs": runs, "max_length": max_ok}, cfg.get("out"))
    if "csv" in cfg:
        Path(cfg["csv"]).write_text(rows_to_csv(rows), encoding="utf-8")
    return 0


# --------------------------------------------------------------------------
# verification

def cmd_verify_embeddings(cfg: dict) -> int:
    """Separation report per checkpoint table; non-zero exit if any table violates it."""
    if not cfg.get("checkpoints"):
        raise UsageError("verify-embeddings needs at least one checkpoint")
    reports = {p: verify_separation(load_checkpoint(p).table).to_json() for p in cfg["checkpoints"]}
    _emit(reports, cfg.get("out"))
    return 0 if all(r["ok"] for r in reports.values()) else 1


def cmd_verify(cfg: dict) -> int:
    checks = []
    for path in cfg.get("checkpoints", []):
        model = load_checkpoint(path)
        rep = verify_separation(model.table)
        checks.append({"property": "separation", "checkpoint": path, "ok": rep.ok,
                       "violations": len(rep.violations), "details": rep.violations[:50],
                       "column_margin": rep.column_margin})
    if not cfg.get("skip_gradcheck", False):
        results = gradsuite.run_suite(cfg.get("gradcheck_instances", 4), cfg.get("seed", 0))
        worst = max(r.max_rel_error for r in results)
        checks.append({"property": "gradient", "ok": all(r.ok for r in results),
                       "instances": sum(r.instances for r in results), "cases": len(results),
                       "max_rel_error": worst, "tolerance": gradsuite.TOLERANCE,
                       "failing": [r.name for r in results if not r.ok]})
    ok = all(c["ok"] for c in checks)
    _emit({"ok": ok, "checks": checks}, cfg.get("out"))
    return 0 if ok else 1


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "train-lm": cmd_train_lm,
    "train-classifier": cmd_train_classifier,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate-memory": cmd_ablate_memory,
    "verify": cmd_verify,
    "verify-embeddings": cmd_verify_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="langevin-text", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="overrides the config output path")
        if name == "sample":
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "eval":
            p.add_argument("samples", nargs="?", help="JSONL produced by `sample`")
            p.add_argument("--lm", help="LM checkpoint for self-perplexity")
            p.add_argument("--csv", help="also write the report as CSV")
        if name in ("verify", "verify-embeddings"):
            p.add_argument("checkpoints", nargs="*", help="checkpoints whose tables to check")
    return ap


def load_config(args) -> dict:
    cfg: dict = {}
    base = None
    if args.config:
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        base = path.parent
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = str(Path(args.out).resolve())
    for key in ("samples", "lm", "csv"):
        if getattr(args, key, None):
            cfg[key] = str(Path(getattr(args, key)).resolve())
    if getattr(args, "checkpoints", None):
        cfg["checkpoints"] = [str(Path(p).resolve()) for p in args.checkpoints]
    return validate_config(args.command, cfg, base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "sample":
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            return cmd_sample(cfg, args.jobs)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
