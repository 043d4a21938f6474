import json

import pytest

from langevin_text.cli import main, read_records, UsageError
from langevin_text.evaluation import build_report
from langevin_text.models import load_checkpoint


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["train-lm", "--config", write(d / "lm.json", {"out": "lm.ck", "train": {"steps": 400}})]) == 0
    assert main(["train-classifier", "--config",
                 write(d / "clf.json", {"table_from": "lm.ck", "out": "clf.ck"})]) == 0
    return d


def test_train_outputs_load_and_share_table(trained):
    lm = load_checkpoint(trained / "lm.ck")
    clf = load_checkpoint(trained / "clf.ck", table=lm.table)
    assert clf.table is lm.table


def test_train_is_deterministic(tmp_path):
    cfg = {"train": {"steps": 20}, "seed": 4}
    write(tmp_path / "c.json", cfg)
    main(["train-lm", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "a.ck")])
    main(["train-lm", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "b.ck")])
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_missing_corpus_fails_before_training(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"out": "x.ck", "corpora": {"pos": "nope.txt"}})
    assert main(["train-lm", "--config", cfg]) == 2
    assert "nope.txt" in capsys.readouterr().err
    assert not (tmp_path / "x.ck").exists()


def test_unknown_keys_rejected(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"out": "x.ck", "stpes": 3})
    assert main(["train-lm", "--config", cfg]) == 2
    assert "stpes" in capsys.readouterr().err
    cfg = write(tmp_path / "s.json", {"lm": "x", "out": "y", "sampler": {"etaa": 1}})
    assert main(["sample", "--config", cfg]) == 2


def sample_cfg(trained, **kw):
    cfg = {"lm": "lm.ck", "out": "s.jsonl", "prompts": ["the food was", "the movie is"],
           "samples_per_prompt": 2, "lengths": [4, 5],
           "sampler": {"max_steps": 60},
           "constraints": [{"type": "disc", "parameters": {"model": "clf.ck", "label": "positive"},
                            "threshold": 0.9},
                           {"type": "keyword", "parameters": {"phrase": "good"}}]}
    cfg.update(kw)
    return write(trained / "sample.json", cfg)


def test_sample_then_eval(trained, capsys):
    assert main(["sample", "--config", sample_cfg(trained)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["records"] == 4
    recs = read_records(trained / "s.jsonl")
    assert [r["chain"] for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert {"version", "prompt", "output_ids", "output_text", "termination", "constraints",
                "nll", "iterations"} <= set(r)
        assert {"name", "f_final", "epsilon", "satisfied"} <= set(r["constraints"][0])
    assert main(["eval", str(trained / "s.jsonl"), "--lm", str(trained / "lm.ck"),
                 "--csv", str(trained / "r.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    lm = load_checkpoint(trained / "lm.ck")
    assert report == build_report(recs, lm).to_json()
    assert (trained / "r.csv").read_text().startswith("sample_count,")


def test_sample_parallel_matches_serial(trained):
    main(["sample", "--config", sample_cfg(trained), "--out", str(trained / "a.jsonl")])
    main(["sample", "--config", sample_cfg(trained), "--out", str(trained / "b.jsonl"), "--jobs", "2"])
    assert (trained / "a.jsonl").read_bytes() == (trained / "b.jsonl").read_bytes()


def test_zero_constraint_run_never_falls_back(trained):
    # default 250-step budget
    main(["sample", "--config", sample_cfg(trained, constraints=[], lengths=[4], sampler={}),
          "--out", str(trained / "z.jsonl")])
    for r in read_records(trained / "z.jsonl"):
        assert r["termination"] in ("converged-early-stop", "selected-by-repeat")


def test_table_mismatch_is_hard_error(trained, tmp_path, capsys):
    main(["train-lm", "--config", write(tmp_path / "o.json", {"out": "other.ck", "seed": 9,
                                                               "train": {"steps": 5}})])
    cfg = json.loads(open(sample_cfg(trained)).read())
    cfg["lm"] = str(tmp_path / "other.ck")
    cfg["constraints"][0]["parameters"]["model"] = str(trained / "clf.ck")
    cfg["out"] = str(tmp_path / "x.jsonl")
    assert main(["sample", "--config", write(tmp_path / "s.json", cfg)]) == 2
    assert "embedding table differs" in capsys.readouterr().err


def test_eval_rejects_corrupt_and_wrong_version(tmp_path, capsys):
    good = {"version": 1, "output_ids": [1, 2], "constraints": [], "termination": "x", "nll": 1.0}
    (tmp_path / "bad.jsonl").write_text(json.dumps(good) + "\n{not json\n")
    assert main(["eval", str(tmp_path / "bad.jsonl")]) == 2
    assert ":2:" in capsys.readouterr().err
    (tmp_path / "v.jsonl").write_text(json.dumps({**good, "version": 7}) + "\n")
    assert main(["eval", str(tmp_path / "v.jsonl")]) == 2
    err = capsys.readouterr().err
    assert "7" in err and "version 1" in err
    with pytest.raises(UsageError):
        read_records(tmp_path / "bad.jsonl")


def test_chain_crash_flushes_prefix(trained, monkeypatch, tmp_path):
    import langevin_text.cli as cli
    real = cli._run_chain

    def flaky(job):
        if job[0] == 2:
            raise RuntimeError("boom")
        return real(job)

    monkeypatch.setattr(cli, "_run_chain", flaky)
    out = tmp_path / "c.jsonl"
    assert main(["sample", "--config", sample_cfg(trained, constraints=[], lengths=[4]),
                 "--out", str(out)]) == 1
    assert len(read_records(out)) == 2


def test_ablate_memory(trained, capsys):
    cfg = write(trained / "ab.json", {"lm": "lm.ck"})
    assert main(["ablate-memory", "--config", cfg]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert [r["L"] for r in rep["rows"]] == [10, 20, 50, 100, 200, 500, 1000]
    assert rep["max_length"]["simplex"] < rep["max_length"]["embeds"]


def test_verify_commands(trained, tmp_path, capsys):
    assert main(["verify", str(trained / "lm.ck")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ok"] and {c["property"] for c in rep["checks"]} == {"separation", "gradient"}
    assert main(["verify-embeddings", str(trained / "lm.ck")]) == 0
    capsys.readouterr()
    # planted duplicate row
    import numpy as np
    from langevin_text.models import save_checkpoint
    lm = load_checkpoint(trained / "lm.ck")
    lm.table.weight[5] = lm.table.weight[9]
    save_checkpoint(tmp_path / "dup.ck", lm)
    assert main(["verify", "--config", write(tmp_path / "v.json", {"skip_gradcheck": True}),
                 str(tmp_path / "dup.ck")]) == 1
    details = json.loads(capsys.readouterr().out)["checks"][0]["details"]
    assert {5, 9} <= {d["token"] for d in details}
