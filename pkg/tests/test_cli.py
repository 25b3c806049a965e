import json

import pytest

from ptsg import model
from ptsg.cli import ROBUSTNESS_ROWS, build_parser, main
from ptsg.dataio import load_corpus, load_pseudo_labels
from ptsg.evalkit import load_records
from ptsg.losses import ABLATIONS

TINY = {"epochs": 2, "explicit_epochs": 2, "batch_size": 8, "clusters_per_batch": 2, "dim": 8,
        "hidden": 16, "bins": 8}
GEN = ["--samples", "24", "--frames", "24", "--event-min", "4", "--event-max", "12", "--seed", "3"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", *GEN, "--holdout", "6", "--out", str(d / "c")]) == 0
    assert main(["label", "--corpus", str(d / "c" / "train"), "--out", str(d / "lab")]) == 0
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


def _subparsers(parser):
    for action in parser._actions:
        if hasattr(action, "choices") and isinstance(action.choices, dict):
            return action.choices
    raise AssertionError


def test_help_documents_every_flag(capsys):
    subs = _subparsers(build_parser())
    assert set(subs) == {"gen", "label", "train-implicit", "export-pseudo", "train-explicit", "infer",
                         "run-two-stage", "eval", "ablate", "robustness"}
    for name, sub in subs.items():
        assert main([name, "--help"]) == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            assert action.help, (name, action.option_strings)


def test_usage_errors_exit_2(work, capsys):
    assert main(["gen", "--samples", "5"]) == 2
    assert main(["label", "--corpus", str(work / "c" / "train"), "--out", str(work / "x"),
                 "--dist", "triangular"]) == 2
    assert "uniform" in capsys.readouterr().err
    assert main(["export-pseudo", "--corpus", str(work / "lab"), "--out", str(work / "p.txt")]) == 2
    assert main(["train-implicit", "--corpus", str(work / "lab"), "--out", "x", "--flags", "raml,foo"]) == 2
    assert main(["eval", "--pred", "a", "--gt", "b", "--thresholds", "0.3,1.5"]) == 2
    assert main(["nonsense"]) == 2


def test_data_errors_exit_1(work, capsys):
    assert main(["label", "--corpus", str(work / "missing"), "--out", str(work / "x")]) == 1
    assert main(["train-implicit", "--corpus", str(work / "c" / "train"), "--out", str(work / "i.ckpt"),
                 "--config", str(work / "cfg.json")]) == 1  # unlabelled corpus
    capsys.readouterr()
    assert main(["train-implicit", "--corpus", str(work / "lab"), "--out", str(work / "i.ckpt"),
                 "--config", str(work / "cfg.json"), "--flags", "raml", "--epochs", "0"]) == 1


def test_gen_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", *GEN, "--out", str(tmp_path / d)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_label_clip_inside_gt(work):
    out = work / "lab2"
    assert main(["label", "--corpus", str(work / "c" / "train"), "--out", str(out),
                 "--dist", "gaussian", "--dur", "2"]) == 0
    for s in load_corpus(out):
        assert s.label.range == pytest.approx(min(2 * s.fps, s.gt.end - s.gt.start))
        assert s.gt.start <= s.label.start <= s.label.end <= s.gt.end
    assert all(s.label.range == 0 for s in load_corpus(work / "lab"))


def test_pipeline_and_flags(work, capsys):
    ck = work / "imp.ckpt"
    assert main(["train-implicit", "--corpus", str(work / "lab"), "--out", str(ck), "--config",
                 str(work / "cfg.json"), "--flags", "raml", "--log", str(work / "imp.jsonl")]) == 0
    _, meta = model.load_checkpoint(ck)
    assert tuple(meta["config"]["losses"]) == ABLATIONS["A1"]
    assert len((work / "imp.jsonl").read_text().splitlines()) == TINY["epochs"]
    assert main(["export-pseudo", "--corpus", str(work / "lab"), "--ckpt", str(ck),
                 "--out", str(work / "pseudo.txt")]) == 0
    assert main(["train-explicit", "--corpus", str(work / "lab"), "--pseudo", str(work / "pseudo.txt"),
                 "--config", str(work / "cfg.json"), "--out", str(work / "exp.ckpt")]) == 0
    assert main(["infer", "--corpus", str(work / "c" / "test"), "--ckpt", str(work / "exp.ckpt"),
                 "--out", str(work / "pred.txt")]) == 0
    assert len(load_pseudo_labels(work / "pred.txt")) == 6
    capsys.readouterr()
    assert main(["eval", "--pred", str(work / "pred.txt"), "--gt", str(work / "c" / "test")]) == 0
    head = capsys.readouterr().out.splitlines()[0].split()
    assert head == ["R@0.3", "R@0.5", "R@0.7", "mIoU"]
    # wrong kind of checkpoint is a data error
    assert main(["infer", "--corpus", str(work / "c" / "test"), "--ckpt", str(ck),
                 "--out", str(work / "x.txt")]) == 1


def test_eval_id_mismatch(work, capsys):
    assert main(["eval", "--pred", str(work / "pseudo.txt"), "--gt", str(work / "c" / "test")]) == 1
    first = load_pseudo_labels(work / "pseudo.txt")[0][0]
    assert first in capsys.readouterr().err


def test_run_two_stage_records(work, capsys):
    args = ["run-two-stage", "--train", str(work / "c" / "train"), "--test", str(work / "c" / "test"),
            "--config", str(work / "cfg.json"), "--format", "records"]
    assert main([*args, "--out", str(work / "r1")]) == 0
    assert capsys.readouterr().out.startswith("cu-eval/1\n")
    assert main([*args, "--out", str(work / "r2")]) == 0
    for f in ("pseudo.txt", "implicit.ckpt", "explicit.ckpt", "eval.txt", "predictions.txt"):
        assert (work / "r1" / f).read_bytes() == (work / "r2" / f).read_bytes()


def test_ablate_grid_and_resume(work, capsys, monkeypatch):
    out = work / "abl"
    args = ["ablate", "--corpus", str(work / "c" / "train"), "--out", str(out), "--seeds", "1",
            "--config", str(work / "cfg.json")]
    assert main(args) == 0
    table = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in table[1:]] == sorted(ABLATIONS)
    cells = sorted((out / "cells").iterdir())
    assert len(cells) == 6
    stamps = {c: (c / "eval.txt").stat().st_mtime_ns for c in cells}
    monkeypatch.setenv("CU_THREADS", "2")
    assert main(args) == 0
    assert {c: (c / "eval.txt").stat().st_mtime_ns for c in cells} == stamps
    assert [r.tag for r in load_records(out / "summary.txt")] == sorted(ABLATIONS)
    monkeypatch.setenv("CU_THREADS", "many")
    assert main(args) == 1


def test_robustness_rows(work, capsys):
    out = work / "rob"
    assert main(["robustness", "--corpus", str(work / "c" / "train"), "--out", str(out), "--seeds", "1",
                 "--config", str(work / "cfg.json")]) == 0
    rows = [ln.split()[0] for ln in capsys.readouterr().out.splitlines()[1:]]
    assert rows == [r[0] for r in ROBUSTNESS_ROWS]
    assert len(rows) == 7
