import json

import pytest

import treeperturb.cli as cli
from treeperturb.autoenc import load_autoencoder
from treeperturb.data import data_path
from treeperturb.evaluation import normalize_answer
from treeperturb.treeio import read_conllu, serialize_conllu

FAST = ["--steps", "3", "--outer-max", "1"]


def rows(path):
    lines = [json.loads(s) for s in path.read_text().splitlines()]
    assert lines[0]["kind"] == "header"
    return lines[1:]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cls_results(tmp_path_factory):
    out = tmp_path_factory.mktemp("cls") / "r.jsonl"
    assert run("attack", "--task", "cls", "--limit", 5, "--out", out, *FAST) == 0
    return out


def test_attack_writes_one_line_per_example(cls_results):
    header = json.loads(cls_results.read_text().splitlines()[0])
    assert header["command"] == "attack" and header["seed"] == 0
    assert set(header["inputs"]) >= {"autoencoder", "input", "victim"}
    assert all(len(v["sha256"]) == 64 for v in header["inputs"].values())
    got = rows(cls_results)
    assert len(got) == 5 and all(r["kind"] == "result" for r in got)
    assert "wall_seconds" not in got[0]


def test_missing_corpus_fails_before_training(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise AssertionError("training started")
    monkeypatch.setattr(cli, "train_autoencoder", boom)
    assert run("pretrain", "--corpus", tmp_path / "nope.conllu", "--out", tmp_path / "a.npz") == 2
    assert "nope.conllu" in capsys.readouterr().err


def test_pretrain_is_deterministic_and_feeds_attack(tmp_path, capsys):
    corpus = tmp_path / "small.conllu"
    corpus.write_text(serialize_conllu(read_conllu(data_path("corpus.conllu"))[:24]))
    finals = []
    for k in range(2):
        out = tmp_path / f"ae{k}.npz"
        assert run("pretrain", "--corpus", corpus, "--out", out, "--hidden", 16, "--word-dim", 8,
                   "--rel-dim", 4, "--epochs", 2) == 0
        finals.append(capsys.readouterr().out.split()[2])
    assert finals[0] == finals[1]
    assert load_autoencoder(tmp_path / "ae0.npz").hidden == 16
    res = tmp_path / "r.jsonl"
    assert run("attack", "--autoencoder", tmp_path / "ae0.npz", "--limit", 1, "--out", res,
               *FAST) == 0
    assert len(rows(res)) == 1 and rows(res)[0]["error"] is None


def test_targeted_answer_attack(tmp_path):
    out = tmp_path / "qa.jsonl"
    code = run("attack", "--task", "qa", "--target-answer", "Donald Trump", "--limit", 4,
               "--out", out, "--steps", 10, "--outer-max", 2)
    assert code == 0
    for r in rows(out):
        assert r["target_mode"] == "answer" and r["targeted_answer"] == ["donald", "trump"]
        if r["targeted_success"]:
            assert normalize_answer(" ".join(r["after"]["text"])) == "donald trump"


def test_resume_does_not_duplicate(tmp_path, cls_results):
    out = tmp_path / "r.jsonl"
    lines = cls_results.read_text().splitlines(keepends=True)
    out.write_text("".join(lines[:3]) + lines[3][:25])   # header, two rows, a torn row
    assert run("attack", "--task", "cls", "--limit", 5, "--out", out, "--resume", "true",
               *FAST) == 0
    ids = [r["id"] for r in rows(out)]
    assert len(ids) == len(set(ids)) == 5
    # resumed rows are the ones a fresh run would have written
    assert out.read_text() == cls_results.read_text()


def test_eval_reports(tmp_path, cls_results):
    out = tmp_path / "rep.json"
    assert run("eval", "--results", cls_results, "--out", out) == 0
    body = json.loads(out.read_text())
    assert body["reports"]["whitebox"]["n"] == 5
    assert out.with_suffix(".txt").read_text().startswith("row")


def test_eval_of_empty_results_fails(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text('{"kind": "header"}\n')
    assert run("eval", "--results", empty, "--out", tmp_path / "x.json") == 3
    assert "no results" in capsys.readouterr().err


def test_transfer_to_the_same_victim(tmp_path, cls_results):
    out = tmp_path / "t.json"
    victim = data_path("victim_cls_attention.npz")
    assert run("transfer", "--results", cls_results, "--victim", victim, "--out", out) == 0
    reps = json.loads(out.read_text())["reports"]
    white, trans = reps["whitebox"], reps["transfer"]
    white.pop("model"), trans.pop("model")
    assert white == trans


def test_ablate_writes_three_positions(tmp_path, cls_results):
    out = tmp_path / "a.json"
    victim = data_path("victim_cls_attention.npz")
    assert run("ablate", "--results", cls_results, "--victim", victim, "--out", out) == 0
    body = json.loads(out.read_text())
    assert set(body["reports"]) == {"front", "mid", "back"}
    assert body["best_position"] in body["reports"]
    table = out.with_suffix(".txt").read_text().splitlines()
    assert [line.split()[0] for line in table[2:]] == ["front", "mid", "back"]


def test_option_layers(tmp_path, monkeypatch):
    ini = tmp_path / "run.ini"
    ini.write_text("[global]\nseed = 7\n[attack]\nsteps = 4\nc = 3.5\n")
    args = cli.build_parser().parse_args(["--config", str(ini), "attack", "--c", "2"])
    opts = cli.resolve_options(args)
    assert (opts["steps"], opts["c"], opts["seed"], opts["kappa"]) == (4, 2.0, 7, 1.0)
    monkeypatch.setenv(cli.SEED_ENV, "11")
    assert cli.resolve_options(cli.build_parser().parse_args(["attack"]))["seed"] == 11
    args = cli.build_parser().parse_args(["--seed", "3", "--config", str(ini), "attack"])
    assert cli.resolve_options(args)["seed"] == 3


def test_config_errors(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[attack]\nbogus = 1\n")
    assert run("--config", ini, "attack") == 2
    assert run("attack", "--kappa", "-1", "--out", tmp_path / "x") == 2
    assert run("attack", "--task", "tables", "--out", tmp_path / "x") == 2
    assert run("transfer", "--results", tmp_path / "x") == 2


def test_mismatched_victim_is_a_config_error(tmp_path):
    qa_victim = data_path("victim_qa_recurrent.npz")
    assert run("attack", "--task", "cls", "--victim", qa_victim, "--out", tmp_path / "x") == 2


def test_corrupt_results_are_a_data_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run("eval", "--results", bad, "--out", tmp_path / "x.json") == 3
