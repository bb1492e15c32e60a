"""Command-line interface.

Every command reads its options from three layers: built-in defaults, the
``[command]`` section of an INI file given with ``--config``, then explicit
flags.  Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import random
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import __version__
from .attack import AttackConfig
from .autoenc import TrainConfig, load_autoencoder, save_autoencoder, train_autoencoder
from .checkpoint import atomic_write_text
from .data import (bundled_embeddings, data_path, encode_cls, encode_qa, load_cls, load_qa)
from .evaluation import (best_position, format_table, position_ablation, score_results,
                         transfer_eval)
from .pipeline import SCHEMA_VERSION, AttackResult, attack_classification, attack_qa, run_attacks
from .treeio import TreeError, Vocab, load_embeddings, read_conllu
from .victims import VictimConfig, VictimTrainingError, load_victim, save_victim, train_victims

log = logging.getLogger("treeperturb")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
SEED_ENV = "TREEPERTURB_SEED"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _placement(s):
    return s if s in ("default", "prepend", "append") else int(s)


def _bundled(name):
    return str(data_path(name))


# (name, type, default, help)
_ATTACK_CONSTANTS = [
    ("c", float, 10.0, "weight of the attack term"),
    ("kappa", float, 1.0, "confidence margin"),
    ("p", int, 2, "norm order of the perturbation"),
    ("lr", float, 0.6, "inner learning rate"),
    ("steps", int, 100, "inner Adam steps per round"),
    ("outer_max", int, 10, "maximum outer rounds"),
    ("tau_start", float, 1.0, "initial softmax temperature"),
    ("tau_end", float, 0.01, "final softmax temperature"),
    ("placement", _placement, "default", "prepend | append | sentence index | default"),
    ("c_low", float, 0.1, "lower end of the c search"),
    ("c_high", float, 100.0, "upper end of the c search"),
    ("c_rounds", int, 0, "bisection rounds over c (0 keeps c fixed)"),
    ("kappa_rounds", int, 0, "bisection rounds over kappa"),
    ("kappa_high", float, 5.0, "upper end of the kappa search"),
    ("restart_on_filter_fail", _bool, False, "restart from the seed after a filtered round"),
]

OPTIONS = {
    "pretrain": [
        ("corpus", str, _bundled("pretrain.conllu"), "CoNLL-U training corpus"),
        ("embeddings", str, _bundled("embeddings.txt"), "word vectors whose words join the vocabulary"),
        ("embedding_dim", int, 50, "dimension of the word vectors"),
        ("out", str, "autoencoder.npz", "output checkpoint"),
        ("hidden", int, 128, "hidden size"),
        ("word_dim", int, 64, "word embedding size"),
        ("rel_dim", int, 32, "relation embedding size"),
        ("epochs", int, 12, "training epochs"),
        ("batch_size", int, 16, "sentences per batch"),
        ("lr", float, 1e-2, "Adam learning rate"),
    ],
    "train-victims": [
        ("autoencoder", str, _bundled("autoencoder.npz"), "checkpoint providing the shared vocabulary"),
        ("task", str, "all", "cls | qa | all"),
        ("cls_families", str, "attention,recurrent", "comma-separated sentiment families"),
        ("qa_families", str, "recurrent,conv", "comma-separated QA families"),
        ("cls_train", str, _bundled("reviews_train.jsonl"), "sentiment training records"),
        ("cls_heldout", str, _bundled("reviews_test.jsonl"), "sentiment held-out records"),
        ("qa_train", str, _bundled("qa_train.jsonl"), "QA training records"),
        ("qa_heldout", str, _bundled("qa_test.jsonl"), "QA held-out records"),
        ("embeddings", str, _bundled("embeddings.txt"), "initial word vectors"),
        ("embedding_dim", int, 50, "dimension of the word vectors"),
        ("out_dir", str, "victims", "output directory"),
        ("epochs", int, 8, "training epochs"),
        ("lr", float, 5e-3, "Adam learning rate"),
        ("freeze_embeddings", _bool, False, "keep the initial word vectors fixed"),
        ("cls_floor", float, 0.85, "minimum held-out sentiment accuracy"),
        ("qa_floor", float, 60.0, "minimum held-out QA exact match"),
    ],
    "attack": [
        ("task", str, "cls", "cls | qa"),
        ("mode", str, "word", "word | sent latent code"),
        ("target_mode", str, "position", "QA target: position | answer"),
        ("target_answer", str, None, "fixed answer for answer-targeted QA attacks"),
        ("strategy", str, "question", "QA seed: question | answer | random"),
        ("input", str, None, "JSONL examples (defaults to the bundled attack split)"),
        ("limit", int, 0, "attack only the first N examples (0 = all)"),
        ("autoencoder", str, _bundled("autoencoder.npz"), "autoencoder checkpoint"),
        ("victim", str, None, "victim checkpoint (defaults to the bundled one for the task)"),
        ("embeddings", str, _bundled("embeddings.txt"), "word vectors for fake answers"),
        ("embedding_dim", int, 50, "dimension of the word vectors"),
        ("out", str, "results.jsonl", "results file"),
        ("workers", int, 1, "parallel workers"),
        ("resume", _bool, False, "skip examples already in the results file"),
        ("save_trace", _bool, False, "store per-step traces"),
        ("record_time", _bool, False, "store wall-clock seconds (breaks byte-identical reruns)"),
    ] + _ATTACK_CONSTANTS,
    "eval": [
        ("results", str, "results.jsonl", "results file"),
        ("out", str, "report.json", "report file (a .txt table is written beside it)"),
        ("model", str, "", "label for the model in the report"),
    ],
    "transfer": [
        ("results", str, "results.jsonl", "results from the whitebox model"),
        ("victim", str, None, "blackbox model checkpoint"),
        ("out", str, "transfer.json", "report file"),
    ],
    "ablate": [
        ("results", str, "results.jsonl", "results file"),
        ("victim", str, None, "model to re-score with"),
        ("out", str, "ablation.json", "report file"),
    ],
}

# options naming files that must exist before the command starts
INPUT_PATHS = {"corpus", "embeddings", "autoencoder", "cls_train", "cls_heldout", "qa_train",
               "qa_heldout", "input", "victim", "results"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treeperturb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="INI file with one section per command")
    parser.add_argument("--seed", type=int, help=f"global RNG seed (fallback: ${SEED_ENV}, then 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        for name, typ, default, help_ in opts:
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                           help=f"{help_} (default: {default})")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults, then the INI section, then explicit flags."""
    known = {name: (typ, default) for name, typ, default, _ in OPTIONS[args.command]}
    opts = {name: default for name, (_, default) in known.items()}
    ini_seed = None
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cp = configparser.ConfigParser()
        try:
            cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {args.config}: {exc}") from exc
        if cp.has_option("global", "seed"):
            ini_seed = cp.get("global", "seed")
        if cp.has_section(args.command):
            for key, raw in cp.items(args.command):
                name = key.replace("-", "_")
                if name not in known:
                    raise ConfigError(f"unknown key {key!r} in [{args.command}]")
                try:
                    opts[name] = known[name][0](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from exc
    for name in known:
        value = getattr(args, name)
        if value is not None:
            opts[name] = value
    seed = args.seed
    if seed is None and ini_seed is not None:
        seed = ini_seed
    if seed is None:
        seed = os.environ.get(SEED_ENV, 0)
    try:
        opts["seed"] = int(seed)
    except ValueError as exc:
        raise ConfigError(f"seed must be an integer, got {seed!r}") from exc
    return opts


def check_paths(opts: dict) -> None:
    missing = [f"{k}={opts[k]}" for k in sorted(INPUT_PATHS & opts.keys())
               if opts[k] is not None and not Path(opts[k]).exists()]
    if missing:
        raise ConfigError("missing input files: " + ", ".join(missing))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def provenance(command: str, opts: dict) -> dict:
    inputs = {k: opts[k] for k in sorted(INPUT_PATHS & opts.keys()) if opts[k] is not None}
    return {"command": command, "version": __version__, "seed": opts["seed"],
            "config": {k: v for k, v in sorted(opts.items()) if k not in ("out", "resume")},
            "inputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in inputs.items()}}


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)


def _embeddings(opts):
    if Path(opts["embeddings"]) == Path(_bundled("embeddings.txt")):
        return bundled_embeddings()
    return load_embeddings(opts["embeddings"], opts["embedding_dim"])


# -- commands ---------------------------------------------------------------------

def cmd_pretrain(opts: dict) -> int:
    corpus = read_conllu(opts["corpus"])
    if not corpus:
        raise DataError(f"no sentences in {opts['corpus']}")
    table = _embeddings(opts)
    vocab = Vocab.build(list(table.words) + [w for t in corpus for w in t.words])
    cfg = TrainConfig(hidden=opts["hidden"], word_dim=opts["word_dim"], rel_dim=opts["rel_dim"],
                      epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"],
                      seed=opts["seed"])
    ae = train_autoencoder(corpus, cfg, vocab)
    save_autoencoder(ae, opts["out"])
    record = dict(provenance("pretrain", opts), history=ae.history)
    atomic_write_text(str(opts["out"]) + ".log.json", json.dumps(record, indent=2, sort_keys=True))
    print(f"final loss {ae.history[-1]['loss']:.6f}; wrote {opts['out']}")
    return EXIT_OK


def cmd_train_victims(opts: dict) -> int:
    vocab = load_autoencoder(opts["autoencoder"]).vocab
    tasks = ["cls", "qa"] if opts["task"] == "all" else [opts["task"]]
    if any(t not in ("cls", "qa") for t in tasks):
        raise ConfigError(f"unknown task {opts['task']!r}")
    datasets, families = {}, {}
    if "cls" in tasks:
        datasets["cls"] = (encode_cls(load_cls(opts["cls_train"]), vocab),
                           encode_cls(load_cls(opts["cls_heldout"]), vocab))
        families["cls"] = [f for f in opts["cls_families"].split(",") if f]
    if "qa" in tasks:
        datasets["qa"] = (encode_qa(load_qa(opts["qa_train"]), vocab),
                          encode_qa(load_qa(opts["qa_heldout"]), vocab))
        families["qa"] = [f for f in opts["qa_families"].split(",") if f]
    cfg = VictimConfig(epochs=opts["epochs"], lr=opts["lr"], seed=opts["seed"],
                       cls_floor=opts["cls_floor"], qa_floor=opts["qa_floor"],
                       freeze_embeddings=opts["freeze_embeddings"])
    models = train_victims(datasets, vocab, cfg, families, _embeddings(opts))
    out = Path(opts["out_dir"])
    for (task, fam), model in sorted(models.items()):
        path = out / f"victim_{task}_{fam}.npz"
        save_victim(model, path)
        print(f"{task}/{fam}: held-out {model.clean_score:.3f} -> {path}")
    return EXIT_OK


def _attack_config(opts: dict) -> AttackConfig:
    names = {f.name for f in fields(AttackConfig)}
    try:
        return AttackConfig(**{k: v for k, v in opts.items() if k in names})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _existing_ids(path: Path) -> set[str]:
    """Ids already present in a results file; a torn final line is dropped."""
    text = path.read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        text = text[:text.rfind("\n") + 1]
        path.write_text(text, encoding="utf-8")
    ids = set()
    for line in text.splitlines():
        row = json.loads(line)
        if row.get("kind") == "result":
            ids.add(row["id"])
    return ids


def cmd_attack(opts: dict) -> int:
    task = opts["task"]
    if task not in ("cls", "qa"):
        raise ConfigError(f"unknown task {task!r}")
    if opts["target_mode"] not in ("position", "answer"):
        raise ConfigError(f"unknown target mode {opts['target_mode']!r}")
    if task == "qa" and opts["target_mode"] == "answer" and not opts["target_answer"]:
        raise ConfigError("answer-targeted attacks need --target-answer")
    if opts["target_answer"] and task == "qa":
        opts["target_mode"] = "answer"
    config = _attack_config(opts)
    if opts["input"] is None:
        opts["input"] = _bundled("reviews_attack.jsonl" if task == "cls" else "qa_attack.jsonl")
    if opts["victim"] is None:
        opts["victim"] = _bundled("victim_cls_attention.npz" if task == "cls"
                                  else "victim_qa_recurrent.npz")
    check_paths(opts)
    examples = load_cls(opts["input"]) if task == "cls" else load_qa(opts["input"])
    if opts["limit"]:
        examples = examples[:opts["limit"]]
    ae = load_autoencoder(opts["autoencoder"])
    victim = load_victim(opts["victim"])
    if victim.task != task:
        raise ConfigError(f"victim {opts['victim']} is a {victim.task} model, not {task}")
    table = _embeddings(opts) if task == "qa" else None
    answer = opts["target_answer"].split() if opts["target_answer"] else None
    seed = opts["seed"]
    _seed_everything(seed)

    def attack_one(ex):
        rng = random.Random(f"{seed}:{ex.id}")
        if task == "cls":
            return attack_classification(ex, victim, ae, config, rng)
        return attack_qa(ex, victim, ae, config, table=table, target_mode=opts["target_mode"],
                         target_answer=answer, strategy=opts["strategy"], rng=rng)

    out = Path(opts["out"])
    header = dict(provenance("attack", opts), kind="header", schema=SCHEMA_VERSION)
    done: set[str] = set()
    if opts["resume"] and out.exists() and out.stat().st_size:
        done = _existing_ids(out)
        mode = "a"
    else:
        mode = "w"
    todo = [ex for ex in examples if ex.id not in done]
    errors = 0
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            fh.flush()

        def sink(res: AttackResult):
            nonlocal errors
            errors += res.error is not None
            fh.write(res.to_json() + "\n")
            fh.flush()
            log.info("%s targeted=%s untargeted=%s", res.id, res.targeted_success,
                     res.untargeted_success)

        results = run_attacks(todo, attack_one, task, config, opts["workers"], sink)
    n_t = sum(r.targeted_success for r in results)
    print(f"attacked {len(results)} examples ({len(done)} resumed): {n_t} targeted successes, "
          f"{errors} errors; wrote {out}")
    return EXIT_RUNTIME if errors else EXIT_OK


def load_results(path) -> list[AttackResult]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
            if row.get("kind") == "result":
                rows.append(AttackResult.from_json(row))
    if not rows:
        raise DataError(f"no results in {path}")
    return rows


def _write_report(opts: dict, command: str, reports: dict, extra: dict | None = None) -> None:
    body = dict(provenance(command, opts), reports={k: json.loads(r.to_json())
                                                    for k, r in reports.items()})
    if extra:
        body.update(extra)
    out = Path(opts["out"])
    table = format_table(reports)
    atomic_write_text(out, json.dumps(body, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out.with_suffix(".txt"), table)
    print(table, end="")


def cmd_eval(opts: dict) -> int:
    check_paths(opts)
    results = load_results(opts["results"])
    _write_report(opts, "eval", {"whitebox": score_results(results, opts["model"])})
    return EXIT_OK


def _need_victim(opts):
    if opts["victim"] is None:
        raise ConfigError("--victim is required")


def cmd_transfer(opts: dict) -> int:
    _need_victim(opts)
    check_paths(opts)
    results = load_results(opts["results"])
    model_b = load_victim(opts["victim"])
    reports = {"whitebox": score_results(results, "whitebox"),
               "transfer": transfer_eval(results, model_b, Path(opts["victim"]).stem)}
    _write_report(opts, "transfer", reports)
    return EXIT_OK


def cmd_ablate(opts: dict) -> int:
    _need_victim(opts)
    check_paths(opts)
    results = load_results(opts["results"])
    model = load_victim(opts["victim"])
    reports = position_ablation(results, model, Path(opts["victim"]).stem)
    best = best_position(reports)
    _write_report(opts, "ablate", reports, {"best_position": best})
    print(f"best position: {best}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "train-victims": cmd_train_victims, "attack": cmd_attack,
            "eval": cmd_eval, "transfer": cmd_transfer, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(args)
        check_paths(opts)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TreeError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (VictimTrainingError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
