"""Scoring attack results: success rates, SQuAD EM/F1, transfer and placement ablation."""
from __future__ import annotations

import dataclasses
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .victims import best_span, cls_logits_ids, qa_logits_ids

POSITIONS = ("front", "mid", "back")
_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _golds(golds) -> list[str]:
    return [golds] if isinstance(golds, str) else list(golds)


def squad_em(prediction: str, golds) -> int:
    p = normalize_answer(prediction)
    return int(any(p == normalize_answer(g) for g in _golds(golds)))


def _f1(prediction: str, gold: str) -> float:
    p, g = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def squad_f1(prediction: str, golds) -> float:
    return max((_f1(prediction, g) for g in _golds(golds)), default=0.0)


def success_rates(results: Sequence) -> tuple[float, float]:
    """(targeted, untargeted) over every attempted example; errors count as failures."""
    if not results:
        raise ValueError("no results to score")
    n = len(results)
    return (sum(bool(r.targeted_success) for r in results) / n,
            sum(bool(r.untargeted_success) for r in results) / n)


@dataclass
class ScoreReport:
    task: str
    model: str
    n: int
    errors: int
    targeted_rate: float
    untargeted_rate: float
    em: float | None = None
    f1: float | None = None
    targeted_em: float | None = None
    targeted_f1: float | None = None
    unk_tokens: int = 0
    positions: dict | None = None
    notes: list[str] = field(default_factory=list)

    def metrics(self) -> dict:
        """Everything except the model label, for comparing two reports."""
        d = dataclasses.asdict(self)
        d.pop("model")
        return d

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def _text(tokens) -> str:
    return " ".join(tokens or [])


def score_results(results: Sequence, model: str = "") -> ScoreReport:
    targeted, untargeted = success_rates(results)
    task = results[0].task
    report = ScoreReport(task, model, len(results), sum(r.error is not None for r in results),
                         targeted, untargeted)
    if task == "qa":
        # EM/F1 are averaged in percent, as the SQuAD script reports them
        ems, f1s, tems, tf1s = [], [], [], []
        for r in results:
            pred = _text(r.after["text"]) if r.after else ""
            gold = _text(r.gold)
            fake = _text(r.targeted_answer)
            ems.append(squad_em(pred, gold))
            f1s.append(squad_f1(pred, gold))
            tems.append(squad_em(pred, fake) if fake else 0)
            tf1s.append(squad_f1(pred, fake) if fake else 0.0)
        n = len(results)
        report.em, report.f1 = 100 * sum(ems) / n, 100 * sum(f1s) / n
        report.targeted_em, report.targeted_f1 = 100 * sum(tems) / n, 100 * sum(tf1s) / n
    return report


# -- re-scoring stored adversarial text -----------------------------------------

def _ids(vocab, tokens) -> tuple[list[int], int]:
    ids = vocab.ids(tokens)
    unk = sum(1 for t, i in zip(tokens, ids) if i == vocab.id("<unk>") and t != "<unk>")
    return ids, unk


def rescore(results: Sequence, model, offset_of=None) -> tuple[list, int]:
    """Re-judge stored adversarial paragraphs under ``model``.

    ``offset_of(result)`` may move the adversarial sentence to another token
    offset.  Stored results are not modified; new records are returned along
    with the number of tokens that fell outside the model's vocabulary.
    """
    out, unk_total = [], 0
    vocab = model.vocab
    for r in results:
        if r.error is not None:
            out.append(dataclasses.replace(r))
            continue
        offset = r.placement if offset_of is None else offset_of(r)
        tokens = r.paragraph[:offset] + r.adversarial + r.paragraph[offset:]
        ids, unk = _ids(vocab, tokens)
        unk_total += unk
        if r.task == "cls":
            after = int(cls_logits_ids(model, ids).argmax())
            out.append(dataclasses.replace(
                r, placement=offset, after=after, targeted_success=after == r.target,
                untargeted_success=after != r.gold))
            continue
        q_ids, q_unk = _ids(vocab, r.question)
        unk_total += q_unk
        span = best_span(*qa_logits_ids(model, ids, q_ids))
        pred = tokens[span[0]:span[1] + 1]
        shift = offset - r.placement
        t1, t2 = (p + shift for p in r.adversarial_span)
        if r.target_mode == "answer":
            hit = normalize_answer(_text(pred)) == normalize_answer(_text(r.targeted_answer))
        else:
            hit = span == (t1, t2)
        moved = normalize_answer(_text(pred)) != normalize_answer(_text(r.gold))
        out.append(dataclasses.replace(
            r, placement=offset, adversarial_span=[t1, t2],
            target=[t1, t2], after={"span": list(span), "text": pred},
            targeted_success=bool(hit and r.filter_passed),
            untargeted_success=bool(moved and r.filter_passed)))
    return out, unk_total


def transfer_eval(results: Sequence, model_b, model: str = "") -> ScoreReport:
    """Score whitebox adversarial text against another model without re-optimising."""
    if not results:
        raise ValueError("no results to score")
    rescored, unk = rescore(results, model_b)
    report = score_results(rescored, model)
    report.unk_tokens = unk
    if unk:
        report.notes.append(f"{unk} tokens mapped to <unk> under {model or 'model B'}")
    return report


def insertion_offset(result, position: str) -> tuple[int, bool]:
    """Token offset for front / mid (after ceil(n/2) sentences) / back, and
    whether the position collapsed because the paragraph has one sentence."""
    lengths = result.sentence_lengths
    if position == "front":
        return 0, False
    if position == "back":
        return sum(lengths), False
    if position != "mid":
        raise ValueError(f"unknown position {position!r}")
    if len(lengths) <= 1:
        return 0, True
    return sum(lengths[:math.ceil(len(lengths) / 2)]), False


def position_ablation(results: Sequence, model, model_name: str = "",
                      positions: Iterable[str] = POSITIONS) -> dict[str, ScoreReport]:
    if not results:
        raise ValueError("no results to score")
    reports = {}
    for pos in positions:
        collapsed = sum(insertion_offset(r, pos)[1] for r in results)
        rescored, unk = rescore(results, model, lambda r, p=pos: insertion_offset(r, p)[0])
        rep = score_results(rescored, model_name)
        rep.unk_tokens = unk
        if collapsed:
            rep.notes.append(f"{collapsed} single-sentence paragraphs: mid collapsed to front")
        reports[pos] = rep
    return reports


def best_position(reports: dict[str, ScoreReport]) -> str:
    return max(reports, key=lambda p: (reports[p].targeted_rate, reports[p].untargeted_rate))


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def format_table(reports: dict[str, ScoreReport]) -> str:
    """Plain-text table, one row per report."""
    cols = ["n", "errors", "targeted_rate", "untargeted_rate", "em", "f1",
            "targeted_em", "targeted_f1", "unk_tokens"]
    rows = [["row", "model"] + cols]
    for name, rep in reports.items():
        d = dataclasses.asdict(rep)
        rows.append([name, rep.model or "-"] + [_fmt(d[c]) for c in cols])
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
