"""The outer attack loop: seed, encode, optimise, hard-decode, check, repeat."""
from __future__ import annotations

import dataclasses
import json
import math
import random
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import torch

from .attack import (AttackConfig, AttackTarget, LatentProblem, VictimContext,
                     binary_search_constant, optimize)
from .autoenc import AutoencoderParams, encode, make_latent
from .data import ClsExample, QAExample, data_path
from .evaluation import normalize_answer
from .seedgen import (SeedSpec, answer_based_seed, fake_answer, question_to_statement,
                      random_qa_seed, seed_cls)
from .treeio import DepTree, EmbeddingTable
from .victims import best_span, predict_label, predict_span

SCHEMA_VERSION = 1
STRATEGIES = ("question", "answer", "random")


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    text = data_path("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


def _content_words(tokens: Iterable[str], stopwords) -> set[str]:
    out = set()
    for t in tokens:
        w = t.casefold()
        if w in stopwords or all(ch in string.punctuation for ch in w):
            continue
        out.add(w)
    return out


@dataclass(frozen=True)
class FilterResult:
    passed: bool
    overlap: frozenset[str] = frozenset()


def contradiction_filter(adv_tokens: Sequence[str], answer_sentence: Sequence[str],
                         stopwords: Iterable[str] | None = None) -> FilterResult:
    """Pass iff the two token lists share no content word."""
    stop = default_stopwords() if stopwords is None else {s.casefold() for s in stopwords}
    overlap = _content_words(adv_tokens, stop) & _content_words(answer_sentence, stop)
    return FilterResult(not overlap, frozenset(overlap))


def target_class(gold: int, n_classes: int) -> int:
    """Opposite extreme: upper-half classes go to 0, the rest to K - 1."""
    if n_classes < 2 or not 0 <= gold < n_classes:
        raise ValueError(f"label {gold} invalid for {n_classes} classes")
    return 0 if gold >= math.ceil(n_classes / 2) else n_classes - 1


@dataclass
class AttackResult:
    id: str
    task: str
    mode: str
    strategy: str
    adversarial: list[str]
    placement: int                      # token offset of the adversarial sentence
    paragraph: list[str]
    sentence_lengths: list[int]
    outer_iterations: int
    targeted_success: bool
    untargeted_success: bool
    gold: object
    target: object
    before: object
    after: object
    target_mode: str | None = None
    targeted_answer: list[str] | None = None
    adversarial_span: list[int] | None = None   # [t1, t2] in the adversarial paragraph
    question: list[str] | None = None
    answer_sentence: list[str] | None = None
    filter_passed: bool | None = None
    filter_overlap: list[str] | None = None
    norm: float | None = None
    c: float | None = None
    kappa: float | None = None
    failure_reason: str = ""
    error: str | None = None
    warnings: list[str] = field(default_factory=list)
    wall_seconds: float | None = None
    trace: list | None = None

    @property
    def adversarial_paragraph(self) -> list[str]:
        return self.paragraph[:self.placement] + self.adversarial + self.paragraph[self.placement:]

    def to_json(self) -> str:
        d = {"kind": "result", "schema": SCHEMA_VERSION}
        d.update(dataclasses.asdict(self))
        d["adversarial_paragraph"] = self.adversarial_paragraph
        if d["wall_seconds"] is None:
            del d["wall_seconds"]
        if d["trace"] is None:
            del d["trace"]
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str | dict) -> "AttackResult":
        d = json.loads(line) if isinstance(line, str) else dict(line)
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def resolve_placement(placement, sentence_lengths: Sequence[int], task: str) -> int:
    """Token offset for "prepend", "append", "default" or a sentence index."""
    if placement == "default":
        placement = "prepend" if task == "cls" else "append"
    if placement == "prepend":
        return 0
    if placement == "append":
        return sum(sentence_lengths)
    k = int(placement)
    if not 0 <= k <= len(sentence_lengths):
        raise ValueError(f"placement {k} outside a {len(sentence_lengths)}-sentence paragraph")
    return sum(sentence_lengths[:k])


def _with_constants(config: AttackConfig, **kw) -> AttackConfig:
    return dataclasses.replace(config, **kw)


@dataclass
class _Outcome:
    success: bool
    adv_ids: list[int]
    rounds: int
    norm: float
    trace: list
    config: AttackConfig


def _outer_loop(seed: SeedSpec, ae: AutoencoderParams, ctx: VictimContext,
                target: AttackTarget, config: AttackConfig, accept, gate_ids,
                rng: random.Random) -> _Outcome:
    """Up to ``outer_max`` rounds of optimise + hard check.

    ``accept(adv_ids)`` decides success on the hard decode.  Each round starts
    from the previous round's z* unless ``restart_on_filter_fail`` asks for a
    fresh, slightly jittered start after a rejected round.
    """
    with torch.no_grad():
        states = encode(seed.tree, ae)
    code = make_latent(states, seed.tree, config.mode)
    problem = LatentProblem(code, seed.tree, ae, ctx, target, config, gate_ids)
    z, trace, adv_ids = None, [], None
    for r in range(1, config.outer_max + 1):
        z, round_trace = optimize(code, seed.tree, ae, ctx, target, config, z_init=z,
                                  accept=accept, gate_ids=gate_ids)
        if config.save_trace:
            trace.extend(dict(row, round=r) for row in round_trace)
        adv_ids = problem.hard_sentence(z)
        norm = float(torch.linalg.vector_norm(z.reshape(-1), ord=config.p))
        if accept(adv_ids):
            return _Outcome(True, adv_ids, r, norm, trace, config)
        if config.restart_on_filter_fail:
            gen = torch.Generator().manual_seed(rng.randrange(2 ** 31))
            z = 1e-2 * torch.randn(code.payload.shape, generator=gen, dtype=code.payload.dtype)
    return _Outcome(False, adv_ids, config.outer_max, norm, trace, config)


def _search(run: Callable[[AttackConfig], _Outcome], config: AttackConfig) -> _Outcome:
    """Optional bisection over c (smallest success) then kappa (largest success)."""
    if config.c_rounds == 0 and config.kappa_rounds == 0:
        return run(config)
    outcomes: dict = {}

    def attempt(cfg):
        out = run(cfg)
        outcomes[(cfg.c, cfg.kappa)] = out
        return out.success

    best_c = config.c
    if config.c_rounds:
        res = binary_search_constant(lambda c: attempt(_with_constants(config, c=c)),
                                     config.c_low, config.c_high, config.c_rounds, "low")
        if not res.success:
            return outcomes[(res.history[-1][0], config.kappa)]
        best_c = res.value
    base = _with_constants(config, c=best_c)
    if config.kappa_rounds:
        res = binary_search_constant(lambda k: attempt(_with_constants(base, kappa=k)),
                                     0.0, config.kappa_high, config.kappa_rounds, "high")
        if res.success:
            return outcomes[(best_c, res.value)]
    key = (best_c, config.kappa)
    return outcomes[key] if key in outcomes else run(base)


# -- classification ----------------------------------------------------------------

def attack_classification(example: ClsExample, victim, ae: AutoencoderParams,
                          config: AttackConfig = AttackConfig(),
                          rng: random.Random | None = None,
                          n_classes: int | None = None) -> AttackResult:
    t0 = time.perf_counter()
    rng = rng or random.Random(0)
    vocab = victim.vocab
    lengths = [len(s) for s in example.sentences]
    paragraph = example.tokens
    p_ids = vocab.ids(paragraph)
    K = n_classes or victim.n_classes
    t = target_class(example.label, K)
    seed = seed_cls(example.sentences, rng)
    offset = resolve_placement(config.placement, lengths, "cls")
    ctx = VictimContext("cls", victim, p_ids, offset)
    target = AttackTarget("cls", label=t)
    before = predict_label(victim, p_ids)
    flipped: list[list[int]] = []

    def accept(adv_ids):
        pred = int(ctx.hard_logits(adv_ids).argmax())
        if pred != example.label and not flipped:
            flipped.append(list(adv_ids))
        return pred == t

    out = _search(lambda cfg: _outer_loop(seed, ae, ctx, target, cfg, accept, None, rng),
                  config)
    adv_ids = out.adv_ids
    if not out.success and flipped:
        adv_ids = flipped[0]
    after = int(ctx.hard_logits(adv_ids).argmax())
    targeted = after == t
    return AttackResult(
        id=example.id, task="cls", mode=config.mode, strategy=seed.strategy,
        adversarial=vocab.words(adv_ids), placement=offset, paragraph=paragraph,
        sentence_lengths=lengths, outer_iterations=out.rounds,
        targeted_success=targeted, untargeted_success=after != example.label,
        gold=example.label, target=t, before=before, after=after,
        norm=round(out.norm, 6), c=out.config.c, kappa=out.config.kappa,
        failure_reason="" if targeted else "budget exhausted without reaching the target class",
        warnings=list(seed.warnings),
        wall_seconds=round(time.perf_counter() - t0, 3) if config.record_time else None,
        trace=out.trace if config.save_trace else None)


# -- question answering ------------------------------------------------------------

def _span_text(tokens, span):
    return tokens[span[0]:span[1] + 1]


def attack_qa(example: QAExample, victim, ae: AutoencoderParams,
              config: AttackConfig = AttackConfig(), *, table: EmbeddingTable,
              target_mode: str = "position", target_answer: Sequence[str] | None = None,
              strategy: str = "question", rng: random.Random | None = None,
              stopwords: Iterable[str] | None = None) -> AttackResult:
    t0 = time.perf_counter()
    rng = rng or random.Random(0)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown seed strategy {strategy!r}")
    if target_mode == "answer" and not target_answer:
        raise ValueError("answer-targeted attack needs a target answer")
    stop = default_stopwords() if stopwords is None else frozenset(s.casefold() for s in stopwords)
    vocab = victim.vocab
    lengths = [len(s) for s in example.sentences]
    paragraph = example.tokens
    p_ids, q_ids = vocab.ids(paragraph), vocab.ids(example.question_tokens)
    gold_span = example.answer_span
    gold = _span_text(paragraph, gold_span)
    answer_sentence = example.sentences[example.answer_sentence].norms
    before = predict_span(victim, p_ids, q_ids)
    predicted = _span_text(paragraph, before)
    warnings: list[str] = []

    if target_answer is not None:
        fake = [w.lower() for w in target_answer]
    else:
        fake = fake_answer(predicted, table, avoid=gold, warnings=warnings)

    if strategy == "question":
        seed = question_to_statement(example.question.words, fake, example.question)
    elif strategy == "answer":
        # copy the sentence holding the victim's own prediction
        k, start = _locate(example, before)
        seed = answer_based_seed(example.sentences[k], (start, start + len(predicted) - 1),
                                 table, target_answer=fake)
    else:
        seed = random_qa_seed(example.sentences, example.answer_sentence, fake, rng)
    warnings.extend(seed.warnings)
    seed_tree = DepTree.from_lists([w.lower() for w in seed.tokens],
                                   seed.tree.heads, seed.tree.rels)
    seed = dataclasses.replace(seed, tokens=seed_tree.words, tree=seed_tree)

    offset = resolve_placement(config.placement, lengths, "qa")
    a, b = seed.answer_span
    t1, t2 = offset + a, offset + b
    gated = _with_constants(config, g1=0.0, g2=1.0) if target_mode == "answer" else \
        _with_constants(config, g1=1.0, g2=0.0)
    gate_ids = vocab.ids(seed.answer_tokens)
    ctx = VictimContext("qa", victim, p_ids, offset, q_ids)
    target = AttackTarget("qa", mode=target_mode, start=t1, end=t2,
                          answer=tuple(seed.answer_tokens) if target_mode == "answer" else None)
    want = normalize_answer(" ".join(fake))
    gold_norm = normalize_answer(" ".join(gold))
    changed: list[list[int]] = []

    def accept(adv_ids):
        span = best_span(*ctx.hard_logits(adv_ids))
        adv_tokens = vocab.words(adv_ids)
        if not contradiction_filter(adv_tokens, answer_sentence, stop).passed:
            return False
        full = _span_text(vocab.words(ctx.assemble_ids(adv_ids)), span)
        if normalize_answer(" ".join(full)) != gold_norm and not changed:
            changed.append(list(adv_ids))
        if target_mode == "position":
            return span == (t1, t2)
        return normalize_answer(" ".join(full)) == want

    out = _search(lambda cfg: _outer_loop(seed, ae, ctx, target, cfg, accept, gate_ids, rng),
                  gated)
    adv_ids = out.adv_ids if (out.success or not changed) else changed[0]
    adv_tokens = vocab.words(adv_ids)
    after = best_span(*ctx.hard_logits(adv_ids))
    full = vocab.words(ctx.assemble_ids(adv_ids))
    predicted_after = _span_text(full, after)
    filt = contradiction_filter(adv_tokens, answer_sentence, stop)
    if target_mode == "position":
        targeted = after == (t1, t2)
    else:
        targeted = normalize_answer(" ".join(predicted_after)) == want
    targeted = targeted and filt.passed
    untargeted = filt.passed and normalize_answer(" ".join(predicted_after)) != gold_norm
    if targeted:
        reason = ""
    elif not filt.passed:
        reason = "contradiction filter failed: " + ",".join(sorted(filt.overlap))
    else:
        reason = "budget exhausted without moving the answer to the target"
    return AttackResult(
        id=example.id, task="qa", mode=config.mode, strategy=seed.strategy,
        adversarial=adv_tokens, placement=offset, paragraph=paragraph,
        sentence_lengths=lengths, outer_iterations=out.rounds,
        targeted_success=targeted, untargeted_success=untargeted,
        gold=gold, target=[t1, t2],
        before={"span": list(before), "text": predicted},
        after={"span": list(after), "text": predicted_after},
        target_mode=target_mode, targeted_answer=_span_text(adv_tokens, (a, b)),
        adversarial_span=[t1, t2], question=example.question_tokens,
        answer_sentence=answer_sentence, filter_passed=filt.passed,
        filter_overlap=sorted(filt.overlap), norm=round(out.norm, 6),
        c=out.config.c, kappa=out.config.kappa, failure_reason=reason, warnings=warnings,
        wall_seconds=round(time.perf_counter() - t0, 3) if config.record_time else None,
        trace=out.trace if config.save_trace else None)


def _locate(example: QAExample, span) -> tuple[int, int]:
    """Sentence index and in-sentence start of a paragraph span."""
    start = span[0]
    for k, s in enumerate(example.sentences):
        if start < len(s):
            return k, start
        start -= len(s)
    raise ValueError(f"span {span} outside the paragraph")


# -- batch runner --------------------------------------------------------------------

def error_result(example, task: str, config: AttackConfig, exc: BaseException) -> AttackResult:
    lengths = [len(s) for s in example.sentences]
    return AttackResult(
        id=example.id, task=task, mode=config.mode, strategy="", adversarial=[],
        placement=0, paragraph=example.tokens, sentence_lengths=lengths,
        outer_iterations=0, targeted_success=False, untargeted_success=False,
        gold=None, target=None, before=None, after=None,
        failure_reason=f"error: {type(exc).__name__}: {exc}", error=repr(exc))


def run_attacks(examples: Sequence, attack_one: Callable, task: str, config: AttackConfig,
                workers: int = 1, sink: Callable[[AttackResult], None] | None = None):
    """Attack every example; results reach ``sink`` in input order.

    Exceptions inside one example become error rows instead of stopping the run.
    """
    def job(ex):
        try:
            return attack_one(ex)
        except Exception as exc:   # recorded, the run continues
            return error_result(ex, task, config, exc)

    results = []

    def collect(stream):
        for res in stream:
            results.append(res)
            if sink:
                sink(res)

    if workers <= 1:
        collect(map(job, examples))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            collect(pool.map(job, examples))
    return results
