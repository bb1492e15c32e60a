import json
import random

import pytest
import torch

from toys import BagVictim, ConstantVictim, TailQAVictim, keyword_scores, substitution_oracle
from treeperturb.attack import AttackConfig
from treeperturb.autoenc import DTYPE
from treeperturb.data import ClsExample, QAExample, bundled_qa, bundled_reviews
from treeperturb.pipeline import (AttackResult, attack_classification, attack_qa,
                                  contradiction_filter, error_result, resolve_placement,
                                  run_attacks, target_class)
from treeperturb.seedgen import _flat_tree
from treeperturb.treeio import DepTree
from treeperturb.victims import best_span

ANSWER_SENTENCE = ("saw production suspended in 1989 by jonathan powell , controller of "
                   "bbc 1 .").split()
FAST = AttackConfig(steps=20, outer_max=2)


def _review_tree(words):
    # "the N was A ." as the fixture grammar parses it
    if len(words) == 5 and words[0] == "the" and words[2] == "was":
        return DepTree.from_lists(words, [2, 4, 4, 0, 4], ["det", "nsubj", "cop", "root", "punct"])
    return _flat_tree(words)


def _cls_example(text, label=0, id="toy"):
    return ClsExample(id, tuple(_review_tree(s.split()) for s in text.split(" | ")), label)


# -- contradiction filter -----------------------------------------------------------

def test_filter_passes_disjoint_sentence():
    adv = "Donald Trump ends a program on 1988 .".split()
    res = contradiction_filter(adv, ANSWER_SENTENCE)
    assert res.passed and not res.overlap


def test_filter_rejects_shared_content_word():
    res = contradiction_filter("Powell ends a program .".split(), ANSWER_SENTENCE)
    assert not res.passed and res.overlap == {"powell"}


def test_filter_ignores_stopwords_and_punctuation():
    assert contradiction_filter(["the", "a", ",", "of", "."], ANSWER_SENTENCE).passed
    res = contradiction_filter("the 1989 .".split(), ANSWER_SENTENCE, stopwords=["the"])
    assert res.overlap == {"1989"}


# -- small helpers ------------------------------------------------------------------

@pytest.mark.parametrize("gold, K, t", [(0, 2, 1), (1, 2, 0), (0, 3, 2), (1, 3, 2),
                                        (2, 3, 0), (4, 5, 0)])
def test_target_class(gold, K, t):
    assert target_class(gold, K) == t


def test_target_class_rejects_bad_labels():
    with pytest.raises(ValueError):
        target_class(2, 2)


def test_resolve_placement():
    assert resolve_placement("default", [3, 4], "cls") == 0
    assert resolve_placement("default", [3, 4], "qa") == 7
    assert resolve_placement(1, [3, 4], "cls") == 3
    assert resolve_placement("2", [3, 4], "cls") == 7
    with pytest.raises(ValueError):
        resolve_placement(3, [3, 4], "cls")


# -- classification -----------------------------------------------------------------

def test_constant_victim_already_on_target(ae, vocab):
    ex = _cls_example("the food was bland .", label=0)
    res = attack_classification(ex, ConstantVictim(vocab, [0.0, 5.0]), ae, FAST)
    assert res.targeted_success and res.outer_iterations == 1 and res.norm <= 1e-3
    assert res.adversarial == "the food was bland .".split()


def test_constant_victim_off_target_always_fails(ae, vocab):
    ex = _cls_example("the food was bland .", label=0)
    res = attack_classification(ex, ConstantVictim(vocab, [5.0, 0.0]), ae, FAST)
    assert not res.targeted_success and not res.untargeted_success
    assert res.outer_iterations == FAST.outer_max and res.failure_reason


def test_keyword_victim_flips_with_default_budget(ae, vocab):
    scores = keyword_scores(vocab, ["amazing", "excellent", "perfect", "fantastic",
                                    "wonderful"], [], K=2) * 3
    victim = BagVictim(vocab, scores, bias=torch.tensor([1.0, 0.0], dtype=DTYPE))
    ex = _cls_example("the food was bland . | the room was quiet .", label=0)
    seed_ids = vocab.ids("the food was bland .".split())
    assert substitution_oracle(victim, seed_ids, vocab.ids(ex.tokens), target=1)
    res = attack_classification(ex, victim, ae, AttackConfig(), random.Random(3))
    assert res.before == 0 and res.after == 1 and res.targeted_success
    # the recorded paragraph is the one the victim actually saw
    assert res.adversarial_paragraph == res.adversarial + ex.tokens


def test_classification_is_deterministic(ae, victim_cls):
    ex = bundled_reviews("attack")[0]
    a = attack_classification(ex, victim_cls, ae, FAST, random.Random(5))
    b = attack_classification(ex, victim_cls, ae, FAST, random.Random(5))
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("placement", ["append", 1])
def test_classification_placement(ae, vocab, placement):
    ex = _cls_example("the food was bland . | the room was quiet .", label=0)
    cfg = AttackConfig(steps=2, outer_max=1, placement=placement)
    res = attack_classification(ex, ConstantVictim(vocab, [0.0, 1.0]), ae, cfg)
    assert res.placement == 5 if placement == 1 else 10
    par = res.adversarial_paragraph
    assert par[res.placement:res.placement + len(res.adversarial)] == res.adversarial


# -- question answering -------------------------------------------------------------

def _qa_example():
    sents = ("adams purchased the desk . | king discovered the ship . | "
             "wright sold the tower .").split(" | ")
    heads, rels = [2, 0, 4, 2, 2], ["nsubj", "root", "det", "obj", "punct"]
    return QAExample("qa-toy", tuple(DepTree.from_lists(s.split(), heads, rels) for s in sents),
                     DepTree.from_lists("who sold the tower ?".split(), heads, rels), 2, 0, 0)


def test_tail_victim_position_attack_succeeds(ae, vocab, table):
    ex = _qa_example()
    names = ["adams", "king", "wright", "walker", "powell", "scott", "taylor", "lewis",
             "young", "wilson"]
    victim = TailQAVictim(vocab, [w for w in names if w in vocab])
    # direct span scoring: appended after the paragraph, the seed's answer is the best span
    res = attack_qa(ex, victim, ae, FAST, table=table, target_mode="position")
    seed_span = tuple(res.adversarial_span)
    full = vocab.ids(res.adversarial_paragraph)
    z = victim.forward_embedded(victim.embed(torch.tensor([full])),
                                torch.ones(1, len(full), dtype=torch.bool),
                                victim.embed(torch.tensor([[2]])), torch.ones(1, 1, dtype=torch.bool))
    assert best_span(z[0][0], z[1][0]) == seed_span
    assert res.targeted_success and res.filter_passed
    assert res.placement == len(ex.tokens)
    assert res.after["span"] == list(seed_span)


def test_answer_mode_keeps_the_targeted_answer(ae, victim_qa, table):
    ex = bundled_qa("attack")[0]
    res = attack_qa(ex, victim_qa, ae, FAST, table=table, target_mode="answer",
                    target_answer=["donald", "trump"])
    a, b = res.adversarial_span
    adv_par = res.adversarial_paragraph
    assert adv_par[a:b + 1] == ["donald", "trump"]
    assert res.targeted_answer == ["donald", "trump"]
    if res.targeted_success:
        assert res.after["text"] == ["donald", "trump"]


def test_filter_failure_is_never_a_success(ae, vocab, table):
    ex = _qa_example()
    victim = TailQAVictim(vocab, ["tower"])
    # the victim answers with whatever "tower" is last, but that word is in the answer sentence
    res = attack_qa(ex, victim, ae, FAST, table=table, target_mode="answer",
                    target_answer=["tower"])
    assert res.after["text"] == ["tower"]
    assert not res.filter_passed and "tower" in res.filter_overlap
    assert not res.targeted_success and not res.untargeted_success
    assert res.failure_reason.startswith("contradiction filter failed")


@pytest.mark.parametrize("strategy", ["answer", "random"])
def test_other_seed_strategies_run(ae, victim_qa, table, strategy):
    ex = bundled_qa("attack")[1]
    res = attack_qa(ex, victim_qa, ae, AttackConfig(steps=3, outer_max=1), table=table,
                    strategy=strategy, rng=random.Random(0))
    assert res.strategy in {"answer-based", "random-sentence"}
    a, b = res.adversarial_span
    assert b >= a and res.adversarial_paragraph[a:b + 1] == res.targeted_answer


def test_qa_argument_errors(ae, victim_qa, table):
    ex = bundled_qa("attack")[0]
    with pytest.raises(ValueError):
        attack_qa(ex, victim_qa, ae, FAST, table=table, strategy="nope")
    with pytest.raises(ValueError):
        attack_qa(ex, victim_qa, ae, FAST, table=table, target_mode="answer")


# -- records and the batch runner ---------------------------------------------------

def test_result_json_round_trip(ae, vocab):
    ex = _cls_example("the food was bland .", label=1)
    res = attack_classification(ex, ConstantVictim(vocab, [1.0, 0.0]), ae,
                                AttackConfig(steps=2, outer_max=1, save_trace=True))
    line = res.to_json()
    d = json.loads(line)
    assert d["kind"] == "result" and list(d) == sorted(d) and "wall_seconds" not in d
    assert len(d["trace"]) == 3
    assert AttackResult.from_json(line) == res


def test_run_attacks_keeps_order_and_records_errors():
    exs = [_cls_example("a b c", id=str(i)) for i in range(5)]

    def one(ex):
        if ex.id == "2":
            raise KeyError("boom")
        return error_result(ex, "cls", FAST, RuntimeError("fine"))

    seen = []
    out = run_attacks(exs, one, "cls", FAST, workers=3, sink=seen.append)
    assert [r.id for r in out] == [r.id for r in seen] == list("01234")
    assert out[2].failure_reason == "error: KeyError: 'boom'"
