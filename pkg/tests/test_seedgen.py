import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURES
from treeperturb.seedgen import (SeedError, SeedSpec, _flat_tree, answer_based_seed,
                                 fake_answer, parse_rules, question_to_statement,
                                 random_qa_seed, seed_cls)
from treeperturb.treeio import EmbeddingTable, check, nearest_neighbors, read_conllu

REVIEW = """if you think las vegas is getting too white trash , don ' t go near here .
this place is like a steinbeck novel come to life .
i kept expecting to see donkeys and chickens walking around .
wooo - pig - soooeeee this place is awful ! ! !"""
DONKEYS = "i kept expecting to see donkeys and chickens walking around ."


def _trees(text):
    return [_flat_tree(line.split()) for line in text.splitlines()]


def _gold(words):
    for t in read_conllu(FIXTURES / "gold10.conllu"):
        if t.words == words:
            return t
    raise LookupError(words)


# -- classification seeds -----------------------------------------------------------

def test_seed_cls_single_qualifying_sentence():
    trees = _trees("hi .\nthe food was bland .\nok")
    for s in range(10):
        assert seed_cls(trees, random.Random(s)).tokens == "the food was bland .".split()


def test_seed_cls_is_deterministic_and_can_pick_the_review_sentence():
    trees = _trees(REVIEW)
    picks = [" ".join(seed_cls(trees, random.Random(s)).tokens) for s in range(40)]
    assert picks == [" ".join(seed_cls(trees, random.Random(s)).tokens) for s in range(40)]
    assert DONKEYS in picks
    assert set(picks) <= {line for line in REVIEW.splitlines()}


def test_seed_cls_needs_a_long_sentence():
    with pytest.raises(SeedError):
        seed_cls(_trees("hi .\nok"), random.Random(0))


def test_seed_spec_minimum_length():
    with pytest.raises(SeedError):
        SeedSpec("random-sentence", ["a", "b"])


# -- question conversion ------------------------------------------------------------

QUESTION = "Who ended the series in 1989 ?".split()


@pytest.mark.parametrize("with_tree", [False, True])
def test_question_with_targeted_answer(with_tree):
    tree = _gold(QUESTION) if with_tree else None
    seed = question_to_statement(QUESTION, ["Donald", "Trump"], tree)
    assert " ".join(seed.tokens) == "Donald Trump ended the series in 1989 ."
    assert seed.answer_tokens == ["Donald", "Trump"] and seed.answer_span == (0, 1)
    assert seed.strategy == "question-based" and not seed.warnings
    if with_tree:
        check(seed.tree)
        assert seed.tree.words == seed.tokens


def test_question_with_placeholder():
    seed = question_to_statement(QUESTION)
    assert " ".join(seed.tokens) == "someone ended the series in 1989 ."


def test_question_fallback_warns():
    seed = question_to_statement(["Frobnicate", "blarg", "?"], ["X"])
    assert seed.tokens == ["X", "frobnicate", "blarg", "."]
    assert seed.warnings and seed.answer_span == (0, 0)


@pytest.mark.parametrize("q", ["what did the queen sign in 1215 ?", "when was the bridge built ?",
                               "how many ships sank ?", "whose horse won ?"])
def test_other_wh_patterns_carry_the_answer_once(q):
    seed = question_to_statement(q.split(), ["alpha"])
    assert seed.tokens.count("alpha") == 1 and seed.tokens[-1] == "."
    assert seed.answer_tokens == ["alpha"]


def test_custom_rule_table():
    rules = parse_rules("# comment\n^name (.+) → {A} is \\1\n")
    seed = question_to_statement("name the king ?".split(), ["arthur"], rules=rules)
    assert seed.tokens == ["arthur", "is", "the", "king", "."]


words = st.sampled_from("who what when where which how many did was the a ship king river "
                        "found built sank in 1989 whose name is".split())


@settings(max_examples=300, deadline=None)
@given(st.lists(words, min_size=1, max_size=8),
       st.lists(st.sampled_from(["zed", "ozone", "qux"]), min_size=1, max_size=3))
def test_question_conversion_is_total_and_offsets_slice_the_answer(q, answer):
    tree = _flat_tree(q + ["?"])
    seed = question_to_statement(q + ["?"], answer, tree)
    again = question_to_statement(q + ["?"], answer, tree)
    assert seed.tokens == again.tokens and seed.answer_span == again.answer_span
    a, b = seed.answer_span
    assert seed.tokens[a:b + 1] == answer
    assert seed.tree is not None and seed.tree.words == seed.tokens
    check(seed.tree)


# -- answer-based seeds -------------------------------------------------------------

SENT = "saw production suspended in 1989 by jonathan powell .".split()


def test_answer_seed_with_targeted_answer(table):
    seed = answer_based_seed(SENT, (6, 7), table, ["donald", "trump"])
    assert seed.tokens[6:8] == ["donald", "trump"] and seed.answer_span == (6, 7)
    assert seed.tokens[:6] == SENT[:6] and seed.tokens[8:] == SENT[8:]
    seed = answer_based_seed(SENT, (6, 7), table, ["someone"])
    assert seed.answer_tokens == ["someone"] and len(seed.tokens) == len(SENT) - 1


def test_answer_seed_keeps_unknown_tokens_with_warning():
    toy = EmbeddingTable.from_dict({"a": (1.0, 0.0), "b": (0.9, 0.1), "c": (0.0, 1.0)})
    seed = answer_based_seed(["x", "zzz", "y", "."], (1, 1), toy)
    assert seed.tokens[1] == "zzz" and any("zzz" in w for w in seed.warnings)


def _brute_nn(word, table):
    v = table[word]
    best, arg = -np.inf, None
    for w in table.words:
        if w == word:
            continue
        u = table[w]
        cos = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        if cos > best:
            best, arg = cos, w
    return arg


def test_answer_seed_matches_cosine_oracle_on_toy_table():
    toy = EmbeddingTable.from_dict({"a": (1.0, 0.0), "b": (0.9, 0.1), "c": (0.0, 1.0)})
    for w in "abc":
        seed = answer_based_seed(["x", w, "y"], (1, 1), toy)
        assert seed.tokens[1] == _brute_nn(w, toy)
    assert answer_based_seed(["x", "a", "y"], (1, 1), toy).tokens[1] == "b"


def test_answer_seed_keeps_parse_for_equal_length(table):
    tree = _gold("Donald Trump ended the series .".split())
    seed = answer_based_seed(tree, (0, 1), table)
    assert seed.tree.heads == tree.heads and seed.tree.rels == tree.rels
    assert seed.tokens[2:] == tree.words[2:]
    assert [w.lower() for w in seed.tokens[:2]] != ["donald", "trump"]


def test_answer_seed_errors(table):
    with pytest.raises(SeedError):
        answer_based_seed([], (0, 0), table)
    with pytest.raises(SeedError):
        answer_based_seed(["a", "b", "c"], (2, 3), table)


def test_fake_answer_avoids_gold_and_itself(table):
    out = fake_answer(["powell"], table, avoid=["walker"])
    assert out[0] not in {"powell", "walker"}
    nn = [w for w in nearest_neighbors("powell", table, len(table)) if w != "walker"]
    assert out[0] == nn[0]


def test_random_qa_seed_places_answer_before_period():
    trees = _trees("the king built a bridge .\njonathan powell suspended it .\nrain fell .")
    for s in range(5):
        seed = random_qa_seed(trees, 1, ["donald", "trump"], random.Random(s))
        assert seed.tokens[-3:] == ["donald", "trump", "."]
        assert seed.answer_tokens == ["donald", "trump"]
        assert "powell" not in seed.tokens
        check(seed.tree)
    with pytest.raises(SeedError):
        random_qa_seed(trees[1:2], 0, ["x"], random.Random(0))
