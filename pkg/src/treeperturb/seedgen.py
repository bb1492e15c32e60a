"""Adversarial seed construction.

Classification seeds are sentences drawn from the paragraph.  QA seeds are
declaratives carrying a fake answer, built either from the question by a
small regex rule table (``data/wh_rules.txt``) or from the predicted answer
sentence by nearest-neighbour substitution.  When a dependency tree for the
source sentence is known, a tree for the seed is spliced from it so the seed
can be fed straight to the tree autoencoder.
"""
from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

from .treeio import DepTree, EmbeddingTable, nearest_neighbors, validate

PUNCT = frozenset(".?!,;:")
WH_WORDS = frozenset("who whom whose what which when where why how".split())
LITERAL_RELS = {"is": "cop", "was": "cop", "'s": "case"}
PLACEHOLDER = ("someone",)


class SeedError(ValueError):
    pass


@dataclass
class SeedSpec:
    strategy: str                      # random-sentence | question-based | answer-based
    tokens: list[str]
    tree: DepTree | None = None
    answer_span: tuple[int, int] | None = None   # 0-based, inclusive, inside ``tokens``
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.tokens) < 3:
            raise SeedError(f"seed must have at least 3 tokens, got {self.tokens}")
        if self.tree is not None and self.tree.words != list(self.tokens):
            raise SeedError("seed tree does not match the seed tokens")

    @property
    def answer_tokens(self) -> list[str]:
        if self.answer_span is None:
            return []
        a, b = self.answer_span
        return self.tokens[a:b + 1]


# -- classification ---------------------------------------------------------------

def seed_cls(sentences: Sequence[DepTree], rng: random.Random) -> SeedSpec:
    """Uniform choice among the sentences with at least three tokens."""
    ok = [s for s in sentences if len(s) >= 3]
    if not ok:
        raise SeedError("paragraph has no sentence with at least 3 tokens")
    tree = ok[rng.randrange(len(ok))]
    return SeedSpec("random-sentence", tree.words, tree)


# -- tree splicing ------------------------------------------------------------------

def _splice(source: DepTree, items: list[tuple], anchor: int | None) -> DepTree:
    """Build a tree for a sequence of output items.

    ``items`` holds ("src", i) for a 1-based source token kept as is,
    ("ans", word) for an answer token, ("lit", word) for an inserted word and
    ("end", ".") for the final period.  Source tokens that are not kept are
    dropped.  The answer's last token takes over the attachment of ``anchor``
    (the top of the removed wh-phrase or replaced span); with no anchor it
    hangs off the root as ``dep``.
    """
    kept = {it[1]: pos for pos, it in enumerate(items, 1) if it[0] == "src"}
    ans = [pos for pos, it in enumerate(items, 1) if it[0] == "ans"]
    heads = [0] * len(items)
    rels = [""] * len(items)

    removed_under_anchor = set()
    if anchor is not None:
        for i in range(1, len(source) + 1):
            j = i
            while j != 0 and j not in kept:
                if j == anchor:
                    removed_under_anchor.add(i)
                    break
                j = source.head[j]

    def lift(i: int) -> int:
        """Output head for source token i (-1 stands for the answer head)."""
        j = source.head[i]
        while j != 0 and j not in kept:
            if j in removed_under_anchor:
                return -1
            j = source.head[j]
        return kept.get(j, 0)

    ans_head = ans[-1] if ans else None
    root_pos = None
    for i, pos in kept.items():
        h = lift(i)
        heads[pos - 1] = ans_head if h == -1 else h
        rels[pos - 1] = source.relation[i]
    if ans_head is not None:
        if anchor is not None:
            j = source.head[anchor]
            while j != 0 and j not in kept:
                j = source.head[j]
            heads[ans_head - 1] = kept.get(j, 0)
            rels[ans_head - 1] = source.relation[anchor]
        else:
            heads[ans_head - 1] = -2
            rels[ans_head - 1] = "dep"
        for pos in ans[:-1]:
            heads[pos - 1], rels[pos - 1] = ans_head, "compound"

    # exactly one root among the attached tokens
    roots = [k + 1 for k, h in enumerate(heads) if h == 0 and items[k][0] in ("src", "ans")]
    if roots:
        root_pos = roots[0]
        rels[root_pos - 1] = "root"
        for r in roots[1:]:
            heads[r - 1] = root_pos
            if rels[r - 1] == "root":
                rels[r - 1] = "dep"
    for k, h in enumerate(heads):
        if h == -2:
            heads[k] = root_pos if root_pos is not None else 0
            if root_pos is None:
                root_pos = k + 1
                rels[k] = "root"
    for pos, it in enumerate(items, 1):
        if it[0] == "lit":
            heads[pos - 1] = ans_head or root_pos
            rels[pos - 1] = LITERAL_RELS.get(it[1].lower(), "case")
        elif it[0] == "end":
            heads[pos - 1], rels[pos - 1] = root_pos, "punct"
    words = [source.tokens[it[1] - 1].surface if it[0] == "src" else it[1] for it in items]
    return DepTree.from_lists(words, heads, rels)


def _flat_tree(words: Sequence[str]) -> DepTree:
    """Fallback structure: everything attached to the first token."""
    return DepTree.from_lists(words, [0] + [1] * (len(words) - 1),
                              ["root"] + ["dep"] * (len(words) - 1))


def _answer_count(tokens: Sequence[str], answer: Sequence[str]) -> int:
    low = [t.lower() for t in tokens]
    a = [t.lower() for t in answer]
    return sum(low[i:i + len(a)] == a for i in range(len(low) - len(a) + 1))


def _finish(strategy, items, words, source, anchor, warnings) -> SeedSpec:
    span = _span(items)
    if span is not None and _answer_count(words, words[span[0]:span[1] + 1]) != 1:
        warnings.append("answer occurs more than once in the seed")
    tree = None
    if source is not None:
        tree = _splice(source, items, anchor)
        if validate(tree):
            warnings.append("spliced tree invalid, using a flat tree")
            tree = _flat_tree(words)
    return SeedSpec(strategy, words, tree, span, warnings)


def _span(items):
    ans = [k for k, it in enumerate(items) if it[0] == "ans"]
    return (ans[0], ans[-1]) if ans else None


# -- question-based seeds -----------------------------------------------------------

@dataclass(frozen=True)
class WhRule:
    pattern: re.Pattern
    template: tuple[str, ...]


def parse_rules(text: str) -> list[WhRule]:
    rules = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "→" not in line:
            raise ValueError(f"rule line {n}: expected 'pattern → template'")
        pat, tpl = (s.strip() for s in line.split("→", 1))
        rules.append(WhRule(re.compile(pat, re.IGNORECASE), tuple(tpl.split())))
    return rules


@lru_cache(maxsize=None)
def default_rules() -> tuple[WhRule, ...]:
    from .data import data_path
    return tuple(parse_rules(data_path("wh_rules.txt").read_text(encoding="utf-8")))


def _token_starts(tokens: Sequence[str]) -> list[int]:
    starts, pos = [], 0
    for t in tokens:
        starts.append(pos)
        pos += len(t) + 1
    return starts


def _group_tokens(m: re.Match, g: int, starts: list[int], n: int) -> list[int] | None:
    """0-based token indices covered by capture group g, or None if the group
    does not align with token boundaries."""
    a, b = m.span(g)
    if a == b:
        return []
    text = m.string
    while a < b and text[a] == " ":
        a += 1
    if a == b:
        return []
    if a not in starts:
        return None
    first = starts.index(a)
    idx = [k for k in range(first, n) if starts[k] < b]
    last = idx[-1]
    if starts[last] + len(text[starts[last]:].split(" ")[0]) != b:
        return None
    return idx


def _apply_rule(rule: WhRule, tokens: list[str], answer: Sequence[str]):
    text = " ".join(tokens)
    m = rule.pattern.fullmatch(text)
    if m is None:
        return None
    starts = _token_starts(tokens)
    items = []
    for piece in rule.template:
        # a template word may glue a slot to a literal, e.g. "\2\3"
        for part in re.findall(r"\\\d+|\{A\}|[^\\{]+", piece):
            if part == "{A}":
                items.extend(("ans", a) for a in answer)
            elif part.startswith("\\"):
                idx = _group_tokens(m, int(part[1:]), starts, len(tokens))
                if idx is None:
                    return None
                items.extend(("src", k + 1) for k in idx)
            else:
                items.append(("lit", part))
    return items


def question_to_statement(question: Sequence[str], answer: Sequence[str] = PLACEHOLDER,
                          question_tree: DepTree | None = None,
                          rules: Sequence[WhRule] | None = None) -> SeedSpec:
    """Rewrite a wh-question into a declarative carrying ``answer``.

    Total: questions no rule recognises become "<answer> <question words> ."
    with a warning.
    """
    question = list(question)
    answer = list(answer)
    if not answer:
        raise SeedError("empty answer")
    if question_tree is not None and question_tree.words != question:
        raise SeedError("question tree does not match the question tokens")
    body = question[:-1] if question and question[-1] in PUNCT else question
    warnings: list[str] = []
    items, anchor = None, None
    for rule in (default_rules() if rules is None else rules):
        items = _apply_rule(rule, body, answer)
        if items is not None:
            break
    if items is None:
        warnings.append("no wh-rule matched; answer prefixed to the question")
        items = [("ans", a) for a in answer] + [("src", k + 1) for k in range(len(body))]
    elif question_tree is not None:
        anchor = _wh_anchor(question_tree, items)
    items.append(("end", "."))
    # the question's capitalised first word no longer starts a sentence
    recased = [question[0].lower()] + question[1:] if question else question
    words = [recased[it[1] - 1] if it[0] == "src" else it[1] for it in items]
    source = None
    if question_tree is not None:
        source = DepTree.from_lists(recased, question_tree.heads, question_tree.rels)
    return _finish("question-based", items, words, source, anchor, warnings)


def _wh_anchor(tree: DepTree, items) -> int | None:
    """Top of the removed wh-phrase: the highest dropped token above the wh-word."""
    kept = {it[1] for it in items if it[0] == "src"}
    wh = [i for i in range(1, len(tree) + 1)
          if i not in kept and tree.tokens[i - 1].norm in WH_WORDS]
    if not wh:
        return None
    a = wh[0]
    while tree.head[a] != 0 and tree.head[a] not in kept and \
            tree.tokens[tree.head[a] - 1].surface not in PUNCT:
        a = tree.head[a]
    return a


# -- answer-based and random seeds ------------------------------------------------

def fake_answer(tokens: Sequence[str], table: EmbeddingTable,
                avoid: Sequence[str] = (), warnings: list | None = None) -> list[str]:
    """Replace each token by its nearest embedding neighbour not in ``avoid``.

    Tokens missing from the table are kept (with a warning)."""
    avoid = {a.lower() for a in avoid} | {t.lower() for t in tokens}
    out = []
    for tok in tokens:
        w = tok.lower()
        if w not in table:
            if warnings is not None:
                warnings.append(f"{tok!r} not in the embedding table, kept as is")
            out.append(tok)
            continue
        cands = [c for c in nearest_neighbors(w, table, len(table)) if c not in avoid]
        out.append(cands[0] if cands else tok)
    return out


def _span_top(tree: DepTree, a: int, b: int) -> int:
    """1-based index of the span token whose head lies outside [a, b] (0-based)."""
    inside = set(range(a + 1, b + 2))
    tops = [i for i in sorted(inside) if tree.head[i] not in inside]
    return tops[0]


def answer_based_seed(sentence: DepTree | Sequence[str], span: tuple[int, int],
                      table: EmbeddingTable,
                      target_answer: Sequence[str] | None = None) -> SeedSpec:
    """Copy the answer sentence with its answer span swapped for a fake one.

    ``span`` is 0-based inclusive.  Without ``target_answer`` each span token
    becomes its top-1 nearest neighbour.
    """
    tree = sentence if isinstance(sentence, DepTree) else None
    words = tree.words if tree is not None else list(sentence)
    if not words:
        raise SeedError("empty sentence")
    a, b = span
    if not 0 <= a <= b < len(words):
        raise SeedError(f"span {span} outside a {len(words)}-token sentence")
    warnings: list[str] = []
    if target_answer is None:
        fake = fake_answer(words[a:b + 1], table, warnings=warnings)
    else:
        fake = list(target_answer)
    items = ([("src", k + 1) for k in range(a)] + [("ans", w) for w in fake]
             + [("src", k + 1) for k in range(b + 1, len(words))])
    new_words = words[:a] + fake + words[b + 1:]
    if tree is not None and len(fake) == b - a + 1:
        # same shape: keep the parse, swap the words
        kept_tree = DepTree.from_lists(new_words, tree.heads, tree.rels)
        out = _finish("answer-based", items, new_words, None, None, warnings)
        out.tree = kept_tree
        return out
    anchor = _span_top(tree, a, b) if tree is not None else None
    return _finish("answer-based", items, new_words, tree, anchor, warnings)


def random_qa_seed(sentences: Sequence[DepTree], answer_sentence: int,
                   answer: Sequence[str], rng: random.Random) -> SeedSpec:
    """A random non-answer sentence with the fake answer placed before its final period."""
    pool = [k for k, s in enumerate(sentences) if k != answer_sentence and len(s) >= 2]
    if not pool:
        raise SeedError("no non-answer sentence to build a random seed from")
    tree = sentences[pool[rng.randrange(len(pool))]]
    words = tree.words
    n = len(words) - 1 if words[-1] in PUNCT else len(words)
    items = [("src", k + 1) for k in range(n)] + [("ans", w) for w in answer] + [("end", ".")]
    new_words = words[:n] + list(answer) + ["."]
    # drop the old final punctuation; the splice re-attaches the new one
    return _finish("random-sentence", items, new_words, tree, None, [])
