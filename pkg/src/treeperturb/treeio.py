"""Dependency trees, vocabularies and word-vector tables.

Trees are read from CoNLL-U; only the ID, FORM, HEAD and DEPREL columns are
used.  Multiword-token ranges (``3-4``) and empty nodes (``5.1``) are skipped.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"


class TreeError(ValueError):
    """Raised for malformed CoNLL-U input or an invalid tree."""


@dataclass(frozen=True)
class Token:
    index: int
    surface: str

    def __post_init__(self):
        if not self.surface:
            raise TreeError(f"token {self.index} has an empty surface form")
        if self.index < 1:
            raise TreeError(f"token index must be >= 1, got {self.index}")

    @property
    def norm(self) -> str:
        return self.surface.lower()


@dataclass(frozen=True)
class DepTree:
    """A tokenized sentence with head indices and relation labels.

    ``head`` and ``relation`` are keyed by 1-based token index; head 0 marks
    the root.
    """

    tokens: tuple[Token, ...]
    head: Mapping[int, int]
    relation: Mapping[int, str]

    @classmethod
    def from_lists(cls, words: Sequence[str], heads: Sequence[int],
                   rels: Sequence[str]) -> "DepTree":
        if not (len(words) == len(heads) == len(rels)):
            raise TreeError("words, heads and rels must have equal length")
        toks = tuple(Token(i + 1, w) for i, w in enumerate(words))
        return cls(toks,
                   {i + 1: int(h) for i, h in enumerate(heads)},
                   {i + 1: r for i, r in enumerate(rels)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.surface for t in self.tokens]

    @property
    def norms(self) -> list[str]:
        return [t.norm for t in self.tokens]

    @property
    def heads(self) -> list[int]:
        return [self.head[t.index] for t in self.tokens]

    @property
    def rels(self) -> list[str]:
        return [self.relation[t.index] for t in self.tokens]

    @property
    def root(self) -> int:
        roots = [i for i, h in self.head.items() if h == 0]
        if len(roots) != 1:
            raise TreeError(f"tree has {len(roots)} roots")
        return roots[0]

    def children(self, index: int) -> list[int]:
        return sorted(i for i, h in self.head.items() if h == index)

    def depth(self) -> dict[int, int]:
        order = level_order(self)
        depth = {order[0]: 0}
        for i in order[1:]:
            depth[i] = depth[self.head[i]] + 1
        return depth

    def to_json(self) -> dict:
        return {"tokens": self.words, "heads": self.heads, "rels": self.rels}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DepTree":
        return cls.from_lists(obj["tokens"], obj["heads"], obj["rels"])


def validate(tree: DepTree) -> list[str]:
    """Return every invariant violation of ``tree``; empty list means ok."""
    problems = []
    idx = {t.index for t in tree.tokens}
    if set(tree.head) != idx:
        problems.append(f"head defined for {sorted(set(tree.head) ^ idx)} "
                        "which do not match the token set")
    if set(tree.relation) != idx:
        missing = sorted(idx - set(tree.relation))
        extra = sorted(set(tree.relation) - idx)
        problems.append(f"relation mismatch: missing {missing}, extra {extra}")
    roots = sorted(i for i in idx if tree.head.get(i) == 0)
    if not roots:
        problems.append("no root")
    elif len(roots) > 1:
        problems.append(f"multiple roots {roots}")
    for i in sorted(idx):
        h = tree.head.get(i)
        if h is not None and h != 0 and h not in idx:
            problems.append(f"token {i} has dangling head {h}")

    # follow head pointers from every node; a revisit means a cycle,
    # reaching a non-zero dead end means the node never gets to the root
    seen_cycles = []
    for start in sorted(idx):
        path = []
        cur = start
        while cur in idx and cur not in path:
            path.append(cur)
            cur = tree.head.get(cur, 0)
        if cur in path:
            cyc = frozenset(path[path.index(cur):])
            if cyc not in seen_cycles:
                seen_cycles.append(cyc)
                problems.append(f"cycle {sorted(cyc)}")
            if start not in cyc:
                problems.append(f"token {start} is disconnected from the root")
        elif cur != 0:
            problems.append(f"token {start} is disconnected from the root")
    return problems


def check(tree: DepTree) -> DepTree:
    problems = validate(tree)
    if problems:
        raise TreeError("; ".join(problems))
    return tree


def level_order(tree: DepTree) -> list[int]:
    """Root first, then by depth, ties broken by surface position."""
    check(tree)
    order = [tree.root]
    frontier = [tree.root]
    while frontier:
        nxt = sorted(c for p in frontier for c in tree.children(p))
        order.extend(nxt)
        frontier = nxt
    return order


def parse_conllu(text: str) -> list[DepTree]:
    trees: list[DepTree] = []
    block: list[tuple[int, str]] = []
    sent_no = 0

    def flush():
        nonlocal block, sent_no
        if not block:
            return
        sent_no += 1
        words, heads, rels = [], [], []
        for lineno, line in block:
            cols = line.split("\t")
            if len(cols) != 10:
                raise TreeError(f"sentence {sent_no}, line {lineno}: expected 10 "
                                f"columns, got {len(cols)}")
            tid = cols[0]
            if "-" in tid or "." in tid:
                continue
            try:
                int(tid)
                head = int(cols[6])
            except ValueError:
                raise TreeError(f"sentence {sent_no}, line {lineno}: non-integer "
                                f"ID or HEAD {cols[0]!r}/{cols[6]!r}") from None
            words.append(cols[1])
            heads.append(head)
            rels.append(cols[7])
        nroots = heads.count(0)
        if nroots != 1:
            raise TreeError(f"sentence {sent_no}, line {block[0][0]}: "
                            f"expected one root, found {nroots}")
        tree = DepTree.from_lists(words, heads, rels)
        problems = validate(tree)
        if problems:
            raise TreeError(f"sentence {sent_no}, line {block[0][0]}: "
                            + "; ".join(problems))
        trees.append(tree)
        block = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            flush()
        elif line.startswith("#"):
            continue
        else:
            block.append((lineno, line))
    flush()
    return trees


def serialize_conllu(trees: Iterable[DepTree]) -> str:
    out = []
    for tree in trees:
        for tok in tree.tokens:
            cols = [str(tok.index), tok.surface, "_", "_", "_", "_",
                    str(tree.head[tok.index]), tree.relation[tok.index], "_", "_"]
            out.append("\t".join(cols))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def read_conllu(path) -> list[DepTree]:
    return parse_conllu(Path(path).read_text(encoding="utf-8"))


@dataclass
class Vocab:
    """Token <-> id mapping over normalized (lowercased) forms."""

    itos: list[str] = field(default_factory=lambda: [PAD, UNK])

    def __post_init__(self):
        if self.itos[:2] != [PAD, UNK]:
            raise ValueError("ids 0 and 1 are reserved for PAD and UNK")
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_id = 0
    unk_id = 1

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        seen = {}
        for w in words:
            seen.setdefault(w.lower(), None)
        return cls([PAD, UNK] + sorted(w for w in seen if w not in (PAD, UNK)))

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word.lower(), self.unk_id)

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    def words(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EmbeddingTable:
    dimension: int
    words: tuple[str, ...]
    matrix: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        if self.matrix.shape != (len(self.words), self.dimension):
            raise ValueError("matrix shape does not match words x dimension")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding table contains non-finite values")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def from_dict(cls, vectors: Mapping[str, Sequence[float]]) -> "EmbeddingTable":
        words = tuple(vectors)
        mat = np.array([vectors[w] for w in words], dtype=np.float64)
        return cls(mat.shape[1], words, mat)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self._index

    def __getitem__(self, word) -> np.ndarray:
        return self.matrix[self._index[word]]

    def vectors(self) -> dict[str, np.ndarray]:
        return {w: self.matrix[i] for i, w in enumerate(self.words)}


def load_embeddings(path, dimension: int) -> EmbeddingTable:
    """Read ``word v1 ... vD`` lines; lines with the wrong arity are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read embeddings from {path}: {exc}") from exc
    words, rows, skipped = [], [], 0
    seen = set()
    for line in text.splitlines():
        parts = line.rstrip().split(" ")
        if len(parts) != dimension + 1 or not parts[0]:
            if line.strip():
                skipped += 1
            continue
        try:
            vec = [float(x) for x in parts[1:]]
        except ValueError:
            skipped += 1
            continue
        if not all(math.isfinite(v) for v in vec) or parts[0] in seen:
            skipped += 1
            continue
        seen.add(parts[0])
        words.append(parts[0])
        rows.append(vec)
    if not rows:
        raise ValueError(f"no usable embedding lines in {path}")
    if skipped:
        logger.warning("skipped %d malformed embedding lines in %s", skipped, path)
    return EmbeddingTable(dimension, tuple(words), np.asarray(rows, dtype=np.float64),
                          skipped)


def cosine_similarities(word: str, table: EmbeddingTable) -> np.ndarray:
    norms = np.linalg.norm(table.matrix, axis=1)
    q = table[word]
    denom = norms * np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = table.matrix @ q / denom
    return np.where(denom > 0, sims, 0.0)


def nearest_neighbors(word: str, table: EmbeddingTable, k: int) -> list[str]:
    """``k`` most cosine-similar words other than ``word``.

    Ties are broken lexicographically; asking for more words than the table
    holds returns all of them.
    """
    if word not in table:
        raise KeyError(f"{word!r} not in embedding table")
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = cosine_similarities(word, table)
    ranked = sorted((w for w in table.words if w != word),
                    key=lambda w: (-sims[table._index[w]], w))
    return ranked[:k]
