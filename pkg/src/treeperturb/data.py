"""Loading the bundled fixtures and the JSONL example formats."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .treeio import DepTree, Vocab, load_embeddings, read_conllu

EMBED_DIM = 50


def data_path(name: str) -> Path:
    return Path(str(resources.files("treeperturb") / "data" / name))


@dataclass(frozen=True)
class ClsExample:
    id: str
    sentences: tuple[DepTree, ...]
    label: int

    @property
    def tokens(self) -> list[str]:
        return [w for s in self.sentences for w in s.norms]


@dataclass(frozen=True)
class QAExample:
    id: str
    sentences: tuple[DepTree, ...]
    question: DepTree
    answer_sentence: int
    answer_start: int   # token offsets inside the answer sentence, inclusive
    answer_end: int

    @property
    def tokens(self) -> list[str]:
        return [w for s in self.sentences for w in s.norms]

    @property
    def question_tokens(self) -> list[str]:
        return self.question.norms

    def sentence_offset(self, k: int) -> int:
        return sum(len(s) for s in self.sentences[:k])

    @property
    def answer_span(self) -> tuple[int, int]:
        off = self.sentence_offset(self.answer_sentence)
        return off + self.answer_start, off + self.answer_end

    @property
    def answer_text(self) -> str:
        s = self.sentences[self.answer_sentence]
        return " ".join(s.words[self.answer_start:self.answer_end + 1])


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def parse_cls(obj: dict) -> ClsExample:
    return ClsExample(str(obj["id"]), tuple(DepTree.from_json(s) for s in obj["sentences"]),
                      int(obj["label"]))


def parse_qa(obj: dict) -> QAExample:
    ans = obj["answer"]
    return QAExample(str(obj["id"]), tuple(DepTree.from_json(s) for s in obj["sentences"]),
                     DepTree.from_json(obj["question_tree"]), int(ans["sentence"]),
                     int(ans["start"]), int(ans["end"]))


def load_cls(path) -> list[ClsExample]:
    return [parse_cls(o) for o in _read_jsonl(path)]


def load_qa(path) -> list[QAExample]:
    return [parse_qa(o) for o in _read_jsonl(path)]


def bundled_reviews(split: str) -> list[ClsExample]:
    return load_cls(data_path(f"reviews_{split}.jsonl"))


def bundled_qa(split: str) -> list[QAExample]:
    return load_qa(data_path(f"qa_{split}.jsonl"))


@lru_cache(maxsize=None)
def bundled_embeddings():
    return load_embeddings(data_path("embeddings.txt"), EMBED_DIM)


@lru_cache(maxsize=None)
def bundled_vocab() -> Vocab:
    words = list(bundled_embeddings().words)
    for name in ("corpus.conllu", "pretrain.conllu"):
        words.extend(w for t in read_conllu(data_path(name)) for w in t.words)
    return Vocab.build(words)


def encode_cls(examples, vocab: Vocab):
    return [(vocab.ids(ex.tokens), ex.label) for ex in examples]


def encode_qa(examples, vocab: Vocab):
    return [(vocab.ids(ex.tokens), vocab.ids(ex.question_tokens), *ex.answer_span)
            for ex in examples]
