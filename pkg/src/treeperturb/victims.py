"""Small differentiable victims: a sentiment classifier and a span-extraction QA model.

Every model reads a *soft text*: one probability row over the shared
vocabulary per position.  The network sees the expected embedding of each
row, so a one-hot row reproduces the ordinary embedding lookup exactly and a
relaxed decoder output can be pushed through end to end.

Two families per task are bundled (attention- vs recurrent-pooled sentiment;
recurrent vs convolutional QA) so transfer between architectures can be
measured.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_archive, save_archive
from .treeio import EmbeddingTable, Vocab

logger = logging.getLogger(__name__)

DTYPE = torch.float64
MAX_SPAN = 15


class VictimTrainingError(RuntimeError):
    """Raised when a victim does not reach its clean-accuracy floor."""


def one_hot(ids: Sequence[int], size: int) -> torch.Tensor:
    ids = torch.as_tensor(list(ids), dtype=torch.long)
    return F.one_hot(ids, size).to(DTYPE)


def check_soft_text(rows: torch.Tensor, tol: float = 1e-6) -> torch.Tensor:
    if rows.dim() != 2 or rows.shape[0] == 0:
        raise ValueError("soft text must be a non-empty (length, vocab) matrix")
    if (rows < 0).any() or ((rows.sum(dim=1) - 1).abs() > tol).any():
        raise ValueError("soft text rows must be distributions")
    return rows


def _masked_gru(gru: nn.GRU, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    lengths = mask.sum(dim=1)
    if bool((lengths == x.shape[1]).all()):
        return gru(x)[0]
    packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True,
                                               enforce_sorted=False)
    out, _ = gru(packed)
    return nn.utils.rnn.pad_packed_sequence(out, batch_first=True,
                                            total_length=x.shape[1])[0]


class _Victim(nn.Module):
    task = ""
    family = ""

    def __init__(self, vocab: Vocab, emb_dim: int):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.Embedding(len(vocab), emb_dim, padding_idx=0)

    def embed_soft(self, rows: torch.Tensor) -> torch.Tensor:
        return rows @ self.embed.weight

    def init_embeddings(self, table: EmbeddingTable, freeze: bool = False) -> None:
        with torch.no_grad():
            for w, i in self.vocab.stoi.items():
                if w in table:
                    self.embed.weight[i] = torch.as_tensor(table[w], dtype=DTYPE)
        self.embed.weight.requires_grad_(not freeze)

    def config(self) -> dict:
        return dict(self._config)


class SentimentAttention(_Victim):
    """Embeddings -> tanh projection -> additive self-attention pooling -> K logits."""

    task, family = "cls", "attention"

    def __init__(self, vocab: Vocab, n_classes: int = 3, emb_dim: int = 50, hidden: int = 64):
        super().__init__(vocab, emb_dim)
        self._config = dict(n_classes=n_classes, emb_dim=emb_dim, hidden=hidden)
        self.n_classes = n_classes
        self.proj = nn.Linear(emb_dim, hidden)
        self.score = nn.Linear(hidden, 1, bias=False)
        self.head = nn.Linear(hidden, n_classes)
        self.to(DTYPE)

    def forward_embedded(self, e, mask):
        h = torch.tanh(self.proj(e))
        a = self.score(h).squeeze(-1).masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(a, dim=1)
        return self.head((alpha.unsqueeze(-1) * h).sum(dim=1))


class SentimentRecurrent(_Victim):
    """Embeddings -> BiGRU -> masked mean pooling -> K logits."""

    task, family = "cls", "recurrent"

    def __init__(self, vocab: Vocab, n_classes: int = 3, emb_dim: int = 50, hidden: int = 32):
        super().__init__(vocab, emb_dim)
        self._config = dict(n_classes=n_classes, emb_dim=emb_dim, hidden=hidden)
        self.n_classes = n_classes
        self.gru = nn.GRU(emb_dim, hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden, n_classes)
        self.to(DTYPE)

    def forward_embedded(self, e, mask):
        out = _masked_gru(self.gru, e, mask)
        m = mask.unsqueeze(-1).to(out.dtype)
        return self.head((out * m).sum(dim=1) / m.sum(dim=1))


class _SpanQA(_Victim):
    task = "qa"

    def __init__(self, vocab, emb_dim, hidden):
        super().__init__(vocab, emb_dim)
        self._config = dict(emb_dim=emb_dim, hidden=hidden)
        d = 2 * hidden
        self.bilinear = nn.Linear(d, d, bias=False)
        self.start = nn.Linear(d, 1)
        self.end = nn.Linear(d, 1)

    def encode_paragraph(self, e, mask):
        raise NotImplementedError

    encode_question = encode_paragraph

    def model_layer(self, g, mask):
        raise NotImplementedError

    def forward_embedded(self, pe, pmask, qe, qmask):
        P = self.encode_paragraph(pe, pmask)
        Q = self.encode_question(qe, qmask)
        S = torch.einsum("bld,bmd->blm", self.bilinear(P), Q)
        S = S.masked_fill(~qmask.unsqueeze(1), float("-inf"))
        q_att = torch.softmax(S, dim=2) @ Q
        M = self.model_layer(torch.cat([P, q_att, P * q_att], dim=2), pmask)
        z1 = self.start(M).squeeze(-1).masked_fill(~pmask, float("-inf"))
        z2 = self.end(M).squeeze(-1).masked_fill(~pmask, float("-inf"))
        return z1, z2


class SpanQARecurrent(_SpanQA):
    """BiGRU encoders, bilinear question-paragraph attention, BiGRU modelling layer."""

    family = "recurrent"

    def __init__(self, vocab: Vocab, emb_dim: int = 50, hidden: int = 32):
        super().__init__(vocab, emb_dim, hidden)
        self.p_gru = nn.GRU(emb_dim, hidden, batch_first=True, bidirectional=True)
        self.q_gru = nn.GRU(emb_dim, hidden, batch_first=True, bidirectional=True)
        self.m_gru = nn.GRU(6 * hidden, hidden, batch_first=True, bidirectional=True)
        self.to(DTYPE)

    def encode_paragraph(self, e, mask):
        return _masked_gru(self.p_gru, e, mask)

    def encode_question(self, e, mask):
        return _masked_gru(self.q_gru, e, mask)

    def model_layer(self, g, mask):
        return _masked_gru(self.m_gru, g, mask)


class SpanQAConv(_SpanQA):
    """Same interaction as the recurrent model with width-5 convolutions everywhere."""

    family = "conv"

    def __init__(self, vocab: Vocab, emb_dim: int = 50, hidden: int = 32):
        super().__init__(vocab, emb_dim, hidden)
        d = 2 * hidden
        self.p_conv = nn.Conv1d(emb_dim, d, 5, padding=2)
        self.q_conv = nn.Conv1d(emb_dim, d, 5, padding=2)
        self.m_conv = nn.Conv1d(3 * d, d, 5, padding=2)
        self.to(DTYPE)

    @staticmethod
    def _conv(conv, x, mask):
        x = x * mask.unsqueeze(-1).to(x.dtype)
        return torch.tanh(conv(x.transpose(1, 2)).transpose(1, 2))

    def encode_paragraph(self, e, mask):
        return self._conv(self.p_conv, e, mask)

    def encode_question(self, e, mask):
        return self._conv(self.q_conv, e, mask)

    def model_layer(self, g, mask):
        return self._conv(self.m_conv, g, mask)


FAMILIES = {("cls", "attention"): SentimentAttention,
            ("cls", "recurrent"): SentimentRecurrent,
            ("qa", "recurrent"): SpanQARecurrent,
            ("qa", "conv"): SpanQAConv}


# -- forward passes on single examples ----------------------------------------

def _ones_mask(n):
    return torch.ones(1, n, dtype=torch.bool)


def cls_logits(model, rows: torch.Tensor) -> torch.Tensor:
    """Logits (K,) for one soft text of shape (length, vocab)."""
    if rows.dim() != 2 or rows.shape[0] == 0:
        raise ValueError("classifier input must be a non-empty soft text")
    e = model.embed_soft(rows).unsqueeze(0)
    return model.forward_embedded(e, _ones_mask(rows.shape[0]))[0]


def qa_logits(model, paragraph: torch.Tensor, question: torch.Tensor):
    """Start and end logits over paragraph positions."""
    if paragraph.dim() != 2 or paragraph.shape[0] == 0 or question.dim() != 2 \
            or question.shape[0] == 0:
        raise ValueError("paragraph and question must be non-empty soft texts")
    pe = model.embed_soft(paragraph).unsqueeze(0)
    qe = model.embed_soft(question).unsqueeze(0)
    z1, z2 = model.forward_embedded(pe, _ones_mask(paragraph.shape[0]),
                                    qe, _ones_mask(question.shape[0]))
    return z1[0], z2[0]


def cls_logits_ids(model, ids: Sequence[int]) -> torch.Tensor:
    ids = torch.as_tensor(list(ids), dtype=torch.long)
    if len(ids) == 0:
        raise ValueError("classifier input must be non-empty")
    with torch.no_grad():
        return model.forward_embedded(model.embed(ids).unsqueeze(0), _ones_mask(len(ids)))[0]


def qa_logits_ids(model, p_ids: Sequence[int], q_ids: Sequence[int]):
    p = torch.as_tensor(list(p_ids), dtype=torch.long)
    q = torch.as_tensor(list(q_ids), dtype=torch.long)
    with torch.no_grad():
        z1, z2 = model.forward_embedded(model.embed(p).unsqueeze(0), _ones_mask(len(p)),
                                        model.embed(q).unsqueeze(0), _ones_mask(len(q)))
    return z1[0], z2[0]


def predict_label(model, ids: Sequence[int]) -> int:
    return int(cls_logits_ids(model, ids).argmax())


def best_span(z1: torch.Tensor, z2: torch.Tensor, max_span: int = MAX_SPAN) -> tuple[int, int]:
    """(i, j) with i <= j <= i + max_span maximising z1[i] + z2[j]; first wins ties."""
    n = z1.shape[0]
    scores = z1.unsqueeze(1) + z2.unsqueeze(0)
    i_idx = torch.arange(n).unsqueeze(1)
    j_idx = torch.arange(n).unsqueeze(0)
    valid = (j_idx >= i_idx) & (j_idx <= i_idx + max_span)
    flat = scores.masked_fill(~valid, float("-inf")).reshape(-1).argmax()
    return int(flat // n), int(flat % n)


def predict_span(model, p_ids, q_ids, max_span: int = MAX_SPAN) -> tuple[int, int]:
    return best_span(*qa_logits_ids(model, p_ids, q_ids), max_span=max_span)


# -- training -------------------------------------------------------------------

@dataclass
class VictimConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 5e-3
    seed: int = 0
    cls_floor: float = 0.85
    qa_floor: float = 60.0
    freeze_embeddings: bool = False


def _pad(seqs):
    n = max(len(s) for s in seqs)
    ids = torch.zeros(len(seqs), n, dtype=torch.long)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for k, s in enumerate(seqs):
        ids[k, :len(s)] = torch.as_tensor(s)
        mask[k, :len(s)] = True
    return ids, mask


def train_sentiment(model, train: Sequence[tuple[list[int], int]],
                    config: VictimConfig = VictimConfig()):
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    model.train()
    for epoch in range(config.epochs):
        total = 0.0
        perm = rng.permutation(len(train))
        for start in range(0, len(perm), config.batch_size):
            chunk = [train[i] for i in perm[start:start + config.batch_size]]
            ids, mask = _pad([c[0] for c in chunk])
            y = torch.as_tensor([c[1] for c in chunk])
            loss = F.cross_entropy(model.forward_embedded(model.embed(ids), mask), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        logger.info("%s epoch %d loss %.4f", model.family, epoch + 1, total / len(train))
    model.eval()
    return model


def train_qa(model, train: Sequence[tuple[list[int], list[int], int, int]],
             config: VictimConfig = VictimConfig()):
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    model.train()
    for epoch in range(config.epochs):
        total = 0.0
        perm = rng.permutation(len(train))
        for start in range(0, len(perm), config.batch_size):
            chunk = [train[i] for i in perm[start:start + config.batch_size]]
            p, pm = _pad([c[0] for c in chunk])
            q, qm = _pad([c[1] for c in chunk])
            z1, z2 = model.forward_embedded(model.embed(p), pm, model.embed(q), qm)
            s = torch.as_tensor([c[2] for c in chunk])
            e = torch.as_tensor([c[3] for c in chunk])
            loss = F.cross_entropy(z1, s) + F.cross_entropy(z2, e)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        logger.info("%s epoch %d loss %.4f", model.family, epoch + 1, total / len(train))
    model.eval()
    return model


def sentiment_accuracy(model, data) -> float:
    return float(np.mean([predict_label(model, ids) == y for ids, y in data]))


def qa_exact_match(model, data) -> float:
    """Percentage of examples whose predicted span equals the gold span."""
    hits = [predict_span(model, p, q) == (s, e) for p, q, s, e in data]
    return 100.0 * float(np.mean(hits))


def train_victims(datasets: dict, vocab: Vocab, config: VictimConfig = VictimConfig(),
                  families: dict | None = None, table: EmbeddingTable | None = None) -> dict:
    """Train every requested family and enforce the clean-accuracy floors.

    ``datasets`` maps "cls"/"qa" to ``(train, heldout)`` pairs of id-encoded
    examples.  Returns ``{(task, family): model}``.
    """
    families = families or {"cls": ["attention", "recurrent"], "qa": ["recurrent", "conv"]}
    models, failures = {}, []
    for task, fams in families.items():
        if task not in datasets:
            continue
        train, held = datasets[task]
        for fam in fams:
            cls = FAMILIES[(task, fam)]
            torch.manual_seed(config.seed)
            if task == "cls":
                n_classes = max(y for _, y in train) + 1
                model = cls(vocab, n_classes=n_classes)
            else:
                model = cls(vocab)
            if table is not None:
                model.init_embeddings(table, freeze=config.freeze_embeddings)
            if task == "cls":
                train_sentiment(model, train, config)
                score = sentiment_accuracy(model, held)
                floor = config.cls_floor
            else:
                train_qa(model, train, config)
                score = qa_exact_match(model, held)
                floor = config.qa_floor
            model.clean_score = score
            logger.info("%s/%s held-out score %.3f (floor %.3f)", task, fam, score, floor)
            if score < floor:
                failures.append(f"{task}/{fam}: {score:.3f} < {floor}")
            models[(task, fam)] = model
    if failures:
        raise VictimTrainingError("clean-accuracy floor not reached: " + "; ".join(failures))
    return models


def save_victim(model, path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["vocab"] = np.array(model.vocab.itos)
    save_archive(path, arrays, {"kind": "victim", "task": model.task, "family": model.family,
                                "config": model.config(), "vocab_hash": model.vocab.digest(),
                                "clean_score": getattr(model, "clean_score", None)})


def load_victim(path):
    arrays, manifest = load_archive(path)
    if manifest.get("kind") != "victim":
        raise ValueError(f"{path} is not a victim checkpoint")
    vocab = Vocab([str(w) for w in arrays.pop("vocab")])
    model = FAMILIES[(manifest["task"], manifest["family"])](vocab, **manifest["config"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.clean_score = manifest.get("clean_score")
    model.eval()
    return model
