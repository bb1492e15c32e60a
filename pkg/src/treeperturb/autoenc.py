"""Tree-structured autoencoder.

The encoder is a Child-Sum Tree-LSTM run bottom-up over the dependency tree;
each child's message is its hidden state concatenated with the embedding of
its relation to the parent.  The decoder starts from the root code and walks
the same tree in level order: a child's state comes from an LSTM cell fed the
parent's state, the parent's emitted word embedding and the relation
embedding, and its word is read off an output projection.

All trees in a batch are processed together, one depth level at a time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_archive, save_archive
from .treeio import DepTree, TreeError, Vocab, check, level_order

logger = logging.getLogger(__name__)

UNK_REL = "<unk-rel>"
DTYPE = torch.float64


class _Forest:
    """Index bookkeeping for a batch of trees, grouped by depth."""

    def __init__(self, trees: Sequence[DepTree], vocab: Vocab, rel_index: dict):
        self.trees = list(trees)
        offsets, words, rels, parents, depths = [], [], [], [], []
        n = 0
        for tree in self.trees:
            check(tree)
            offsets.append(n)
            depth = tree.depth()
            for tok in tree.tokens:
                words.append(vocab.id(tok.surface))
                rels.append(rel_index.get(tree.relation[tok.index], 0))
                h = tree.head[tok.index]
                parents.append(-1 if h == 0 else n + h - 1)
                depths.append(depth[tok.index])
            n += len(tree)
        self.n = n
        self.offsets = offsets
        self.word_ids = torch.tensor(words, dtype=torch.long)
        self.rel_ids = torch.tensor(rels, dtype=torch.long)
        depths = np.asarray(depths)
        parents = np.asarray(parents)
        self.levels = []
        self.parent_local = []
        local = np.zeros(n, dtype=np.int64)
        for d in range(int(depths.max()) + 1 if n else 0):
            nodes = np.flatnonzero(depths == d)
            local[nodes] = np.arange(len(nodes))
            self.levels.append(torch.as_tensor(nodes))
            if d == 0:
                self.parent_local.append(None)
            else:
                self.parent_local.append(torch.as_tensor(local[parents[nodes]]))
        self.order = torch.cat(self.levels) if self.levels else torch.zeros(0, dtype=torch.long)
        # position of each node (global surface numbering) inside level order
        self.inverse = torch.empty_like(self.order)
        self.inverse[self.order] = torch.arange(n)

    def split(self, rows: torch.Tensor) -> list[torch.Tensor]:
        """Surface-ordered rows -> one tensor per tree."""
        bounds = self.offsets + [self.n]
        return [rows[bounds[i]:bounds[i + 1]] for i in range(len(self.trees))]


class AutoencoderParams(nn.Module):
    """All learnable weights of the tree encoder and decoder."""

    def __init__(self, vocab: Vocab, relations: Sequence[str], hidden: int = 300,
                 word_dim: int = 100, rel_dim: int = 50):
        super().__init__()
        self.vocab = vocab
        rels = [UNK_REL] + sorted(r for r in set(relations) if r != UNK_REL)
        self.relations = rels
        self.rel_index = {r: i for i, r in enumerate(rels)}
        self.hidden, self.word_dim, self.rel_dim = hidden, word_dim, rel_dim
        H, E, R, V = hidden, word_dim, rel_dim, len(vocab)
        self.rel_embed = nn.Embedding(len(rels), R)
        self.enc_embed = nn.Embedding(V, E)
        self.enc_x = nn.Linear(E, 4 * H)             # i, o, u, f from the word
        self.enc_iou = nn.Linear(H + R, 3 * H, bias=False)
        self.enc_f = nn.Linear(H + R, H, bias=False)
        self.dec_embed = nn.Embedding(V, E)
        self.dec_cell = nn.LSTMCell(H + E + R, H)
        self.out = nn.Linear(H, V)
        self.to(DTYPE)
        self.history: list[dict] = []

    def forest(self, trees: Sequence[DepTree]) -> _Forest:
        return _Forest(trees, self.vocab, self.rel_index)

    # -- encoder ---------------------------------------------------------------
    def encode_forest(self, forest: _Forest, delta: torch.Tensor | None = None):
        """Returns (h, c) for every node in global surface numbering.

        ``delta`` (one row per node) is added to each node's hidden state right
        after its cell, so parents aggregate the shifted states.
        """
        H = self.hidden
        wx = self.enc_x(self.enc_embed(forest.word_ids))
        depth = len(forest.levels)
        hs: list = [None] * depth
        cs: list = [None] * depth
        for d in reversed(range(depth)):
            nodes = forest.levels[d]
            n = len(nodes)
            x_part = wx[nodes]
            if d + 1 < depth:
                kids = forest.levels[d + 1]
                pl = forest.parent_local[d + 1]
                msg = torch.cat([hs[d + 1], self.rel_embed(forest.rel_ids[kids])], dim=1)
                msum = msg.new_zeros(n, msg.shape[1]).index_add(0, pl, msg)
                f = torch.sigmoid(x_part[pl, 3 * H:] + self.enc_f(msg))
                fc = msg.new_zeros(n, H).index_add(0, pl, f * cs[d + 1])
                iou = x_part[:, :3 * H] + self.enc_iou(msum)
            else:
                iou = x_part[:, :3 * H]
                fc = None
            i, o, u = iou.split(H, dim=1)
            c = torch.sigmoid(i) * torch.tanh(u)
            if fc is not None:
                c = c + fc
            h = torch.sigmoid(o) * torch.tanh(c)
            if delta is not None:
                h = h + delta[nodes]
            hs[d], cs[d] = h, c
        h_all = torch.cat(hs)[forest.inverse]
        c_all = torch.cat(cs)[forest.inverse]
        return h_all, c_all

    # -- decoder ---------------------------------------------------------------
    def decode_forest(self, forest: _Forest, roots: torch.Tensor, how: str,
                      tau: float | None = None):
        """Level-order decode from root codes (one row per tree).

        how: "teacher" (gold parent words), "hard" (argmax parent words) or
        "soft" (probability-weighted parent embeddings at temperature tau).
        Returns logits (and probs for soft) in level order.
        """
        logits_levels, probs_levels, ids_levels = [], [], []
        h = roots
        c = torch.zeros_like(roots)
        for d, nodes in enumerate(forest.levels):
            if d > 0:
                pl = forest.parent_local[d]
                inp = torch.cat([h[pl], w[pl], self.rel_embed(forest.rel_ids[nodes])], dim=1)
                h, c = self.dec_cell(inp, (h[pl], c[pl]))
            logits = self.out(h)
            logits_levels.append(logits)
            if how == "teacher":
                w = self.dec_embed(forest.word_ids[nodes])
            elif how == "hard":
                ids = logits.argmax(dim=1)
                ids_levels.append(ids)
                w = self.dec_embed(ids)
            elif how == "soft":
                p = torch.softmax(logits / tau, dim=1)
                probs_levels.append(p)
                w = p @ self.dec_embed.weight
            else:
                raise ValueError(how)
        out = {"logits": torch.cat(logits_levels)}
        if probs_levels:
            out["probs"] = torch.cat(probs_levels)
        if ids_levels:
            out["ids"] = torch.cat(ids_levels)
        return out

    def root_rows(self, forest: _Forest, h_all: torch.Tensor) -> torch.Tensor:
        return h_all[forest.levels[0]]

    def manifest(self) -> dict:
        return {"kind": "autoencoder", "hidden": self.hidden, "word_dim": self.word_dim,
                "rel_dim": self.rel_dim, "vocab_hash": self.vocab.digest(),
                "relations": self.relations}


@dataclass
class NodeStates:
    """Hidden and memory vectors per node; row ``i - 1`` belongs to token ``i``."""

    h: torch.Tensor
    c: torch.Tensor

    def __len__(self):
        return self.h.shape[0]

    def __getitem__(self, index: int):
        return self.h[index - 1], self.c[index - 1]


@dataclass
class LatentCode:
    mode: str                       # "sent" or "word"
    payload: torch.Tensor           # (H,) or (n, H)
    base: NodeStates | None = None  # unperturbed states, needed to re-aggregate word codes

    def __post_init__(self):
        if self.mode not in ("sent", "word"):
            raise ValueError(f"unknown latent mode {self.mode!r}")
        if self.mode == "sent" and self.payload.dim() != 1:
            raise ValueError("sent code must be a single vector")
        if self.mode == "word" and self.payload.dim() != 2:
            raise ValueError("word code must be one vector per token")

    def shifted(self, delta: torch.Tensor) -> "LatentCode":
        if delta.shape != self.payload.shape:
            raise ValueError(f"perturbation shape {tuple(delta.shape)} does not match "
                             f"code shape {tuple(self.payload.shape)}")
        return LatentCode(self.mode, self.payload + delta, self.base)


@dataclass
class DecodeOutput:
    """Per-node decoder output in level order.

    ``rows`` holds token ids (hard) or vocabulary distributions (soft).
    """

    order: list[int]
    rows: torch.Tensor
    soft: bool

    def surface_rows(self) -> torch.Tensor:
        pos = torch.as_tensor([i - 1 for i in self.order])
        inv = torch.empty_like(pos)
        inv[pos] = torch.arange(len(pos))
        return self.rows[inv]

    def surface_ids(self) -> list[int]:
        rows = self.surface_rows()
        return (rows.argmax(dim=1) if self.soft else rows).tolist()

    def tokens(self, vocab: Vocab) -> list[str]:
        return vocab.words(self.surface_ids())

    @classmethod
    def from_surface(cls, order, surface: torch.Tensor, soft: bool) -> "DecodeOutput":
        return cls(list(order), surface[torch.as_tensor([i - 1 for i in order])], soft)


def encode(tree: DepTree, params: AutoencoderParams) -> NodeStates:
    forest = params.forest([tree])
    h, c = params.encode_forest(forest)
    return NodeStates(h, c)


def make_latent(states: NodeStates, tree: DepTree, mode: str) -> LatentCode:
    if len(states) != len(tree):
        raise ValueError("states do not cover the tree")
    if mode == "sent":
        return LatentCode("sent", states.h[tree.root - 1], states)
    return LatentCode("word", states.h, states)


def reencode_from_states(tree: DepTree, perturbed: torch.Tensor, params: AutoencoderParams,
                         states: NodeStates | None = None) -> torch.Tensor:
    """New root vector from perturbed per-token vectors.

    Each token's vector is taken as given; the parent aggregation is rerun so
    that a shift in any token's vector propagates up through its ancestors.
    With no shift the result equals the encoder's root state.
    """
    if perturbed.shape != (len(tree), params.hidden):
        raise ValueError(f"expected ({len(tree)}, {params.hidden}) token vectors, "
                         f"got {tuple(perturbed.shape)}")
    forest = params.forest([tree])
    if states is None:
        states = encode(tree, params)
    delta = perturbed - states.h.detach()
    h, _ = params.encode_forest(forest, delta)
    return h[tree.root - 1]


def root_code(code: LatentCode, tree: DepTree, params: AutoencoderParams) -> torch.Tensor:
    if code.mode == "sent":
        return code.payload
    if code.payload.shape[0] != len(tree):
        raise TreeError(f"word code has {code.payload.shape[0]} vectors for a "
                        f"{len(tree)}-token tree")
    return reencode_from_states(tree, code.payload, params, code.base)


def decode_hard(code: LatentCode, tree: DepTree, params: AutoencoderParams) -> DecodeOutput:
    root = root_code(code, tree, params)
    forest = params.forest([tree])
    out = params.decode_forest(forest, root.unsqueeze(0), "hard")
    return DecodeOutput([int(i) + 1 for i in forest.order], out["ids"], soft=False)


def decode_soft(code: LatentCode, tree: DepTree, params: AutoencoderParams,
                tau: float) -> DecodeOutput:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    root = root_code(code, tree, params)
    forest = params.forest([tree])
    out = params.decode_forest(forest, root.unsqueeze(0), "soft", tau)
    return DecodeOutput([int(i) + 1 for i in forest.order], out["probs"], soft=True)


def _forest_loss(params: AutoencoderParams, forest: _Forest) -> torch.Tensor:
    h, _ = params.encode_forest(forest)
    out = params.decode_forest(forest, params.root_rows(forest, h), "teacher")
    gold = forest.word_ids[forest.order]
    return F.cross_entropy(out["logits"], gold)


def recon_loss(tree: DepTree, params: AutoencoderParams) -> torch.Tensor:
    """Mean per-node negative log-likelihood under teacher forcing."""
    return _forest_loss(params, params.forest([tree]))


def reconstruct(trees: Sequence[DepTree], params: AutoencoderParams) -> list[list[int]]:
    """Hard-decode the unperturbed code of each tree; token ids in surface order."""
    forest = params.forest(trees)
    with torch.no_grad():
        h, _ = params.encode_forest(forest)
        out = params.decode_forest(forest, params.root_rows(forest, h), "hard")
    ids = out["ids"][forest.inverse]
    return [row.tolist() for row in forest.split(ids)]


def token_accuracy(trees: Sequence[DepTree], params: AutoencoderParams) -> float:
    hit = total = 0
    for tree, ids in zip(trees, reconstruct(trees, params)):
        gold = params.vocab.ids(tree.words)
        hit += sum(int(a == b) for a, b in zip(ids, gold))
        total += len(gold)
    return hit / total


@dataclass
class TrainConfig:
    hidden: int = 300
    word_dim: int = 100
    rel_dim: int = 50
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-6
    clip: float = 5.0
    seed: int = 0


def train_autoencoder(corpus: Sequence[DepTree], config: TrainConfig = TrainConfig(),
                      vocab: Vocab | None = None) -> AutoencoderParams:
    """Fit encoder and decoder by minimising mean reconstruction loss with Adam."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    if vocab is None:
        vocab = Vocab.build(w for t in corpus for w in t.words)
    relations = {r for t in corpus for r in t.rels}
    torch.manual_seed(config.seed)
    params = AutoencoderParams(vocab, relations, config.hidden, config.word_dim,
                               config.rel_dim)
    opt = torch.optim.Adam(params.parameters(), lr=config.lr,
                           weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    params.history = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(corpus))
        total, count = 0.0, 0
        params.train()
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            forest = params.forest([corpus[i] for i in idx])
            loss = _forest_loss(params, forest)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss in epoch {epoch}, batch starting with sentence {int(idx[0])}")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params.parameters(), config.clip)
            opt.step()
            total += loss.item() * forest.n
            count += forest.n
        params.history.append({"epoch": epoch, "loss": round(total / count, 6)})
        logger.info("epoch %d loss %.6f", epoch, total / count)
    params.train_config = asdict(config)
    params.eval()
    return params


def save_autoencoder(params: AutoencoderParams, path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in params.state_dict().items()}
    arrays["vocab"] = np.array(params.vocab.itos)
    save_archive(path, arrays, dict(params.manifest(), history=params.history))


def load_autoencoder(path) -> AutoencoderParams:
    arrays, manifest = load_archive(path)
    if manifest.get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    vocab = Vocab([str(w) for w in arrays.pop("vocab")])
    if vocab.digest() != manifest["vocab_hash"]:
        raise ValueError("vocabulary hash mismatch in checkpoint")
    params = AutoencoderParams(vocab, manifest["relations"], manifest["hidden"],
                               manifest["word_dim"], manifest["rel_dim"])
    params.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    params.history = manifest.get("history", [])
    params.eval()
    return params
