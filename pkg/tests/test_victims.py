import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from treeperturb.data import bundled_reviews, encode_cls
from treeperturb.treeio import Vocab
from treeperturb.victims import (DTYPE, SentimentAttention, SentimentRecurrent, SpanQAConv,
                                 SpanQARecurrent, VictimConfig, VictimTrainingError, best_span,
                                 check_soft_text, cls_logits, cls_logits_ids, load_victim,
                                 one_hot, predict_span, qa_exact_match, qa_logits, qa_logits_ids,
                                 save_victim, sentiment_accuracy, train_qa, train_sentiment,
                                 train_victims)

SMALL = Vocab.build([f"w{i}" for i in range(10)])


def small(cls, **kw):
    torch.manual_seed(0)
    return cls(SMALL, emb_dim=6, hidden=4, **kw)


CLS_MODELS = [SentimentAttention, SentimentRecurrent]
QA_MODELS = [SpanQARecurrent, SpanQAConv]


@pytest.mark.parametrize("cls", CLS_MODELS)
def test_cls_one_hot_equals_hard_lookup(cls):
    m = small(cls)
    ids = [3, 5, 2, 7]
    assert torch.equal(cls_logits(m, one_hot(ids, len(SMALL))), cls_logits_ids(m, ids))


@pytest.mark.parametrize("cls", QA_MODELS)
def test_qa_one_hot_equals_hard_lookup(cls):
    m = small(cls)
    p, q = [3, 5, 2, 7, 9], [4, 6]
    soft = qa_logits(m, one_hot(p, len(SMALL)), one_hot(q, len(SMALL)))
    hard = qa_logits_ids(m, p, q)
    assert all(torch.equal(a, b) for a, b in zip(soft, hard))


@pytest.mark.parametrize("cls", CLS_MODELS)
def test_uniform_rows_equal_mean_embedding(cls):
    m = small(cls)
    V = len(SMALL)
    rows = torch.full((3, V), 1 / V, dtype=DTYPE)
    mean = m.embed.weight.mean(dim=0).expand(1, 3, -1)
    direct = m.forward_embedded(mean, torch.ones(1, 3, dtype=torch.bool))[0]
    assert torch.allclose(cls_logits(m, rows), direct, atol=1e-14)


def test_attention_matches_hand_unrolled():
    m = small(SentimentAttention)
    ids = [2, 4, 4, 9]
    E = m.embed.weight.detach().numpy()[ids]
    W, b = m.proj.weight.detach().numpy(), m.proj.bias.detach().numpy()
    h = np.tanh(E @ W.T + b)
    a = h @ m.score.weight.detach().numpy()[0]
    alpha = np.exp(a - a.max()) / np.exp(a - a.max()).sum()
    pooled = (alpha[:, None] * h).sum(axis=0)
    z = m.head.weight.detach().numpy() @ pooled + m.head.bias.detach().numpy()
    np.testing.assert_allclose(cls_logits_ids(m, ids).numpy(), z, atol=1e-13)


def _np_conv(x, w, b):
    """'same' width-5 convolution over rows of x, then tanh."""
    n = x.shape[0]
    pad = np.vstack([np.zeros((2, x.shape[1])), x, np.zeros((2, x.shape[1]))])
    out = np.stack([np.einsum("ock,ck->o", w, pad[t:t + 5].T) + b for t in range(n)])
    return np.tanh(out)


def test_conv_qa_matches_hand_unrolled():
    m = small(SpanQAConv)
    p, q = [2, 3, 4, 5, 6, 7], [8, 9, 2]
    g = {k: v.detach().numpy() for k, v in m.state_dict().items()}
    P = _np_conv(g["embed.weight"][p], g["p_conv.weight"], g["p_conv.bias"])
    Q = _np_conv(g["embed.weight"][q], g["q_conv.weight"], g["q_conv.bias"])
    S = (P @ g["bilinear.weight"].T) @ Q.T
    A = np.exp(S - S.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    qa = A @ Q
    M = _np_conv(np.hstack([P, qa, P * qa]), g["m_conv.weight"], g["m_conv.bias"])
    z1 = M @ g["start.weight"][0] + g["start.bias"][0]
    z2 = M @ g["end.weight"][0] + g["end.bias"][0]
    got1, got2 = qa_logits_ids(m, p, q)
    np.testing.assert_allclose(got1.numpy(), z1, atol=1e-12)
    np.testing.assert_allclose(got2.numpy(), z2, atol=1e-12)


@pytest.mark.parametrize("cls", QA_MODELS)
def test_qa_shape_law(cls):
    m = small(cls)
    z1, z2 = qa_logits_ids(m, [2, 3, 4], [5])
    y1, y2 = qa_logits_ids(m, [2, 3, 4, 6, 7], [5])
    assert len(z1) == len(z2) == 3 and len(y1) == len(y2) == 5


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        cls_logits(small(SentimentAttention), torch.zeros(0, len(SMALL), dtype=DTYPE))
    with pytest.raises(ValueError):
        cls_logits_ids(small(SentimentAttention), [])
    with pytest.raises(ValueError):
        qa_logits(small(SpanQAConv), one_hot([2], len(SMALL)), torch.zeros(0, len(SMALL)))
    with pytest.raises(ValueError):
        check_soft_text(torch.full((2, 3), 0.5, dtype=DTYPE))


def _rel_fd_error(f, x, eps=1e-5):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    g = x.grad
    num = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            e = torch.zeros_like(x)
            e[idx] = eps
            num[idx] = (f(x + e) - f(x - e)) / (2 * eps)
    return ((g - num).norm() / num.norm()).item()


@pytest.mark.parametrize("cls", CLS_MODELS)
def test_cls_soft_gradient(cls):
    m = small(cls)
    rows = torch.softmax(torch.randn(4, len(SMALL), dtype=DTYPE), dim=1)
    w = torch.randn(3, dtype=DTYPE)
    assert _rel_fd_error(lambda r: (cls_logits(m, r) * w).sum(), rows) <= 1e-4


@pytest.mark.parametrize("cls", QA_MODELS)
def test_qa_soft_gradient(cls):
    m = small(cls)
    rows = torch.softmax(torch.randn(4, len(SMALL), dtype=DTYPE), dim=1)
    q = one_hot([3, 4], len(SMALL))

    def f(r):
        z1, z2 = qa_logits(m, r, q)
        return z1[1] - 0.5 * z2[3] + z1.sum() * 0.1
    assert _rel_fd_error(f, rows) <= 1e-4


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=25), st.integers(0, 10 ** 6),
       st.integers(0, 6))
def test_best_span_brute_force(z1, seed, max_span):
    n = len(z1)
    z2 = np.random.default_rng(seed).normal(size=n).round(2)
    a, b = torch.tensor(z1, dtype=DTYPE), torch.tensor(z2, dtype=DTYPE)
    best = max(((a[i] + b[j]).item(), -i, -j) for i in range(n)
               for j in range(i, min(n, i + max_span + 1)))
    i, j = best_span(a, b, max_span)
    assert i <= j <= i + max_span
    assert (a[i] + b[j]).item() == best[0]


def test_linearly_separable_two_class():
    rng = random.Random(0)
    pos, neg = ["w0", "w1", "w2"], ["w3", "w4", "w5"]
    filler = ["w6", "w7", "w8"]
    data = []
    for _ in range(200):
        y = rng.randrange(2)
        words = [rng.choice(pos if y else neg)] + [rng.choice(filler) for _ in range(3)]
        rng.shuffle(words)
        data.append((SMALL.ids(words), y))
    m = small(SentimentAttention, n_classes=2)
    train_sentiment(m, data, VictimConfig(epochs=15, lr=2e-2))
    assert sentiment_accuracy(m, data) == 1.0


def _cue_task(rng, n):
    """The answer is the word right after the cue word w9."""
    out = []
    for _ in range(n):
        p = [rng.choice(range(2, 9)) for _ in range(8)]
        k = rng.randrange(7)
        p[k] = SMALL.id("w9")
        out.append((p, [SMALL.id("w0")], k + 1, k + 1))
    return out


def test_qa_cue_task_is_learned():
    rng = random.Random(0)
    train, held = _cue_task(rng, 400), _cue_task(rng, 100)
    torch.manual_seed(0)
    m = SpanQAConv(SMALL, emb_dim=6, hidden=8)
    train_qa(m, train, VictimConfig(epochs=10, lr=1e-2))
    assert qa_exact_match(m, held) >= 90.0


def test_seed_changes_weights_not_accuracy(vocab):
    data = encode_cls(bundled_reviews("train")[:800], vocab)
    held = encode_cls(bundled_reviews("test"), vocab)
    accs, weights = [], []
    for seed in (0, 1):
        torch.manual_seed(seed)
        m = SentimentAttention(vocab, hidden=16)
        train_sentiment(m, data, VictimConfig(epochs=4, lr=1e-2, seed=seed))
        accs.append(sentiment_accuracy(m, held))
        weights.append(m.head.weight.detach().clone())
    assert not torch.equal(*weights)
    assert abs(accs[0] - accs[1]) <= 0.05


def test_floor_failure_is_reported():
    data = [(SMALL.ids(["w1", "w2"]), 0), (SMALL.ids(["w1", "w2"]), 1)]
    with pytest.raises(VictimTrainingError, match="cls/attention"):
        train_victims({"cls": (data, data)}, SMALL, VictimConfig(epochs=1, cls_floor=0.99),
                      {"cls": ["attention"]})


def test_victim_checkpoint_round_trip(tmp_path):
    m = small(SpanQAConv)
    m.clean_score = 77.0
    save_victim(m, tmp_path / "v.npz")
    back = load_victim(tmp_path / "v.npz")
    assert back.family == "conv" and back.clean_score == 77.0
    assert back.vocab.digest() == SMALL.digest()
    assert predict_span(back, [2, 3, 4], [5]) == predict_span(m, [2, 3, 4], [5])


def test_bundled_victims_meet_floors(victim_cls, victim_cls_rec, victim_qa, victim_qa_conv):
    assert victim_cls.clean_score >= 0.85 and victim_cls_rec.clean_score >= 0.85
    assert victim_qa.clean_score >= 60 and victim_qa_conv.clean_score >= 60
