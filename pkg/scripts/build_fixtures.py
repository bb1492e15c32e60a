"""Regenerate the bundled fixture data under src/treeperturb/data/.

Every sentence comes from a small template grammar, so its dependency parse is
known by construction.  Run from the repository root:

    python scripts/build_fixtures.py
"""
import json
import random
from pathlib import Path

import numpy as np

from treeperturb.treeio import DepTree, serialize_conllu, validate

DATA = Path(__file__).resolve().parents[1] / "src" / "treeperturb" / "data"

# ---- review lexicon: word -> sentiment intensity -----------------------------
ADJ = {
    "amazing": 3, "excellent": 3, "perfect": 3, "fantastic": 3, "wonderful": 3,
    "good": 1, "nice": 1, "fine": 1, "decent": 1, "friendly": 1,
    "large": 0, "small": 0, "new": 0, "quiet": 0, "busy": 0, "simple": 0,
    "bland": -1, "slow": -1, "bad": -1, "dull": -1, "noisy": -1,
    "awful": -3, "terrible": -3, "horrible": -3, "disgusting": -3, "dreadful": -3,
}
VERB = {"loved": 3, "enjoyed": 1, "liked": 1, "tried": 0, "ordered": 0,
        "disliked": -1, "hated": -3}
ADV = {"definitely": 1, "probably": 0, "never": -1}
NOUN = ["food", "service", "staff", "pizza", "coffee", "pasta", "waiter",
        "menu", "decor", "music", "burger", "room", "price", "dessert", "bread"]
DAY = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]

# (words, heads, rels); "{N}", "{A}", "{V}", "{D}", "{R}" are slots
REVIEW_TEMPLATES = {
    "was": (["the", "{N}", "was", "{A}", "."], [2, 4, 4, 0, 4],
            ["det", "nsubj", "cop", "root", "punct"]),
    "very": (["the", "{N}", "was", "very", "{A}", "."], [2, 5, 5, 5, 0, 5],
             ["det", "nsubj", "cop", "advmod", "root", "punct"]),
    "had": (["we", "had", "a", "{A}", "{N}", "."], [2, 0, 5, 5, 2, 2],
            ["nsubj", "root", "det", "amod", "obj", "punct"]),
    "verb": (["i", "{V}", "the", "{N}", "."], [2, 0, 4, 2, 2],
             ["nsubj", "root", "det", "obj", "punct"]),
    "place": (["this", "place", "is", "{A}", "."], [2, 4, 4, 0, 4],
              ["det", "nsubj", "cop", "root", "punct"]),
    "served": (["they", "served", "{A}", "{N}", "."], [2, 0, 4, 2, 2],
               ["nsubj", "root", "amod", "obj", "punct"]),
    "back": (["i", "would", "{R}", "come", "back", "."], [4, 4, 4, 0, 4, 4],
             ["nsubj", "aux", "advmod", "root", "compound:prt", "punct"]),
    "went": (["we", "went", "there", "on", "{D}", "."], [2, 0, 2, 5, 2, 2],
             ["nsubj", "root", "advmod", "case", "obl", "punct"]),
}
SENTIMENT_TEMPLATES = ["was", "very", "had", "verb", "place", "served"]

# ---- QA lexicon: synonym groups ----------------------------------------------
PERSONS = ["powell", "trump", "smith", "jones", "brown", "miller", "davis",
           "wilson", "moore", "taylor", "clark", "lewis", "walker", "hall",
           "young", "king", "wright", "scott", "green", "baker", "adams",
           "nelson", "carter", "mitchell"]
# first names that only ever appear in targeted answers ("donald trump")
EXTRA_PERSONS = ["donald"]
QA_VERBS = [["repaired", "fixed", "mended"], ["bought", "purchased", "acquired"],
            ["painted", "colored", "decorated"], ["cleaned", "washed", "scrubbed"],
            ["built", "constructed", "assembled"], ["found", "discovered", "located"],
            ["sold", "traded", "auctioned"], ["stole", "took", "grabbed"]]
QA_NOUNS = [["car", "vehicle", "automobile"], ["house", "home", "residence"],
            ["boat", "ship", "vessel"], ["table", "desk", "bench"],
            ["bike", "bicycle", "cycle"], ["painting", "picture", "portrait"],
            ["lamp", "light", "lantern"], ["clock", "watch", "timer"],
            ["guitar", "violin", "banjo"], ["bridge", "tower", "gate"]]
QA_ADJS = [["old", "aged", "ancient"], ["red", "crimson", "scarlet"],
           ["big", "huge", "giant"], ["tiny", "little", "miniature"],
           ["broken", "damaged", "ruined"], ["shiny", "polished", "gleaming"]]

QA_WITH_ADJ = (["{P}", "{V}", "the", "{A}", "{N}", "."], [2, 0, 5, 5, 2, 2],
               ["nsubj", "root", "det", "amod", "obj", "punct"])
QA_NO_ADJ = (["{P}", "{V}", "the", "{N}", "."], [2, 0, 4, 2, 2],
             ["nsubj", "root", "det", "obj", "punct"])


def fill(template, slots):
    words, heads, rels = template
    out = [slots.get(w, w) for w in words]
    tree = DepTree.from_lists(out, heads, rels)
    assert not validate(tree), out
    return tree


def review_sentence(rng, name=None):
    name = name or rng.choice(list(REVIEW_TEMPLATES))
    slots = {"{N}": rng.choice(NOUN), "{A}": rng.choice(list(ADJ)),
             "{V}": rng.choice(list(VERB)), "{D}": rng.choice(DAY),
             "{R}": rng.choice(list(ADV))}
    tree = fill(REVIEW_TEMPLATES[name], slots)
    score = sum(ADJ.get(w, 0) + VERB.get(w, 0) + ADV.get(w, 0) for w in tree.words)
    return tree, score


def label_for(score):
    return 2 if score > 0 else 0 if score < 0 else 1


def review(rng, n_sent, templates=None):
    sents, total = [], 0
    for _ in range(n_sent):
        tree, s = review_sentence(rng, rng.choice(templates) if templates else None)
        sents.append(tree)
        total += s
    return sents, total


def review_record(rid, sents, score):
    return {"id": rid, "text": " ".join(w for t in sents for w in t.words),
            "label": label_for(score), "score": score,
            "sentences": [t.to_json() for t in sents]}


def make_reviews(rng):
    by_label = {0: [], 1: [], 2: []}
    while min(len(v) for v in by_label.values()) < 900:
        sents, score = review(rng, rng.randint(2, 4))
        by_label[label_for(score)].append((sents, score))
    pool = []
    for lab in (0, 1, 2):
        pool.extend(by_label[lab][:900])
    rng.shuffle(pool)
    train = [review_record(f"rev-train-{i}", s, sc) for i, (s, sc) in enumerate(pool[:2400])]
    test = [review_record(f"rev-test-{i}", s, sc) for i, (s, sc) in enumerate(pool[2400:2700])]

    # attack set: mildly polarised reviews whose sentences all carry a sentiment slot
    attack = []
    while len(attack) < 50:
        sents, score = review(rng, rng.randint(2, 3), SENTIMENT_TEMPLATES)
        if score in (-2, -1, 1, 2) and all(
                any(ADJ.get(w, 0) or VERB.get(w, 0) for w in t.words) for t in sents):
            attack.append(review_record(f"rev-attack-{len(attack)}", sents, score))
    return train, test, attack


def qa_sentence(rng, person, vgroup, ngroup, agroup, with_adj, pick=None):
    pick = pick or (lambda grp: rng.choice(grp))
    slots = {"{P}": person, "{V}": pick(vgroup), "{N}": pick(ngroup)}
    if with_adj:
        slots["{A}"] = pick(agroup)
        return fill(QA_WITH_ADJ, slots), slots
    return fill(QA_NO_ADJ, slots), slots


def qa_example(rng, qid):
    n = rng.randint(3, 4)
    persons = rng.sample(PERSONS, n)
    vgroups = rng.sample(QA_VERBS, n)
    ngroups = rng.sample(QA_NOUNS, n)
    agroups = [rng.choice(QA_ADJS) for _ in range(n)]
    sents, slots = [], []
    for i in range(n):
        with_adj = rng.random() < 0.6
        tree, sl = qa_sentence(rng, persons[i], vgroups[i], ngroups[i], agroups[i], with_adj)
        sents.append(tree)
        slots.append(sl)
    k = rng.randrange(n)
    sl = slots[k]

    def other(group, used):
        return rng.choice([w for w in group if w != used])

    qwords = ["who", other(vgroups[k], sl["{V}"]), "the"]
    if "{A}" in sl:
        qwords.append(other(agroups[k], sl["{A}"]))
    qwords += [other(ngroups[k], sl["{N}"]), "?"]
    if "{A}" in sl:
        question = DepTree.from_lists(qwords, [2, 0, 5, 5, 2, 2],
                                      ["nsubj", "root", "det", "amod", "obj", "punct"])
    else:
        question = DepTree.from_lists(qwords, [2, 0, 4, 2, 2],
                                      ["nsubj", "root", "det", "obj", "punct"])
    assert not validate(question)
    return {"id": qid,
            "paragraph": " ".join(w for t in sents for w in t.words),
            "question": " ".join(qwords),
            "sentences": [t.to_json() for t in sents],
            "question_tree": question.to_json(),
            "answer": {"sentence": k, "start": 0, "end": 0, "text": persons[k]}}


def make_qa(rng):
    train = [qa_example(rng, f"qa-train-{i}") for i in range(2000)]
    test = [qa_example(rng, f"qa-test-{i}") for i in range(200)]
    attack = [qa_example(rng, f"qa-attack-{i}") for i in range(30)]
    return train, test, attack


def all_words():
    words = set()
    for tpl in REVIEW_TEMPLATES.values():
        words.update(w for w in tpl[0] if not w.startswith("{"))
    words.update(ADJ, VERB, ADV, NOUN, DAY, PERSONS)
    for groups in (QA_VERBS, QA_NOUNS, QA_ADJS):
        for g in groups:
            words.update(g)
    words.update(["who", "?", "someone", "what", "when", "where", "did"])
    return sorted(words)


def make_embeddings(nprng, dim=50):
    """Word vectors with the cluster structure a pre-trained table would show:
    synonyms close, same-category words moderately close, the rest unrelated."""
    def unit(v):
        return v / np.linalg.norm(v)

    cats = {}

    def centroid(key, scale):
        if key not in cats:
            cats[key] = scale * unit(nprng.standard_normal(dim))
        return cats[key]

    groups = {}
    for kind, gs in (("verb", QA_VERBS), ("noun", QA_NOUNS), ("adj", QA_ADJS)):
        for g in gs:
            for w in g:
                groups[w] = (kind, g[0])
    vectors = {}
    for w in all_words():
        if w in groups:
            kind, head = groups[w]
            v = centroid(kind, 1.0) + centroid(head, 1.6) + 0.45 * unit(nprng.standard_normal(dim))
        elif w in PERSONS:
            v = centroid("person", 1.5) + 0.9 * unit(nprng.standard_normal(dim))
        elif w in ADJ:
            s = ADJ[w]
            v = centroid("review-adj", 1.0) + 0.5 * s * centroid("polarity", 1.0) \
                + 0.6 * unit(nprng.standard_normal(dim))
        elif w in VERB:
            v = centroid("review-verb", 1.0) + 0.5 * VERB[w] * centroid("polarity", 1.0) \
                + 0.6 * unit(nprng.standard_normal(dim))
        elif w in NOUN:
            v = centroid("review-noun", 1.2) + 0.9 * unit(nprng.standard_normal(dim))
        elif w in DAY:
            v = centroid("day", 1.5) + 0.5 * unit(nprng.standard_normal(dim))
        else:
            v = unit(nprng.standard_normal(dim))
        vectors[w] = v
    # drawn last so the vectors above do not depend on this list
    for w in EXTRA_PERSONS:
        vectors[w] = centroid("person", 1.5) + 0.9 * unit(nprng.standard_normal(dim))
    return dict(sorted(vectors.items()))


def write_embeddings(path, vectors):
    with open(path, "w", encoding="utf-8") as fh:
        for w, v in vectors.items():
            fh.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def pretrain_sentences(rng, n, reviews, qa):
    """Sentences drawn from every shape the attacks will seed with."""
    out = []
    for r in reviews:
        out.extend(DepTree.from_json(s) for s in r["sentences"])
    for ex in qa:
        out.extend(DepTree.from_json(s) for s in ex["sentences"])
    rng.shuffle(out)
    out = out[:n // 2]
    while len(out) < n:
        if rng.random() < 0.5:
            out.append(review_sentence(rng)[0])
        else:
            tpl = rng.choice([True, False])
            out.append(qa_sentence(rng, rng.choice(PERSONS), rng.choice(QA_VERBS),
                                   rng.choice(QA_NOUNS), rng.choice(QA_ADJS), tpl)[0])
    return out


def main():
    rng = random.Random(20201118)
    nprng = np.random.default_rng(20201118)
    DATA.mkdir(parents=True, exist_ok=True)

    rev_train, rev_test, rev_attack = make_reviews(rng)
    qa_train, qa_test, qa_attack = make_qa(rng)
    write_jsonl(DATA / "reviews_train.jsonl", rev_train)
    write_jsonl(DATA / "reviews_test.jsonl", rev_test)
    write_jsonl(DATA / "reviews_attack.jsonl", rev_attack)
    write_jsonl(DATA / "qa_train.jsonl", qa_train)
    write_jsonl(DATA / "qa_test.jsonl", qa_test)
    write_jsonl(DATA / "qa_attack.jsonl", qa_attack)

    corpus = pretrain_sentences(rng, 200, rev_train[:40], qa_train[:30])
    (DATA / "corpus.conllu").write_text(serialize_conllu(corpus), encoding="utf-8")
    big = pretrain_sentences(rng, 4000, rev_train, qa_train)
    (DATA / "pretrain.conllu").write_text(serialize_conllu(big), encoding="utf-8")

    vectors = make_embeddings(nprng)
    write_embeddings(DATA / "embeddings.txt", vectors)
    base = sorted(w for w in vectors if w not in EXTRA_PERSONS)
    small_words = sorted(rng.sample(base, 50))
    write_embeddings(DATA / "embeddings_small.txt", {w: vectors[w] for w in small_words})
    print("wrote fixtures to", DATA)


if __name__ == "__main__":
    main()
