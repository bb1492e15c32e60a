"""Walk through one word-mode attack on the bundled sentiment classifier.

    python demos/sentiment_attack.py
"""
import random

from treeperturb.attack import AttackConfig
from treeperturb.autoenc import decode_hard, encode, load_autoencoder, make_latent
from treeperturb.data import bundled_reviews, data_path
from treeperturb.pipeline import attack_classification, target_class
from treeperturb.seedgen import seed_cls
from treeperturb.victims import load_victim, predict_label

ae = load_autoencoder(data_path("autoencoder.npz"))
victim = load_victim(data_path("victim_cls_attention.npz"))
review = bundled_reviews("attack")[0]
print("review:", " ".join(review.tokens))
print("gold label", review.label, "victim says", predict_label(victim, victim.vocab.ids(review.tokens)))

# the seed is one of the review's own sentences
rng = random.Random(f"0:{review.id}")
seed = seed_cls(review.sentences, rng)
print("seed:", " ".join(seed.tokens))

# an unperturbed code decodes back to the seed
code = make_latent(encode(seed.tree, ae), seed.tree, "word")
print("decoded seed:", " ".join(decode_hard(code, seed.tree, ae).tokens(ae.vocab)))

# push the prediction to the opposite end of the scale
print("target class", target_class(review.label, victim.n_classes))
result = attack_classification(review, victim, ae, AttackConfig(save_trace=True),
                               random.Random(f"0:{review.id}"))
print("adversarial sentence:", " ".join(result.adversarial))
print("prediction", result.before, "->", result.after,
      "targeted" if result.targeted_success else "not targeted",
      f"after {result.outer_iterations} round(s), ||z*|| = {result.norm:.3f}")

# the objective over the first round: norm plus c times the margin term
for row in result.trace[:101:20]:
    print(f"  step {row['step']:3d}  tau {row['tau']:.3f}  f {row['f']:+.3f}  "
          f"norm {row['norm']:.3f}  hit {row['success']}")
