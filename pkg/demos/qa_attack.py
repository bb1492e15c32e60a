"""Question-based seeds and the two QA target modes.

    python demos/qa_attack.py
"""
from treeperturb.attack import AttackConfig
from treeperturb.autoenc import load_autoencoder
from treeperturb.data import bundled_embeddings, bundled_qa, data_path
from treeperturb.pipeline import attack_qa, contradiction_filter
from treeperturb.seedgen import question_to_statement
from treeperturb.treeio import nearest_neighbors
from treeperturb.victims import load_victim

# rule-based question rewriting, with and without a chosen answer
question = "Who ended the series in 1989 ?".split()
print(" ".join(question_to_statement(question, ["Donald", "Trump"]).tokens))
print(" ".join(question_to_statement(question).tokens))
odd = question_to_statement(["Frobnicate", "blarg", "?"], ["X"])
print(" ".join(odd.tokens), odd.warnings)

# fake answers come from the nearest neighbours of the predicted one
table = bundled_embeddings()
print("neighbours of 'powell':", nearest_neighbors("powell", table, 5))

# the filter protects the true answer
answer_sentence = "production was suspended in 1989 by jonathan powell .".split()
print(contradiction_filter("donald trump ends a program on 1988 .".split(), answer_sentence))
print(contradiction_filter("powell ends a program .".split(), answer_sentence))

ae = load_autoencoder(data_path("autoencoder.npz"))
victim = load_victim(data_path("victim_qa_recurrent.npz"))
ex = bundled_qa("attack")[3]
print("\nparagraph:", " ".join(ex.tokens))
print("question:", " ".join(ex.question_tokens))

res = attack_qa(ex, victim, ae, AttackConfig(), table=table, target_mode="position")
print("position-targeted:", " ".join(res.adversarial))
print("  answer", res.before["text"], "->", res.after["text"], "success", res.targeted_success)

res = attack_qa(ex, victim, ae, AttackConfig(), table=table, target_mode="answer",
                target_answer=["donald", "trump"])
print("answer-targeted:", " ".join(res.adversarial))
print("  answer", res.before["text"], "->", res.after["text"], "success", res.targeted_success)
