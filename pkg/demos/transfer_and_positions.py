"""Reuse adversarial text on another model, and move it around the paragraph.

    python demos/transfer_and_positions.py
"""
import random

from treeperturb.attack import AttackConfig
from treeperturb.autoenc import load_autoencoder
from treeperturb.data import bundled_reviews, data_path
from treeperturb.evaluation import (best_position, format_table, position_ablation,
                                    score_results, transfer_eval)
from treeperturb.pipeline import attack_classification
from treeperturb.victims import load_victim

ae = load_autoencoder(data_path("autoencoder.npz"))
white = load_victim(data_path("victim_cls_attention.npz"))
black = load_victim(data_path("victim_cls_recurrent.npz"))

reviews = bundled_reviews("attack")[:12]
results = [attack_classification(r, white, ae, AttackConfig(), random.Random(f"0:{r.id}"))
           for r in reviews]

# nothing is re-optimised here, the stored sentences are simply re-judged
reports = {"whitebox": score_results(results, "attention"),
           "transfer": transfer_eval(results, black, "recurrent")}
print(format_table(reports))

# front / mid / back insertion, judged by the whitebox model
ablation = position_ablation(results, white, "attention")
print(format_table(ablation))
print("most effective position:", best_position(ablation))
