"""Train the bundled autoencoder and victim checkpoints.

    python3 scripts/build_checkpoints.py [output_dir]

Defaults to the package data directory.  Deterministic for a fixed seed.
"""
import logging
import sys
import time
from pathlib import Path

from treeperturb.autoenc import TrainConfig, save_autoencoder, token_accuracy, train_autoencoder
from treeperturb.data import (bundled_embeddings, bundled_qa, bundled_reviews, bundled_vocab,
                              data_path, encode_cls, encode_qa)
from treeperturb.treeio import read_conllu
from treeperturb.victims import VictimConfig, save_victim, train_victims

AE_CONFIG = TrainConfig(hidden=128, word_dim=64, rel_dim=32, epochs=12, batch_size=16,
                        lr=1e-2, seed=0)
# per-family settings: the convolutional QA model needs frozen vectors and more epochs
VICTIM_CONFIGS = {
    ("cls", "attention"): VictimConfig(epochs=8, lr=5e-3),
    ("cls", "recurrent"): VictimConfig(epochs=8, lr=5e-3),
    ("qa", "recurrent"): VictimConfig(epochs=6, lr=5e-3, freeze_embeddings=True),
    ("qa", "conv"): VictimConfig(epochs=15, lr=1e-2, freeze_embeddings=True),
}


def main(out: Path) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    vocab, table = bundled_vocab(), bundled_embeddings()
    t0 = time.time()
    ae = train_autoencoder(read_conllu(data_path("pretrain.conllu")), AE_CONFIG, vocab)
    held = [s for ex in bundled_reviews("attack") for s in ex.sentences]
    print(f"autoencoder: {time.time() - t0:.0f}s, held-out token accuracy "
          f"{token_accuracy(held, ae):.4f}")
    save_autoencoder(ae, out / "autoencoder.npz")
    datasets = {"cls": (encode_cls(bundled_reviews("train"), vocab),
                        encode_cls(bundled_reviews("test"), vocab)),
                "qa": (encode_qa(bundled_qa("train"), vocab), encode_qa(bundled_qa("test"), vocab))}
    for (task, fam), cfg in VICTIM_CONFIGS.items():
        model = train_victims(datasets, vocab, cfg, {task: [fam]}, table)[(task, fam)]
        print(f"{task}/{fam}: clean score {model.clean_score:.3f}")
        save_victim(model, out / f"victim_{task}_{fam}.npz")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else data_path(""))
