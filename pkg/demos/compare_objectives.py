"""CE, CT and CTSD on the synthetic stacked-modifier corpus.

Every arm fine-tune a shared CE model on identical batches; the CE model is
also decoded with penalized sampling and contrastive search for reference.
This is a desk-scale run (a few minutes on one core), so expect small
differences rather than the large gaps reported for full-size systems.

Run: python demos/compare_objectives.py
"""

from ctsd.corpus import build_vocab, gen_synthetic, split_corpus
from ctsd.decoding import DecodeConfig
from ctsd.experiments import COMPARE_COLUMNS, compare
from ctsd.metrics import to_markdown
from ctsd.model import ModelConfig
from ctsd.objectives import LossConfig
from ctsd.trainer import TrainConfig

pairs = gen_synthetic(0, 1200, stack_ratio=0.5)
train_pairs, eval_pairs = split_corpus(pairs, 0.15, seed=0)
mc = ModelConfig(vocab_size=256, d_model=64, n_heads=4, n_layers=2, max_len=40, seed=0)
vocab = build_vocab(train_pairs, mc.vocab_size)
pre = TrainConfig(learning_rate=0.1, epochs=8, clip_norm=1.0, seed=0)
fine = TrainConfig(loss=LossConfig(W=1.0, N=10, T=5.0), learning_rate=0.03, epochs=4, clip_norm=1.0, seed=1)

res = compare(mc, fine, train_pairs, eval_pairs, ["CE", "CT", "CTSD"], DecodeConfig(), vocab,
              decode_baselines=["PS", "CS"], pretrain=pre)
print(to_markdown(COMPARE_COLUMNS, res.rows))
print("teacher-forced accuracy:")
for (split, method), acc in sorted(res.accuracy.items()):
    print(f"  {split:8} {method:6} {acc:.4f}")
