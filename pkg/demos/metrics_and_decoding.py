"""Repetition metrics on hand-made outputs, then four decoders on a model
that has learned to loop.

Run: python demos/metrics_and_decoding.py   (about 20 seconds)
"""

from ctsd import metrics as M
from ctsd.corpus import CorpusPair, build_vocab
from ctsd.decoding import DecodeConfig, decode
from ctsd.model import ModelConfig
from ctsd.trainer import TrainConfig, train

print("== metrics ==")
for hyp in ["a b c d e f", "a b a b a b", "the red cap the red cap the red cap"]:
    r = M.compute_report([hyp])
    print(f"{hyp!r:42} rep-2 {r.rep2:6.2f}  rep-3 {r.rep3:6.2f}  rep-w {r.rep_w:6.2f}  rep-r {r.rep_r:6.2f}  div {r.div:.2f}")

# A target language whose references repeat themselves: a greedy decoder
# trained on it falls into the same loop on unseen inputs.
pairs = [
    CorpusPair("red cap", "Kap Kap Kap Rot Rot Rot"),
    CorpusPair("blue hat", "Hut Hut Hut Blau Blau Blau"),
    CorpusPair("green bag", "Tasche Tasche Grün Grün"),
    CorpusPair("red hat", "Hut Hut Rot Rot"),
]
vocab = build_vocab(pairs, 48)
cfg = ModelConfig(vocab_size=48, d_model=32, n_heads=4, n_layers=2, max_len=24, seed=0)
params, log = train(cfg, TrainConfig(learning_rate=0.05, epochs=300, clip_norm=1.0), pairs, vocab)
print(f"\ntrained {len(log)} steps, final CE {log[-1]['ce_loss']:.3f}")

src = vocab.encode("blue bag")
print("\n== decoding 'blue bag' ==")
for name, dc in [
    ("greedy", DecodeConfig(max_new_tokens=16)),
    ("3-gram block", DecodeConfig(strategy="greedy_ngram_block", block_n=3, max_new_tokens=16)),
    ("penalized sampling", DecodeConfig(strategy="penalized_sampling", ps_theta=1.5, max_new_tokens=16)),
    ("contrastive search", DecodeConfig(strategy="contrastive_search", cs_alpha=0.6, k=4, max_new_tokens=16)),
]:
    out, _ = decode(params, src, dc)
    text = vocab.decode(out)
    print(f"{name:20} {text!r:52} rep-2 {M.rep_n(text, 2) * 100:5.1f}")
