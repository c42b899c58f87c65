"""Token contributions, attention similarity and decay for one sentence,
written as CSV and SVG heatmaps.

Run: python demos/attribution_heatmaps.py [out_dir]   (default: demo_out/)
"""

import sys
from pathlib import Path

from ctsd import numerics as nx
from ctsd.attribution import adjacent_similarity, attenuation_matrices, contribution_matrix, heatmap_svg, matrix_csv
from ctsd.corpus import CorpusPair, build_vocab, encode_pairs
from ctsd.model import ModelConfig, forward_teacher_forced
from ctsd.trainer import TrainConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

pairs = [
    CorpusPair("red cap red cap", "Kap Kap Rot Rot"),
    CorpusPair("blue hat", "Hut Hut Hut Blau Blau"),
    CorpusPair("green bag", "Tasche Grün Grün Grün"),
]
vocab = build_vocab(pairs, 48)
cfg = ModelConfig(vocab_size=48, d_model=32, n_heads=4, n_layers=2, max_len=16, seed=0)
params, _ = train(cfg, TrainConfig(learning_rate=0.05, epochs=400, clip_norm=1.0), pairs, vocab)

src, tgt = encode_pairs(vocab, pairs[:1])
cm = contribution_matrix(params, src[0], tgt[0], vocab)
with nx.no_grad():
    tr = forward_teacher_forced(params, src[0], tgt[0])
sim, decay = attenuation_matrices(tr, T=2.0)
labels = cm.row_labels

for stem, values, cols, title in (
    ("contribution", cm.values, cm.col_labels, cm.method),
    ("attention_similarity", sim, labels, "attention similarity"),
    ("decay", decay, labels, "exponential decay, T=2"),
):
    (out / f"{stem}.csv").write_text(matrix_csv(values, labels, cols, title), encoding="utf-8")
    (out / f"{stem}.svg").write_text(heatmap_svg(values, labels, cols, title), encoding="utf-8")
    print(f"wrote {out / stem}.csv/.svg  {values.shape}")

adj = adjacent_similarity(tr)
print(f"adjacent hidden-state cosine: same token {adj['same_mean']:.3f}, different token {adj['diff_mean']:.3f}")
