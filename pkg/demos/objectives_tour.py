"""How CE, UL-T, CT and CTSD score the same repetitive target.

The negatives at each step are the tokens seen in the last N positions
(minus the gold token). CTSD scales each negative by how far back it was
(exp decay with temperature T) and by how alike the two attention rows are.

Run: python demos/objectives_tour.py
"""

import numpy as np

from ctsd import objectives as O
from ctsd.corpus import CorpusPair, build_vocab, encode_pairs
from ctsd.model import ModelConfig, forward_teacher_forced, init_params
from ctsd import numerics as nx

pair = CorpusPair("red cap red cap", "Kap Rot Kap Rot Kap Rot")
vocab = build_vocab([pair], 32)
src, tgt = encode_pairs(vocab, [pair])
params = init_params(ModelConfig(vocab_size=32, d_model=16, n_heads=2, n_layers=1, max_len=16, seed=3))
with nx.no_grad():
    tr = forward_teacher_forced(params, src[0], tgt[0])

print("target:", vocab.decode(tgt[0]))
t = 5
prefix = list(tgt[0][: t - 1])
negs = O.build_negative_set(prefix, t, int(tgt[0][t - 1]), N=4, atten=tr.atten.values[0])
print(f"\nnegatives at step {t} (gold {vocab.id_to_token[int(tgt[0][t - 1])]!r}):")
for n in negs:
    a_d = O.alpha_d(n.t_minus, t, T=2.0)
    a_s = O.alpha_s(n.atten_minus, tr.atten.values[0][t - 1])
    print(f"  {vocab.id_to_token[n.token_id]:6} at position {n.t_minus}: alpha_d {a_d:.3f}  alpha_s {a_s:.3f}  weight {a_d * a_s:.3f}")

print("\nlosses on the untrained model:")
print(f"  CE   {O.ce_loss(tr).item():.4f}")
print(f"  UL-T {O.ul_t_loss(tr, N=4).item():.4f}")
print(f"  CT   {O.ct_loss(tr, N=4).item():.4f}")
for T in (0.5, 2.0, 10.0, 1e6):
    print(f"  CTSD T={T:<8g} {O.ctsd_loss(tr, N=4, T=T).item():.4f}")
print("CTSD never exceeds CT and grows toward it as T rises.")
print("decay matrix (T=2):")
print(np.round(O.decay_matrix(5, 2.0), 3))
