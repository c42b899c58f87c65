"""Repetition and translation-quality metrics.

Token sequences are lists of hashable tokens (strings or ids). Corpus-level
functions accept either token lists or whitespace-separated strings.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

REP_W_WINDOW = 16

# column order of the comparison tables
REPORT_COLUMNS = ["BLEU (add-1)↑", "Rouge-L↑", "rep-2↓", "rep-3↓", "rep-w↓", "rep-r↓", "div↑"]
SCREEN_COLUMNS = ["rep-2↓", "rep-3↓", "rep-w↓", "rep-r↓", "div↑", "uniq-1↑"]


def tokenize(text: str) -> list:
    return text.strip().split()


def _tok(s) -> list:
    return tokenize(s) if isinstance(s, str) else list(s)


def _ngrams(tokens: Sequence, n: int) -> list:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def rep_n(tokens, n: int) -> float:
    """Fraction of duplicated n-grams in one sequence."""
    if n < 1:
        raise ValueError("n must be at least 1")
    grams = _ngrams(_tok(tokens), n)
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


def rep_w_sentence(tokens, w: int = REP_W_WINDOW) -> float:
    """Share of tokens that already appeared among the previous ``w`` tokens."""
    if w < 1:
        raise ValueError("w must be at least 1")
    toks = _tok(tokens)
    if not toks:
        return 0.0
    hits = sum(1 for t, tok in enumerate(toks) if tok in toks[max(0, t - w) : t])
    return hits / len(toks)


def rep_w(corpus, w: int = REP_W_WINDOW) -> float:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    return math.fsum(rep_w_sentence(s, w) for s in corpus) / len(corpus)


def rep_r(tokens) -> float:
    """Share of positions that belong to a bigram occurring more than once."""
    toks = _tok(tokens)
    if not toks:
        return 0.0
    counts = Counter(_ngrams(toks, 2))
    hit = 0
    for i in range(len(toks)):
        fwd = i + 1 < len(toks) and counts[(toks[i], toks[i + 1])] > 1
        bwd = i > 0 and counts[(toks[i - 1], toks[i])] > 1
        hit += fwd or bwd
    return hit / len(toks)


def diversity(reps: Sequence[float]) -> float:
    """Product of ``1 - rep_n`` over the given orders (normally n = 2, 3, 4)."""
    out = 1.0
    for r in reps:
        if not 0.0 <= r <= 1.0:
            raise ValueError("rep values must be fractions in [0, 1]")
        out *= 1.0 - r
    return out


def uniq_unigrams(corpus) -> int:
    vocab = set()
    for s in corpus:
        vocab.update(_tok(s))
    return len(vocab)


def bleu(candidates, references) -> float:
    """Corpus BLEU-4 with add-one smoothing on n >= 2, scaled to [0, 100]."""
    cands = [_tok(c) for c in candidates]
    refs = [_tok(r) for r in references]
    if not cands:
        raise ValueError("empty candidate corpus")
    if len(cands) != len(refs):
        raise ValueError("candidate and reference counts differ")
    matches = [0] * 4
    totals = [0] * 4
    for c, r in zip(cands, refs):
        for n in range(1, 5):
            cg = Counter(_ngrams(c, n))
            rg = Counter(_ngrams(r, n))
            matches[n - 1] += sum(min(k, rg[g]) for g, k in cg.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    cand_len = sum(map(len, cands))
    ref_len = sum(map(len, refs))
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, 4):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return 100.0 * bp * math.exp(log_p / 4)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate, reference) -> float:
    c, r = _tok(candidate), _tok(reference)
    if not r:
        raise ValueError("empty reference")
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rc = lcs / len(c), lcs / len(r)
    return 2 * p * rc / (p + rc)


def rouge_l(candidates, references) -> float:
    """Mean LCS F1 over aligned pairs; also accepts a single pair of strings."""
    if isinstance(candidates, str) and isinstance(references, str):
        return rouge_l_pair(candidates, references)
    pairs = list(zip(candidates, references))
    if not pairs:
        raise ValueError("empty corpus")
    return math.fsum(rouge_l_pair(c, r) for c, r in pairs) / len(pairs)


@dataclass
class MetricsReport:
    rep2: float
    rep3: float
    rep4: float
    rep_w: float
    rep_r: float
    div: float
    uniq1: int
    bleu: float | None
    rouge_l: float | None
    n_sentences: int

    def row(self) -> list:
        """Values in :data:`REPORT_COLUMNS` order."""
        return [self.bleu, self.rouge_l, self.rep2, self.rep3, self.rep_w, self.rep_r, self.div]

    def screen_row(self) -> list:
        return [self.rep2, self.rep3, self.rep_w, self.rep_r, self.div, self.uniq1]

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_report(hyps, refs=None, w: int = REP_W_WINDOW) -> MetricsReport:
    """All corpus metrics; rep-2/3/4 are in percent, everything else fractional."""
    toks = [_tok(h) for h in hyps]
    if not toks:
        raise ValueError("empty corpus")
    n = len(toks)
    reps = [math.fsum(rep_n(t, k) for t in toks) / n for k in (2, 3, 4)]
    b = r = None
    if refs is not None:
        refs = list(refs)
        b = bleu(toks, refs)
        r = rouge_l(toks, refs)
    return MetricsReport(
        rep2=100.0 * reps[0],
        rep3=100.0 * reps[1],
        rep4=100.0 * reps[2],
        rep_w=rep_w(toks, w),
        rep_r=math.fsum(rep_r(t) for t in toks) / n,
        div=diversity(reps),
        uniq1=uniq_unigrams(toks),
        bleu=b,
        rouge_l=r,
        n_sentences=n,
    )


def top_percentile_indices(hyps, percentile: float, w: int = REP_W_WINDOW) -> list:
    """Indices of the ``percentile`` % most repetitive sentences by rep-w."""
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    scores = [rep_w_sentence(h, w) for h in hyps]
    keep = math.ceil(len(scores) * percentile / 100.0)
    # stable: ties keep corpus order
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return sorted(order[:keep])


def top_percentile_screen(hyps, percentile: float, refs=None, w: int = REP_W_WINDOW) -> MetricsReport:
    hyps = list(hyps)
    idx = top_percentile_indices(hyps, percentile, w)
    if not idx:
        raise ValueError("screened subset is empty")
    sub_refs = None if refs is None else [list(refs)[i] for i in idx]
    return compute_report([hyps[i] for i in idx], sub_refs, w)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.4f}"


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def to_markdown(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(v) if not isinstance(v, str) else v for v in row) + " |")
    return "\n".join(lines) + "\n"
