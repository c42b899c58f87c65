"""Token-contribution matrices, adjacent hidden-state similarity and the
CTSD attenuation matrices.

The contribution matrix is an ALTI-style (simplified) attribution: each
attention sublayer's output at a query is split into per-key summands plus
the residual stream, every summand is scored by how much it moves the
output in L1 distance, and the per-layer matrices are chained by rollout.
"""

from __future__ import annotations

import csv
import html
import io
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelParams, forward_teacher_forced

LABEL = "ALTI-style (simplified)"


@dataclass
class ContributionMatrix:
    values: np.ndarray
    row_labels: list
    col_labels: list
    method: str = LABEL

    @property
    def shape(self):
        return self.values.shape


def summand_scores(output: np.ndarray, summands: np.ndarray) -> np.ndarray:
    """``max(0, |o|_1 - |o - v_j|_1)`` for every summand ``v_j`` of ``o``.

    ``output`` has shape ``(Q, d)``, ``summands`` ``(Q, K, d)``.
    """
    base = np.abs(output).sum(-1, keepdims=True)
    dist = np.abs(output[:, None, :] - summands).sum(-1)
    return np.maximum(0.0, base - dist)


def layer_contributions(residual, probs, value_out, bias=None) -> tuple:
    """Per-key and residual contribution scores for one attention sublayer.

    ``probs`` is ``(H, Q, K)``, ``value_out`` ``(H, K, d)`` (values already
    passed through the output projection), ``residual`` ``(Q, d)``.
    Returns unnormalized ``(key_scores (Q, K), residual_scores (Q,))``.
    """
    summands = np.einsum("hqk,hkd->qkd", probs, value_out)
    out = residual + summands.sum(axis=1)
    if bias is not None:
        out = out + bias
    keys = summand_scores(out, summands)
    res = summand_scores(out, residual[:, None, :])[:, 0]
    return keys, res


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-normalize; an all-zero row puts its mass on the diagonal."""
    m = np.array(m, dtype=np.float64)
    sums = m.sum(axis=1)
    for i in np.flatnonzero(sums <= 0):
        m[i] = 0.0
        m[i, i] = 1.0
    return m / m.sum(axis=1, keepdims=True)


def rollout(layers) -> np.ndarray:
    """Chain row-stochastic layer matrices from first to last: ``M_L ... M_1``."""
    layers = list(layers)
    out = np.eye(layers[0].shape[0])
    for m in layers:
        out = m @ out
    return out


def _layer_matrix(size, q_off, k_off, keys, res):
    m = np.eye(size)
    nq, nk = keys.shape
    block = np.zeros((nq, size))
    block[:, k_off : k_off + nk] = keys
    block[np.arange(nq), q_off + np.arange(nq)] += res
    m[q_off : q_off + nq] = _normalize_block(block, q_off)
    return m


def _normalize_block(block, q_off):
    sums = block.sum(axis=1)
    out = block.copy()
    for i in np.flatnonzero(sums <= 0):
        out[i] = 0.0
        out[i, q_off + i] = 1.0
    return out / out.sum(axis=1, keepdims=True)


def contribution_matrix(params: ModelParams, src, tgt, vocab=None) -> ContributionMatrix:
    """Attribution of every predicted target token to source and prefix tokens."""
    with nx.no_grad():
        trace = forward_teacher_forced(params, src, tgt, retain=True)
    if not trace.records:
        raise ValueError("forward trace did not retain attention records")
    name = (lambda i: vocab.id_to_token[int(i)]) if vocab is not None else (lambda i: str(int(i)))
    src, tgt = list(src), list(tgt)
    mats = []
    if params.config.arch == "encoder_decoder":
        S, T = len(src), len(tgt)
        size = S + T
        for rec in trace.records:
            keys, res = layer_contributions(rec["residual"][0], rec["probs"][0], rec["value_out"][0], rec["bias"])
            if rec["kind"] == "enc_self":
                mats.append(_layer_matrix(size, 0, 0, keys, res))
            elif rec["kind"] == "dec_self":
                mats.append(_layer_matrix(size, S, S, keys, res))
            else:
                mats.append(_layer_matrix(size, S, 0, keys, res))
        rows = rollout(mats)[S:]
        cols = [name(i) for i in src] + [name(i) for i in [1] + tgt[:-1]]
    else:
        seq = trace.layout["seq"][0]
        size = len(seq)
        for rec in trace.records:
            keys, res = layer_contributions(rec["residual"][0], rec["probs"][0], rec["value_out"][0], rec["bias"])
            mats.append(_layer_matrix(size, 0, 0, keys, res))
        lo, hi = trace.layout["out_slice"]
        rows = rollout(mats)[lo:hi]
        cols = [name(i) for i in seq]
    rows = np.maximum(rows, 0.0)
    rows = rows / rows.sum(axis=1, keepdims=True)
    return ContributionMatrix(rows, [name(i) for i in tgt], cols)


def adjacent_similarity(trace, tokens=None, index: int = 0) -> dict:
    """Cosine of consecutive final-layer hidden states for one sequence.

    Returns the per-pair list plus means over same-token and different-token
    neighbours (None when a group is empty).
    """
    hidden = trace.hidden.values[index] if hasattr(trace, "hidden") else np.asarray(trace)
    if tokens is None:
        tokens = trace.targets[index]
        n = int(trace.mask[index].sum())
    else:
        n = len(tokens)
    hidden = hidden[:n]
    if n < 2:
        raise ValueError("need at least two positions")
    pairs, same, diff = [], [], []
    for t in range(n - 1):
        c = _cos(hidden[t], hidden[t + 1])
        pairs.append((t, c))
        (same if tokens[t] == tokens[t + 1] else diff).append(c)
    return {
        "pairs": pairs,
        "same_mean": float(np.mean(same)) if same else None,
        "diff_mean": float(np.mean(diff)) if diff else None,
    }


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def attenuation_matrices(trace, T: float, index: int = 0) -> tuple:
    """``(similarity, decay)``: attention-row cosines and ``exp(-|i - j| / T)``."""
    if not T > 0:
        raise ValueError("T must be positive")
    atten = trace.atten.values[index] if hasattr(trace, "atten") else np.asarray(trace, dtype=np.float64)
    if hasattr(trace, "mask"):
        atten = atten[: int(trace.mask[index].sum())]
    n = atten.shape[0]
    norms = np.linalg.norm(atten, axis=1)
    unit = np.where(norms[:, None] > 0, atten / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    sim = unit @ unit.T
    upper = np.triu(sim, k=1)
    sim = upper + upper.T
    np.fill_diagonal(sim, 1.0)
    idx = np.arange(n)
    decay = np.exp(-np.abs(idx[:, None] - idx[None, :]) / T)
    return sim, decay


def pca_2d(states: np.ndarray) -> np.ndarray:
    """Project row vectors onto their first two principal components."""
    x = np.asarray(states, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    return x @ (comps * signs[:, None]).T


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def matrix_csv(values: np.ndarray, row_labels, col_labels, title: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if title:
        w.writerow([f"# {title}"])
    w.writerow([""] + list(col_labels))
    for label, row in zip(row_labels, values):
        w.writerow([label] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


def _color(v: float, lo: float, hi: float) -> str:
    t = 0.0 if hi <= lo else (v - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    # white -> dark blue
    r = int(round(255 - t * (255 - 8)))
    g = int(round(255 - t * (255 - 48)))
    b = int(round(255 - t * (255 - 107)))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values: np.ndarray, row_labels, col_labels, title: str = "", cell: int = 22) -> str:
    """Standalone SVG heatmap (row-major, labels on both axes)."""
    values = np.asarray(values, dtype=np.float64)
    n_r, n_c = values.shape
    left, top = 110, 110 if title else 90
    width = left + n_c * cell + 20
    height = top + n_r * cell + 20
    lo, hi = float(values.min()), float(values.max())
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{left}" y="16" font-size="12">{html.escape(title)}</text>')
    for j, lab in enumerate(col_labels):
        x = left + j * cell + cell / 2
        parts.append(
            f'<text x="{x:.1f}" y="{top - 6}" transform="rotate(-60 {x:.1f} {top - 6})">{html.escape(str(lab))}</text>'
        )
    for i, lab in enumerate(row_labels):
        y = top + i * cell + cell * 0.7
        parts.append(f'<text x="{left - 6}" y="{y:.1f}" text-anchor="end">{html.escape(str(lab))}</text>')
        for j in range(n_c):
            v = values[i, j]
            parts.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{_color(v, lo, hi)}"><title>{v:.4f}</title></rect>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
