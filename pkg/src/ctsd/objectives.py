"""Training objectives: CE, token-level unlikelihood, contrastive learning,
contrastive token learning, and its similarity-decay variant (CTSD).

All losses take a :class:`~ctsd.model.ForwardTrace` and a padded target
array ``tgt`` of shape ``(batch, T)``. Positions are 0-indexed here; the
negative window of position ``t`` is ``max(0, t - N) .. t - 1``.

Per-sequence values are means over non-pad target positions; the batch
value is the mean over sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .model import PAD, ConfigError, ForwardTrace
from .numerics import Tensor

KINDS = ("CE", "UL_T", "CL", "CT", "CTSD")
# auxiliary weight when W is left unset
DEFAULT_W = {"encoder_decoder": 1.0, "decoder_only": 0.02}
UL_CLAMP = 1.0 - 1e-9


@dataclass
class LossConfig:
    kind: str = "CE"
    N: int = 10
    T: float = 5.0
    W: float | None = None  # None: DEFAULT_W for the model's arch
    rho: float = 0.5
    negatives: str = "gold"  # or "model": previous argmax predictions
    alpha_s_grad: bool = True
    cl_pairing: str = "literal"  # (i, t - i); "current" pairs (i, t)

    def validate(self) -> "LossConfig":
        if self.kind not in KINDS:
            raise ConfigError("kind", f"must be one of {KINDS}")
        if not self.T > 0:
            raise ConfigError("T", "must be positive")
        if int(self.N) < 1:
            raise ConfigError("N", "must be at least 1")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError("rho", "must lie in [-1, 1]")
        if self.W is not None and self.W < 0:
            raise ConfigError("W", "must be non-negative")
        if self.negatives not in ("gold", "model"):
            raise ConfigError("negatives", "must be 'gold' or 'model'")
        if self.cl_pairing not in ("literal", "current"):
            raise ConfigError("cl_pairing", "must be 'literal' or 'current'")
        return self

    def resolved(self, arch: str = "encoder_decoder") -> "LossConfig":
        if self.W is not None:
            return self
        return replace(self, W=DEFAULT_W[arch])


@dataclass(frozen=True)
class NegativeOccurrence:
    token_id: int
    t_minus: int
    atten_minus: np.ndarray


def _targets(trace: ForwardTrace, tgt) -> np.ndarray:
    if tgt is None:
        return trace.targets
    tgt = np.asarray(tgt, dtype=np.int64)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    if tgt.shape != trace.logits.shape[:2]:
        raise nx.ShapeError("loss", tgt.shape, trace.logits.shape[:2])
    return tgt


def _mask(trace: ForwardTrace, tgt: np.ndarray, pad_mask) -> np.ndarray:
    if pad_mask is not None:
        m = np.asarray(pad_mask, dtype=bool)
        return m[None, :] if m.ndim == 1 else m
    if trace.mask is not None and trace.mask.shape == tgt.shape:
        return trace.mask
    return tgt != PAD


def _positional_mean(per_pos: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid positions within each sequence, then over the batch."""
    counts = mask.sum(axis=1)
    if not counts.any():
        raise ValueError("every target position is padding")
    w = np.where(counts[:, None] > 0, mask / np.maximum(counts, 1)[:, None], 0.0)
    return nx.tsum(per_pos * w) * (1.0 / np.count_nonzero(counts))


# ---------------------------------------------------------------------------
# negative sets and attenuation factors
# ---------------------------------------------------------------------------


def build_negative_set(gold_prefix, t: int, y_t: int, N: int, atten=None) -> list:
    """Occurrences in the ``N`` positions before step ``t`` (1-indexed).

    ``gold_prefix[k - 1]`` is the token at position ``k``. Occurrences of
    ``y_t`` itself are excluded; repeated tokens give separate entries.
    ``atten`` (rows indexed by 0-based position) supplies each entry's
    attention row when given.
    """
    out = []
    for pos in range(max(1, t - N), t):
        if pos > len(gold_prefix):
            break
        tok = int(gold_prefix[pos - 1])
        if tok == y_t:
            continue
        row = None if atten is None else np.asarray(atten[pos - 1])
        out.append(NegativeOccurrence(tok, pos, row))
    return out


def alpha_d(t_minus: int, t: int, T: float) -> float:
    if t_minus >= t:
        raise ValueError("t_minus must precede t")
    if not T > 0:
        raise ValueError("T must be positive")
    return math.exp((t_minus - t) / T)


def alpha_s(atten_minus, atten_t) -> float:
    a = np.asarray(atten_minus, dtype=np.float64)
    b = np.asarray(atten_t, dtype=np.float64)
    if a.shape != b.shape:
        raise nx.ShapeError("alpha_s", a.shape, b.shape)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def negative_mask(tgt: np.ndarray, mask: np.ndarray, N: int, neg_tokens: np.ndarray | None = None) -> np.ndarray:
    """``m[b, t, j]`` is true when position ``j`` is an active negative for ``t``."""
    neg_tokens = tgt if neg_tokens is None else neg_tokens
    T = tgt.shape[1]
    t_idx = np.arange(T)[:, None]
    j_idx = np.arange(T)[None, :]
    window = (j_idx < t_idx) & (j_idx >= t_idx - N)
    differs = neg_tokens[:, None, :] != tgt[:, :, None]
    return window[None] & differs & mask[:, :, None] & mask[:, None, :]


def decay_matrix(T_len: int, temperature: float) -> np.ndarray:
    """``exp((j - t) / T)`` at ``[t, j]`` for ``j < t``, zero elsewhere."""
    t_idx = np.arange(T_len)[:, None]
    j_idx = np.arange(T_len)[None, :]
    return np.where(j_idx < t_idx, np.exp(np.minimum(j_idx - t_idx, 0) / temperature), 0.0)


def attention_similarity(atten: Tensor) -> Tensor:
    """Pairwise cosine of attention rows, shape ``(B, T, T)``."""
    unit = nx.l2_normalize(atten, axis=-1)
    return nx.matmul(unit, nx.swap_last(unit))


def _neg_tokens(trace: ForwardTrace, tgt: np.ndarray, source: str) -> np.ndarray:
    if source == "model":
        return trace.logits.values.argmax(axis=-1)
    return tgt


def _gather_negative_logits(logits: Tensor, neg_tokens: np.ndarray) -> Tensor:
    """``z[b, t, j] = logits[b, t, neg_tokens[b, j]]``."""
    B, T, _ = logits.shape
    idx = np.broadcast_to(neg_tokens[:, None, :], (B, T, neg_tokens.shape[1]))
    return nx.take_along_axis(logits, idx, axis=-1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def ce_loss(trace: ForwardTrace, tgt=None, pad_mask=None) -> Tensor:
    tgt = _targets(trace, tgt)
    mask = _mask(trace, tgt, pad_mask)
    logp = nx.log_softmax(trace.logits, axis=-1)
    picked = nx.take_along_axis(logp, tgt[..., None], axis=-1)
    return _positional_mean(-nx.reshape(picked, tgt.shape), mask)


def ul_t_loss(trace: ForwardTrace, tgt=None, N: int = 10, pad_mask=None, negatives: str = "gold") -> Tensor:
    """Token-level unlikelihood over the windowed negative occurrences."""
    tgt = _targets(trace, tgt)
    mask = _mask(trace, tgt, pad_mask)
    neg = _neg_tokens(trace, tgt, negatives)
    active = negative_mask(tgt, mask, N, neg)
    probs = nx.softmax(trace.logits, axis=-1)
    p_neg = nx.masked_fill(_gather_negative_logits(probs, neg), ~active, 0.0)
    per_pos = -nx.tsum(nx.log(1.0 - nx.minimum(p_neg, UL_CLAMP)), axis=-1)
    return _positional_mean(per_pos, mask)


def cl_loss(trace: ForwardTrace, tgt=None, rho: float = 0.5, pad_mask=None, pairing: str = "literal") -> Tensor:
    """Hinge on hidden-state cosine: ``max(0, rho - 1 + s(h_i, h_partner))``.

    With ``pairing="literal"`` position ``i`` (1-indexed) is paired with
    ``t - i``; self-pairs are exact (s = 1, no gradient).
    """
    tgt = _targets(trace, tgt)
    mask = _mask(trace, tgt, pad_mask)
    B, T = tgt.shape
    unit = nx.l2_normalize(trace.hidden, axis=-1)
    sims = nx.matmul(unit, nx.swap_last(unit))
    t_idx = np.arange(T)[:, None]
    i_idx = np.arange(T)[None, :]
    valid = np.broadcast_to(i_idx < t_idx, (T, T))
    if pairing == "literal":
        partner = np.where(valid, t_idx - i_idx - 1, 0)
    else:
        partner = np.broadcast_to(t_idx, (T, T))
    rows = np.where(valid, i_idx, 0)
    s = sims[:, rows, partner]
    self_pair = valid & (rows == partner)
    s = nx.masked_fill(s, self_pair[None], 1.0)
    hinge = nx.relu(s + (rho - 1.0))
    pair_ok = valid[None] & mask[:, :, None] & mask[:, None, :]
    per_t_count = pair_ok.sum(axis=-1)
    pos_ok = per_t_count > 0
    weights = np.where(pair_ok, 1.0 / np.maximum(per_t_count, 1)[..., None], 0.0)
    per_pos = nx.tsum(hinge * weights, axis=-1)
    counts = pos_ok.sum(axis=1)
    if not counts.any():
        return nx.tsum(per_pos) * 0.0
    return _positional_mean(per_pos, pos_ok)


def _contrastive(trace, tgt, N, weights_fn, pad_mask, negatives) -> Tensor:
    tgt = _targets(trace, tgt)
    mask = _mask(trace, tgt, pad_mask)
    neg = _neg_tokens(trace, tgt, negatives)
    active = negative_mask(tgt, mask, N, neg)
    logits = trace.logits
    pos = nx.take_along_axis(logits, tgt[..., None], axis=-1)
    diff = _gather_negative_logits(logits, neg) - pos
    weight = weights_fn(active)
    if isinstance(weight, Tensor):
        on = active & (weight.values > 0)
    else:
        on = active & (weight > 0)
    # log(1 + sum w e^d) = m + log(e^-m + sum w e^(d-m)) with a constant shift m
    shift = np.maximum(np.where(on, diff.values, -np.inf).max(axis=-1, initial=-np.inf), 0.0)[..., None]
    safe = nx.masked_fill(diff, ~on, -1e30)
    terms = nx.exp(safe - shift) * weight
    inner = nx.tsum(terms, axis=-1, keepdims=True) + np.exp(-shift)
    per_pos = nx.reshape(nx.log(inner) + shift, tgt.shape)
    return _positional_mean(per_pos, mask)


def ct_loss(trace: ForwardTrace, tgt=None, N: int = 10, pad_mask=None, negatives: str = "gold") -> Tensor:
    return _contrastive(trace, tgt, N, lambda active: active.astype(np.float64), pad_mask, negatives)


def ctsd_loss(
    trace: ForwardTrace,
    tgt=None,
    N: int = 10,
    T: float = 5.0,
    pad_mask=None,
    negatives: str = "gold",
    alpha_s_grad: bool = True,
) -> Tensor:
    """CT with every negative occurrence weighted by ``alpha_d * alpha_s``."""
    if trace.atten is None:
        raise ValueError("trace carries no attention rows")
    if trace.atten.shape[:2] != trace.logits.shape[:2]:
        raise nx.ShapeError("ctsd_loss", trace.atten.shape, trace.logits.shape)
    if not T > 0:
        raise ValueError("T must be positive")
    length = trace.logits.shape[1]
    decay = decay_matrix(length, T)[None]
    atten = trace.atten if alpha_s_grad else trace.atten.detach()
    sim = attention_similarity(atten)

    def weights(active):
        return nx.masked_fill(sim, ~active, 0.0) * decay

    return _contrastive(trace, tgt, N, weights, pad_mask, negatives)


def aux_loss(trace: ForwardTrace, tgt, cfg: LossConfig, pad_mask=None) -> Tensor:
    if cfg.kind == "UL_T":
        return ul_t_loss(trace, tgt, cfg.N, pad_mask, cfg.negatives)
    if cfg.kind == "CL":
        return cl_loss(trace, tgt, cfg.rho, pad_mask, cfg.cl_pairing)
    if cfg.kind == "CT":
        return ct_loss(trace, tgt, cfg.N, pad_mask, cfg.negatives)
    if cfg.kind == "CTSD":
        return ctsd_loss(trace, tgt, cfg.N, cfg.T, pad_mask, cfg.negatives, cfg.alpha_s_grad)
    raise ConfigError("kind", f"no auxiliary loss for {cfg.kind!r}")


def loss_components(trace: ForwardTrace, tgt, cfg: LossConfig, pad_mask=None):
    """Return ``(total, ce, aux)``; ``aux`` is None for pure CE."""
    cfg.validate()
    if cfg.W is None:
        cfg = cfg.resolved(trace.arch)
    ce = ce_loss(trace, tgt, pad_mask)
    if cfg.kind == "CE":
        return ce, ce, None
    aux = aux_loss(trace, tgt, cfg, pad_mask)
    if cfg.W == 0:
        return ce, ce, aux
    return ce + aux * cfg.W, ce, aux


def total_loss(trace: ForwardTrace, tgt, cfg: LossConfig, pad_mask=None) -> Tensor:
    return loss_components(trace, tgt, cfg, pad_mask)[0]
