"""Inference-time decoding, including the decode-stage repetition suppressors.

``decode`` works with any object exposing ``step(src, prefix) -> (logits,
hidden, atten)``; contrastive search additionally uses
``step_all(src, prefix)`` (a no-grad trace over the whole prefix) when it is
available. :class:`~ctsd.model.ModelParams` provides both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BOS, EOS, ConfigError

STRATEGIES = ("greedy", "top_k", "penalized_sampling", "contrastive_search", "greedy_ngram_block")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    max_new_tokens: int = 40
    k: int = 4
    ps_theta: float = 1.2
    cs_alpha: float = 0.6
    block_n: int = 3
    seed: int = 0
    cs_use_embeddings: bool = False

    def validate(self) -> "DecodeConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {STRATEGIES}")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens", "must be positive")
        if self.k < 1:
            raise ConfigError("k", "must be positive")
        if not self.ps_theta > 1.0:
            raise ConfigError("ps_theta", "must be greater than 1")
        if not 0.0 <= self.cs_alpha <= 1.0:
            raise ConfigError("cs_alpha", "must lie in [0, 1]")
        if self.block_n < 1:
            raise ConfigError("block_n", "must be positive")
        return self


def _softmax(z: np.ndarray) -> np.ndarray:
    finite = np.isfinite(z)
    m = z[finite].max()
    e = np.where(finite, np.exp(np.where(finite, z, m) - m), 0.0)
    return e / e.sum()


def _argmax(x: np.ndarray) -> int:
    # first maximum, i.e. lowest id on ties
    return int(np.argmax(x))


def penalize_logits(logits: np.ndarray, generated, theta: float) -> np.ndarray:
    """Divide the logits of generated ids (except EOS) by ``theta``.

    Negative logits are first shifted up so the smallest is 0; dividing a
    negative logit would raise its probability instead of lowering it.
    """
    shifted = logits - min(float(logits.min()), 0.0)
    ids = sorted({int(t) for t in generated if int(t) != EOS})
    out = shifted.copy()
    out[ids] = shifted[ids] / theta
    return out


def blocked_tokens(generated, n: int) -> set:
    """Ids that would complete an n-gram already present in ``generated``."""
    if len(generated) < n - 1:
        return set()
    if n == 1:
        return set(generated)
    ctx = tuple(generated[len(generated) - (n - 1) :])
    banned = set()
    for i in range(len(generated) - n + 1):
        if tuple(generated[i : i + n - 1]) == ctx:
            banned.add(generated[i + n - 1])
    banned.discard(EOS)
    return banned


def _top_k(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps lower ids first among equal probabilities
    return np.argsort(-probs, kind="stable")[:k]


def decode(model, src_tokens, cfg: DecodeConfig):
    """Generate after ``[BOS]``; returns ``(tokens, diagnostics)``.

    ``tokens`` excludes BOS and the terminating EOS. Each diagnostics entry
    records the step, the chosen id, its probability before and after
    suppression, and the suppression term that was active.
    """
    cfg.validate()
    if len(src_tokens) == 0:
        raise ValueError("empty source")
    rng = np.random.default_rng(cfg.seed)
    prefix = [BOS]
    generated: list = []
    diags: list = []
    for step in range(cfg.max_new_tokens):
        logits, h, _ = model.step(src_tokens, prefix)
        logits = np.asarray(logits, dtype=np.float64)
        base = _softmax(logits)
        entry = {"step": step, "strategy": cfg.strategy}
        if cfg.strategy == "greedy":
            tok = _argmax(logits)
            post = base
            entry["suppression"] = None
        elif cfg.strategy == "top_k":
            cand = _top_k(base, cfg.k)
            p = base[cand] / base[cand].sum()
            tok = int(cand[rng.choice(len(cand), p=p)])
            post = np.zeros_like(base)
            post[cand] = p
            entry["suppression"] = None
        elif cfg.strategy == "penalized_sampling":
            pen = penalize_logits(logits, generated, cfg.ps_theta)
            post = _softmax(pen)
            tok = int(rng.choice(len(post), p=post))
            entry["suppression"] = {"theta": cfg.ps_theta, "penalized": sorted({int(t) for t in generated} - {EOS})}
        elif cfg.strategy == "greedy_ngram_block":
            banned = blocked_tokens(generated, cfg.block_n)
            masked = logits.copy()
            if banned:
                masked[sorted(banned)] = -np.inf
            fallback = not np.isfinite(masked).any()
            if fallback:
                masked = logits
            tok = _argmax(masked)
            post = _softmax(masked)
            entry["suppression"] = {"blocked": sorted(int(b) for b in banned), "fallback": bool(fallback)}
        else:
            tok, post, info = _contrastive_step(model, src_tokens, prefix, base, cfg)
            entry["suppression"] = info
        entry["token"] = int(tok)
        entry["p_pre"] = float(base[tok])
        entry["p_post"] = float(post[tok])
        diags.append(entry)
        if tok == EOS:
            break
        generated.append(int(tok))
        prefix.append(int(tok))
    return generated, diags


def _cosine_max(v: np.ndarray, rows: np.ndarray) -> float:
    if rows.size == 0:
        return 0.0
    nv = np.linalg.norm(v)
    nr = np.linalg.norm(rows, axis=1)
    ok = (nr > 0) & (nv > 0)
    if not ok.any():
        return 0.0
    sims = np.where(ok, rows @ v / np.where(ok, nr * nv, 1.0), 0.0)
    return float(sims.max())


def _contrastive_step(model, src, prefix, probs, cfg):
    cand = _top_k(probs, cfg.k)
    scores = []
    penalties = []
    for v in cand:
        v = int(v)
        if cfg.cs_use_embeddings:
            emb = model.tensors["tok_emb"].values
            h_v, prev = emb[v], emb[np.asarray(prefix)]
        elif hasattr(model, "step_all"):
            trace = model.step_all(src, prefix + [v])
            states = trace.hidden.values[0]
            h_v, prev = states[-1], states[:-1]
        else:
            _, h_v, _ = model.step(src, prefix + [v])
            prev = np.asarray([model.step(src, prefix[: i + 1])[1] for i in range(len(prefix))])
        pen = _cosine_max(np.asarray(h_v), np.asarray(prev))
        penalties.append(pen)
        scores.append((1.0 - cfg.cs_alpha) * probs[v] - cfg.cs_alpha * pen)
    best = int(np.argmax(np.asarray(scores)))
    tok = int(cand[best])
    post = np.zeros_like(probs)
    post[cand] = probs[cand] / probs[cand].sum()
    info = {"alpha": cfg.cs_alpha, "candidates": [int(c) for c in cand], "degeneration_penalty": penalties}
    return tok, post, info


def decode_corpus(model, sources, cfg: DecodeConfig) -> tuple:
    """Decode each source with seeds ``cfg.seed + index``."""
    outs, diags = [], []
    for i, src in enumerate(sources):
        c = DecodeConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        toks, d = decode(model, src, c)
        outs.append(toks)
        diags.append(d)
    return outs, diags
