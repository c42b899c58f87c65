"""Tiny pre-norm transformer in two layouts: encoder-decoder and decoder-only.

Both layouts produce a :class:`ForwardTrace` with the same contract, so the
objectives never need to know which one they are looking at:

* ``hidden[b, t]``  final decoder state at target position ``t`` (after the
  final layer norm, before the output projection),
* ``logits[b, t]``  ``hidden[b, t] @ W_out`` (no bias),
* ``atten[b, t]``   a probability vector over source positions.

Decoder-only inputs are laid out as ``[BOS] src... [SEP] tgt...``; the SEP
slot plays the role that BOS plays in the encoder-decoder decoder input.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
MAGIC = b"REPL1\n"
NEG_INF = -1e9

ARCHS = ("encoder_decoder", "decoder_only")
ATTN_SOURCES = ("final_layer", "mean_all_layers")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class ModelConfig:
    arch: str = "encoder_decoder"
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 64
    tie_output_embedding: bool = True
    seed: int = 0
    attn_source: str = "final_layer"

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHS:
            raise ConfigError("arch", f"must be one of {ARCHS}")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(name, "must be a positive integer")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model", "must be divisible by n_heads")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size", "must hold the reserved ids PAD, BOS, EOS, UNK, SEP")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if self.attn_source not in ATTN_SOURCES:
            raise ConfigError("attn_source", f"must be one of {ATTN_SOURCES}")
        return self


@dataclass
class ForwardTrace:
    hidden: Tensor
    logits: Tensor
    atten: Tensor
    targets: np.ndarray
    mask: np.ndarray
    src_mask: np.ndarray
    per_layer_attention: list = field(default_factory=list)
    records: list = field(default_factory=list)
    arch: str = "encoder_decoder"

    @property
    def length(self) -> int:
        return self.targets.shape[1]


def _attn_names(prefix: str) -> list:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every parameter tensor, in a fixed order."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {"tok_emb": (v, d)}

    def attn(prefix):
        for name in _attn_names(prefix):
            shapes[name] = (d, d) if name.rsplit(".", 1)[1].startswith("w") else (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, 4 * d)
        shapes[f"{prefix}.b1"] = (4 * d,)
        shapes[f"{prefix}.w2"] = (4 * d, d)
        shapes[f"{prefix}.b2"] = (d,)

    if cfg.arch == "encoder_decoder":
        for i in range(cfg.n_layers):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.self")
            ln(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        ln("enc.ln_f")
    for i in range(cfg.n_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        if cfg.arch == "encoder_decoder":
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln_f")
    if not cfg.tie_output_embedding:
        shapes["out_proj"] = (d, v)
    return shapes


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class ModelParams:
    """Config plus named parameter tensors, with the forward passes attached."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors
        self._pos = sinusoidal_positions(config.max_len + 2, config.d_model)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list:
        return list(self.tensors.values())

    def named_parameters(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def output_matrix(self) -> Tensor:
        """``W`` with ``logits = h @ W``; the embedding transposed when tied."""
        if self.config.tie_output_embedding:
            return nx.transpose(self.tensors["tok_emb"])
        return self.tensors["out_proj"]

    def forward(self, src, tgt, retain: bool = False) -> ForwardTrace:
        return forward_batch(self, src, tgt, retain=retain)

    def step(self, src: Sequence[int], prefix: Sequence[int]):
        return forward_step(self, src, prefix)

    def step_all(self, src: Sequence[int], prefix: Sequence[int]):
        """Like :meth:`step` but returns hidden states for every prefix position."""
        return _step_full(self, src, prefix)


def init_params(config: ModelConfig) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            vals = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            vals = np.zeros(shape)
        else:
            vals = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(vals, requires_grad=True)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _ln(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _ffn(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = nx.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _attention(p, prefix, q_in, kv_in, mask, n_heads, record=None):
    """Multi-head attention; ``mask`` is true where a key must be ignored."""
    b, nq, d = q_in.shape
    dh = d // n_heads
    q = _split_heads(q_in @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"], n_heads)
    k = _split_heads(kv_in @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], n_heads)
    v = _split_heads(kv_in @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], n_heads)
    scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(dh))
    probs = nx.softmax(nx.masked_fill(scores, mask, NEG_INF), axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (b, nq, d))
    out = ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    if record is not None:
        wo = p[f"{prefix}.wo"].values.reshape(n_heads, dh, d)
        # value vectors already pushed through the output projection, per head
        record["value_out"] = np.einsum("bhkc,hcd->bhkd", v.values, wo)
        record["probs"] = probs.values
        record["bias"] = p[f"{prefix}.bo"].values
    return out, probs


def _pad_batch(seqs, fill=PAD) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _normalize_batch(x) -> list:
    if isinstance(x, np.ndarray):
        x = x.tolist()
    x = list(x)
    if x and not isinstance(x[0], (list, tuple, np.ndarray)):
        return [list(x)]
    return [list(s) for s in x]


def _check_tokens(cfg: ModelConfig, seqs, what: str) -> None:
    for s in seqs:
        if len(s) == 0:
            raise ValueError(f"empty {what} sequence")
        if min(s) < 0 or max(s) >= cfg.vocab_size:
            raise ValueError(f"{what} token id outside [0, {cfg.vocab_size})")


def forward_batch(params: ModelParams, src, tgt, retain: bool = False) -> ForwardTrace:
    """Teacher-forced forward over a (padded) batch.

    ``tgt`` holds the targets to predict (typically ending with EOS); the
    decoder input is ``[BOS] + tgt[:-1]``.
    """
    cfg = params.config
    src_seqs, tgt_seqs = _normalize_batch(src), _normalize_batch(tgt)
    if len(src_seqs) != len(tgt_seqs):
        raise ValueError("source and target batches differ in size")
    _check_tokens(cfg, src_seqs, "source")
    _check_tokens(cfg, tgt_seqs, "target")
    if cfg.arch == "encoder_decoder":
        if max(map(len, src_seqs)) > cfg.max_len or max(map(len, tgt_seqs)) > cfg.max_len:
            raise ValueError(f"sequence longer than max_len={cfg.max_len}")
        return _forward_encdec(params, src_seqs, tgt_seqs, retain)
    if max(len(s) + len(t) + 1 for s, t in zip(src_seqs, tgt_seqs)) > cfg.max_len:
        raise ValueError(f"prompt plus target longer than max_len={cfg.max_len}")
    return _forward_deconly(params, src_seqs, tgt_seqs, retain)


def forward_teacher_forced(params: ModelParams, src_tokens, tgt_tokens, retain: bool = False) -> ForwardTrace:
    return forward_batch(params, [list(src_tokens)], [list(tgt_tokens)], retain=retain)


def _embed(params: ModelParams, ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
    # sqrt(d) scaling keeps token identity visible next to unit-scale positions
    emb = nx.embedding(params["tok_emb"], ids) * math.sqrt(params.config.d_model)
    if positions is None:
        return emb + params._pos[: ids.shape[1]]
    return emb + params._pos[positions]


def _forward_encdec(params, src_seqs, tgt_seqs, retain):
    cfg = params.config
    H = cfg.n_heads
    src = _pad_batch(src_seqs)
    tgt = _pad_batch(tgt_seqs)
    dec_in = np.concatenate([np.full((len(tgt), 1), BOS), tgt[:, :-1]], axis=1)
    tgt_mask = tgt != PAD
    for i, s in enumerate(tgt_seqs):
        tgt_mask[i, : len(s)] = True
    src_valid = np.zeros(src.shape, dtype=bool)
    for i, s in enumerate(src_seqs):
        src_valid[i, : len(s)] = True
    key_pad = ~src_valid[:, None, None, :]
    n_t = tgt.shape[1]
    causal = np.triu(np.ones((n_t, n_t), dtype=bool), k=1)
    dec_key_pad = ~tgt_mask[:, None, None, :]
    dec_mask = causal[None, None] | dec_key_pad

    records = []
    x = _embed(params, src)
    for i in range(cfg.n_layers):
        rec = {"kind": "enc_self", "layer": i} if retain else None
        h = _ln(params, f"enc.{i}.ln1", x)
        a, _ = _attention(params, f"enc.{i}.self", h, h, key_pad, H, rec)
        if retain:
            rec["residual"] = x.values
            records.append(rec)
        x = x + a
        x = x + _ffn(params, f"enc.{i}.ffn", _ln(params, f"enc.{i}.ln2", x))
    memory = _ln(params, "enc.ln_f", x)

    y = _embed(params, dec_in)
    per_layer, cross_probs = [], []
    for i in range(cfg.n_layers):
        rec = {"kind": "dec_self", "layer": i} if retain else None
        h = _ln(params, f"dec.{i}.ln1", y)
        a, p_self = _attention(params, f"dec.{i}.self", h, h, dec_mask, H, rec)
        if retain:
            rec["residual"] = y.values
            records.append(rec)
        y = y + a
        rec = {"kind": "cross", "layer": i} if retain else None
        h = _ln(params, f"dec.{i}.ln2", y)
        a, p_cross = _attention(params, f"dec.{i}.cross", h, memory, key_pad, H, rec)
        if retain:
            rec["residual"] = y.values
            records.append(rec)
        y = y + a
        y = y + _ffn(params, f"dec.{i}.ffn", _ln(params, f"dec.{i}.ln3", y))
        cross_probs.append(p_cross)
        per_layer.append({"self": p_self.values, "cross": p_cross.values})
    hidden = _ln(params, "dec.ln_f", y)
    logits = hidden @ params.output_matrix

    if cfg.attn_source == "final_layer":
        atten = nx.mean(cross_probs[-1], axis=1)
    else:
        atten = nx.mean(nx.mean(nx.concat([nx.reshape(p, (1,) + p.shape) for p in cross_probs], 0), axis=0), axis=1)
    return ForwardTrace(hidden, logits, atten, tgt, tgt_mask, src_valid, per_layer, records, cfg.arch)


def _forward_deconly(params, src_seqs, tgt_seqs, retain):
    cfg = params.config
    H = cfg.n_heads
    B = len(src_seqs)
    n_s = max(map(len, src_seqs))
    n_t = max(map(len, tgt_seqs))
    # Sources are right-padded inside their own segment so that target slots
    # line up across the batch: [BOS] src (pad) [SEP] tgt...
    L = 1 + n_s + 1 + n_t - 1
    seq = np.full((B, L), PAD, dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    tgt = _pad_batch(tgt_seqs)
    tgt_mask = np.zeros_like(tgt, dtype=bool)
    src_valid = np.zeros((B, n_s), dtype=bool)
    for b, (s, t) in enumerate(zip(src_seqs, tgt_seqs)):
        seq[b, 0] = BOS
        seq[b, 1 : 1 + len(s)] = s
        seq[b, 1 + n_s] = SEP
        seq[b, 2 + n_s : 2 + n_s + len(t) - 1] = t[:-1]
        valid[b, : 1 + len(s)] = True
        valid[b, 1 + n_s : 1 + n_s + len(t)] = True
        # position ids count real tokens only, so in-segment padding is invisible
        positions[b] = np.maximum(np.cumsum(valid[b]) - 1, 0)
        tgt_mask[b, : len(t)] = True
        src_valid[b, : len(s)] = True
    causal = np.triu(np.ones((L, L), dtype=bool), k=1)
    mask = causal[None, None] | ~valid[:, None, None, :]

    records, per_layer, self_probs = [], [], []
    x = _embed(params, seq, positions)
    for i in range(cfg.n_layers):
        rec = {"kind": "self", "layer": i} if retain else None
        h = _ln(params, f"dec.{i}.ln1", x)
        a, p = _attention(params, f"dec.{i}.self", h, h, mask, H, rec)
        if retain:
            rec["residual"] = x.values
            records.append(rec)
        x = x + a
        x = x + _ffn(params, f"dec.{i}.ffn", _ln(params, f"dec.{i}.ln3", x))
        self_probs.append(p)
        per_layer.append({"self": p.values})
    hidden_all = _ln(params, "dec.ln_f", x)
    out_slice = slice(1 + n_s, 1 + n_s + n_t)
    hidden = hidden_all[:, out_slice, :]
    logits = hidden @ params.output_matrix

    def src_share(p: Tensor) -> Tensor:
        # head-averaged attention from the output slots onto the source segment
        return nx.mean(p[:, :, out_slice, 1 : 1 + n_s], axis=1)

    if cfg.attn_source == "final_layer":
        raw = src_share(self_probs[-1])
    else:
        shares = [src_share(p) for p in self_probs]
        raw = shares[0]
        for s in shares[1:]:
            raw = raw + s
        raw = raw * (1.0 / len(shares))
    total = nx.tsum(raw, axis=-1, keepdims=True)
    atten = raw / total
    trace = ForwardTrace(hidden, logits, atten, tgt, tgt_mask, src_valid, per_layer, records, cfg.arch)
    trace.layout = {"seq": seq, "src_slice": (1, 1 + n_s), "out_slice": (out_slice.start, out_slice.stop)}
    return trace


# ---------------------------------------------------------------------------
# incremental entry point
# ---------------------------------------------------------------------------


def _step_full(params: ModelParams, src, prefix):
    prefix = list(prefix)
    if not prefix or prefix[0] != BOS:
        raise ValueError("prefix must begin with BOS")
    # targets whose BOS-shifted input equals the prefix; the final slot is arbitrary
    tgt = prefix[1:] + [EOS]
    with nx.no_grad():
        trace = forward_batch(params, [list(src)], [tgt])
    return trace


def forward_step(params: ModelParams, src_tokens, prefix):
    """Next-token logits, hidden state and source attention after ``prefix``.

    Recomputes the full forward (no cache); equal to the last row of the
    teacher-forced pass over the same prefix.
    """
    trace = _step_full(params, src_tokens, prefix)
    return trace.logits.values[0, -1], trace.hidden.values[0, -1], trace.atten.values[0, -1]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Write ``REPL1`` magic, a JSON header, then an npz payload."""
    header = {"format": "REPL1", "config": asdict(params.config), "names": list(params.tensors), "extra": extra or {}}
    buf = io.BytesIO()
    payload = {f"param/{k}": t.values for k, t in params.tensors.items()}
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)
    np.savez(buf, **payload)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, extra_header, extra_arrays)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a REPL1 checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    header = json.loads(raw[off + 8 : off + 8 + n].decode("utf-8"))
    data = np.load(io.BytesIO(raw[off + 8 + n :]))
    cfg = ModelConfig(**header["config"]).validate()
    tensors = {name: Tensor(data[f"param/{name}"], requires_grad=True) for name in header["names"]}
    arrays = {k[len("extra/") :]: data[k] for k in data.files if k.startswith("extra/")}
    return ModelParams(cfg, tensors), header.get("extra", {}), arrays
