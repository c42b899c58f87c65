"""Fine-tuning loop, evaluation helpers and the W x N x T sweep harness."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import CorpusPair, Vocab, build_vocab, encode_pairs
from .decoding import DecodeConfig, decode_corpus
from .metrics import REPORT_COLUMNS, MetricsReport, compute_report
from .model import ConfigError, ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .objectives import LossConfig, loss_components


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 16
    learning_rate: float = 3e-3
    epochs: int = 1
    seed: int = 0
    eval_every: int = 0
    momentum: float = 0.9
    clip_norm: float | None = None

    def validate(self) -> "TrainConfig":
        self.loss.validate()
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every", "must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm", "must be positive")
        return self


def batch_schedule(n: int, batch_size: int, seed: int, epochs: int) -> list:
    """Every batch of the run as an index array; epoch ``e`` is shuffled with ``(seed, e)``."""
    out = []
    for e in range(epochs):
        order = np.random.default_rng([seed, e]).permutation(n)
        out.extend(order[i : i + batch_size] for i in range(0, n, batch_size))
    return out


class Trainer:
    """Stateful SGD-with-momentum loop that can be checkpointed mid-run."""

    def __init__(self, params: ModelParams, cfg: TrainConfig, src: list, tgt: list, vocab: Vocab | None = None):
        self.params = params
        self.cfg = cfg.validate()
        self.src, self.tgt = src, tgt
        self.vocab = vocab
        self.velocity = {k: np.zeros_like(t.values) for k, t in params.named_parameters()}
        self.step = 0
        self.log: list = []
        self.schedule = batch_schedule(len(src), cfg.batch_size, cfg.seed, cfg.epochs)

    @property
    def total_steps(self) -> int:
        return len(self.schedule)

    def train_step(self, idx) -> dict:
        p = self.params
        src = [self.src[i] for i in idx]
        tgt = [self.tgt[i] for i in idx]
        trace = p.forward(src, tgt)
        total, ce, aux = loss_components(trace, None, self.cfg.loss)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {self.step} (batch ids {list(map(int, idx))})")
        p.zero_grad()
        nx.backward(total)
        grads = {k: t.grad for k, t in p.named_parameters()}
        if self.cfg.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.cfg.clip_norm:
                scale = self.cfg.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        mu, lr = self.cfg.momentum, self.cfg.learning_rate
        for k, t in p.named_parameters():
            v = self.velocity[k]
            v *= mu
            v += grads[k]
            t.values -= lr * v
        entry = {
            "step": self.step,
            "ce_loss": ce.item(),
            "aux_loss": aux.item() if aux is not None else 0.0,
            "total": value,
        }
        self.log.append(entry)
        self.step += 1
        return entry

    def run(self, until: int | None = None, callback=None) -> list:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < stop:
            entry = self.train_step(self.schedule[self.step])
            if callback is not None and self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                callback(self, entry)
        return self.log

    def save(self, path) -> None:
        extra = {"train": _train_cfg_dict(self.cfg), "step": self.step, "log": self.log}
        if self.vocab is not None:
            extra["vocab"] = self.vocab.to_json()
        arrays = {f"velocity/{k}": v for k, v in self.velocity.items()}
        save_checkpoint(path, self.params, extra, arrays)

    @classmethod
    def load(cls, path, src: list, tgt: list) -> "Trainer":
        params, extra, arrays = load_checkpoint(path)
        cfg = train_cfg_from_dict(extra["train"])
        vocab = Vocab.from_json(extra["vocab"]) if "vocab" in extra else None
        tr = cls(params, cfg, src, tgt, vocab)
        for k in tr.velocity:
            tr.velocity[k] = np.array(arrays[f"velocity/{k}"], dtype=np.float64)
        tr.step = int(extra["step"])
        tr.log = list(extra.get("log", []))
        return tr


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss", {}))
    return TrainConfig(loss=loss, **d)


def copy_params(params: ModelParams) -> ModelParams:
    tensors = {k: nx.Tensor(t.values.copy(), requires_grad=True) for k, t in params.named_parameters()}
    return ModelParams(replace(params.config), tensors)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus, vocab: Vocab | None = None, init: ModelParams | None = None):
    """Train from ``init`` (copied, never modified) or from fresh parameters; returns ``(params, log)``."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty training corpus")
    vocab = vocab or build_vocab(corpus, model_cfg.vocab_size)
    if len(vocab) > model_cfg.vocab_size:
        raise ConfigError("model.vocab_size", f"vocabulary has {len(vocab)} entries")
    src, tgt = encode_pairs(vocab, corpus)
    if init is not None:
        if init.config != model_cfg:
            raise ValueError("initial parameters were built for a different model config")
        params = copy_params(init)
    else:
        params = init_params(model_cfg)
    trainer = Trainer(params, train_cfg, src, tgt, vocab)
    trainer.run()
    return params, trainer.log


def log_csv(log: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "ce_loss", "aux_loss", "total"])
    for e in log:
        w.writerow([e["step"], repr(e["ce_loss"]), repr(e["aux_loss"]), repr(e["total"])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def token_accuracy(params: ModelParams, vocab: Vocab, pairs, batch_size: int = 64) -> float:
    """Teacher-forced next-token accuracy over all target positions (EOS included)."""
    src, tgt = encode_pairs(vocab, pairs)
    hit = total = 0
    with nx.no_grad():
        for i in range(0, len(src), batch_size):
            tr = params.forward(src[i : i + batch_size], tgt[i : i + batch_size])
            pred = tr.logits.values.argmax(axis=-1)
            hit += int(((pred == tr.targets) & tr.mask).sum())
            total += int(tr.mask.sum())
    return hit / total


def translate(params: ModelParams, vocab: Vocab, pairs, decode_cfg: DecodeConfig) -> tuple:
    src, _ = encode_pairs(vocab, pairs)
    outs, diags = decode_corpus(params, src, decode_cfg)
    return [vocab.decode(o) for o in outs], diags


def evaluate(params, vocab, pairs, decode_cfg: DecodeConfig, rep_w_window: int = 16) -> tuple:
    hyps, _ = translate(params, vocab, pairs, decode_cfg)
    report = compute_report(hyps, [p.ref for p in pairs], rep_w_window)
    return report, hyps


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["Weight", "PredToken", "T"] + REPORT_COLUMNS


@dataclass
class SweepCell:
    W: float
    N: int
    T: float
    report: MetricsReport | None = None
    error: str | None = None

    def row(self) -> list:
        if self.report is None:
            return [self.W, self.N, self.T] + [f"error: {self.error}"] + [None] * (len(REPORT_COLUMNS) - 1)
        return [self.W, self.N, self.T] + self.report.row()


def _run_cell(args):
    idx, W, N, T, model_cfg, train_cfg, train_pairs, eval_pairs, vocab, decode_cfg, rep_w_window = args
    try:
        mc = replace(model_cfg, seed=model_cfg.seed + idx)
        loss = replace(train_cfg.loss, kind=train_cfg.loss.kind if train_cfg.loss.kind != "CE" else "CTSD", W=W, N=N, T=T)
        tc = replace(train_cfg, loss=loss, seed=train_cfg.seed + idx)
        params, _ = train(mc, tc, train_pairs, vocab)
        report, _ = evaluate(params, vocab, eval_pairs, decode_cfg, rep_w_window)
        return SweepCell(W, N, T, report)
    except Exception as exc:  # a failed cell is recorded, not fatal
        return SweepCell(W, N, T, None, f"{type(exc).__name__}: {exc}")


def sweep(
    grid: dict,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs,
    eval_pairs,
    decode_cfg: DecodeConfig | None = None,
    vocab: Vocab | None = None,
    rep_w_window: int = 16,
    workers: int = 1,
) -> list:
    """Train and evaluate one model per ``(W, N, T)`` cell; cell ``i`` uses seeds ``seed + i``."""
    Ws, Ns, Ts = list(grid.get("W", [train_cfg.loss.W])), list(grid.get("N", [train_cfg.loss.N])), list(grid.get("T", [train_cfg.loss.T]))
    cells = list(itertools.product(Ws, Ns, Ts))
    if not cells:
        raise ValueError("empty grid")
    decode_cfg = decode_cfg or DecodeConfig()
    vocab = vocab or build_vocab(list(train_pairs), model_cfg.vocab_size)
    jobs = [
        (i, W, N, T, model_cfg, train_cfg, list(train_pairs), list(eval_pairs), vocab, decode_cfg, rep_w_window)
        for i, (W, N, T) in enumerate(cells)
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]
