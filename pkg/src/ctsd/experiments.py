"""Loss-kind comparison: train one arm per objective on a shared split and
initialization, decode, and tabulate in the results-table layout."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .corpus import Vocab, build_vocab
from .decoding import DecodeConfig
from .metrics import REPORT_COLUMNS, compute_report
from .model import ModelConfig
from .objectives import KINDS
from .trainer import TrainConfig, token_accuracy, train, translate

COMPARE_COLUMNS = ["Dataset", "Model", "Method"] + REPORT_COLUMNS
# decode-stage baselines run on top of the CE arm
DECODE_BASELINES = {"PS": "penalized_sampling", "CS": "contrastive_search"}


@dataclass
class CompareResult:
    rows: list
    reports: dict = field(default_factory=dict)  # (dataset, method) -> MetricsReport
    accuracy: dict = field(default_factory=dict)  # (dataset, method) -> teacher-forced accuracy
    hyps: dict = field(default_factory=dict)  # method -> hypotheses for the whole eval set
    logs: dict = field(default_factory=dict)  # method -> training log


def model_label(cfg: ModelConfig) -> str:
    arch = "enc-dec" if cfg.arch == "encoder_decoder" else "dec-only"
    return f"{arch}-d{cfg.d_model}-L{cfg.n_layers}"


def _splits(pairs) -> list:
    tags = sorted({p.tag for p in pairs if p.tag is not None})
    out = [(t, [i for i, p in enumerate(pairs) if p.tag == t]) for t in ("stacked", "clean") if t in tags]
    if len(out) != 1:
        out.append(("all", list(range(len(pairs)))))
    return out


def order_kinds(kinds) -> list:
    """Sort into the canonical row order CE, UL_T, CL, CT, CTSD; unknown names are rejected."""
    kinds = list(dict.fromkeys(kinds))
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown loss kind {k!r}; expected one of {KINDS}")
    return sorted(kinds, key=KINDS.index)


def compare(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs,
    eval_pairs,
    kinds=("CE", "CT", "CTSD"),
    decode_cfg: DecodeConfig | None = None,
    vocab: Vocab | None = None,
    rep_w_window: int = 16,
    decode_baselines=(),
    pretrain: TrainConfig | None = None,
) -> CompareResult:
    """Every arm starts from the same parameters (same model seed) and sees the same batches.

    With ``pretrain`` set, one CE model is trained first under that config and
    every arm fine-tunes from a copy of it.
    """
    kinds = order_kinds(kinds)
    decode_cfg = decode_cfg or DecodeConfig()
    train_pairs, eval_pairs = list(train_pairs), list(eval_pairs)
    vocab = vocab or build_vocab(train_pairs, model_cfg.vocab_size)
    if decode_baselines and "CE" not in kinds:
        raise ValueError("decode baselines need the CE arm")
    splits = _splits(eval_pairs)
    label = model_label(model_cfg)
    res = CompareResult(rows=[])

    init = None
    if pretrain is not None:
        pc = replace(pretrain, loss=replace(pretrain.loss, kind="CE"))
        init, res.logs["pretrain"] = train(model_cfg, pc, train_pairs, vocab)

    methods = []
    for kind in kinds:
        tc = replace(train_cfg, loss=replace(train_cfg.loss, kind=kind))
        params, log = train(model_cfg, tc, train_pairs, vocab, init=init)
        res.logs[kind] = log
        arms = [(kind, decode_cfg)]
        if kind == "CE":
            arms += [(f"CE+{b}", replace(decode_cfg, strategy=DECODE_BASELINES[b])) for b in decode_baselines]
        for method, dc in arms:
            hyps, _ = translate(params, vocab, eval_pairs, dc)
            res.hyps[method] = hyps
            methods.append(method)
            for name, idx in splits:
                sub = [eval_pairs[i] for i in idx]
                res.reports[(name, method)] = compute_report([hyps[i] for i in idx], [p.ref for p in sub], rep_w_window)
                res.accuracy[(name, method)] = token_accuracy(params, vocab, sub)

    for name, _ in splits:
        for method in methods:
            res.rows.append([name, label, method] + res.reports[(name, method)].row())
    return res
