"""Command-line entry point: ``ctsd <subcommand> [options]``.

Configuration is a JSON file (``--config``) with sections ``model``,
``train`` (with a nested ``loss``), ``decode``, ``metrics``, ``data`` and
``sweep``, refined by ``--set section.key=value`` overrides. ``REPL_SEED``
in the environment replaces every seed before the overrides are applied.
Each run writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from . import numerics as nx
from .attribution import LABEL, adjacent_similarity, attenuation_matrices, contribution_matrix, heatmap_svg, matrix_csv
from .corpus import Vocab, build_vocab, encode_pairs, gen_synthetic, load_jsonl, save_jsonl, split_corpus
from .decoding import DecodeConfig
from .experiments import COMPARE_COLUMNS, DECODE_BASELINES, compare
from .metrics import REPORT_COLUMNS, SCREEN_COLUMNS, compute_report, to_csv, to_markdown, top_percentile_screen
from .model import ConfigError, ModelConfig, forward_teacher_forced, init_params, load_checkpoint
from .objectives import LossConfig
from .trainer import SWEEP_COLUMNS, Trainer, TrainConfig, log_csv, sweep, translate

DEFAULTS = {
    "model": asdict(ModelConfig()),
    "train": asdict(TrainConfig()),
    "decode": asdict(DecodeConfig()),
    "metrics": {"rep_w_window": 16, "percentile": 100.0},
    "data": {
        "train_path": None,
        "eval_path": None,
        "seed": 0,
        "n_pairs": 2000,
        "stack_ratio": 0.5,
        "eval_fraction": 0.1,
    },
    "sweep": {"W": [0.0, 0.5, 1.0], "N": [10], "T": [5.0]},
    # pretrain_epochs > 0 trains one shared CE model that every arm fine-tunes
    "compare": {"kinds": ["CE", "CT", "CTSD"], "decode_baselines": [], "pretrain_epochs": 0, "pretrain_learning_rate": None},
}
SEED_PATHS = ("model.seed", "train.seed", "decode.seed", "data.seed")


class CliError(Exception):
    def __init__(self, kind: str, message: str, field: str | None = None, code: int = 1):
        super().__init__(message)
        self.kind, self.field, self.code = kind, field, code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, path: str, value) -> None:
    keys = path.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node:
            raise CliError("config", "unknown configuration key", ".".join(keys[: i + 1]))
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise CliError("config", "unknown configuration key", path)
    node[keys[-1]] = value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise CliError("config", "unknown configuration key", path)
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + ".")
        else:
            base[k] = v


def resolve_config(config_path=None, overrides=(), env=None) -> dict:
    """Defaults, then the JSON file, then ``REPL_SEED``, then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError("io", f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise CliError("config", f"malformed JSON in {config_path}: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise CliError("config", "top level must be a JSON object")
        _merge(cfg, loaded)
    env = os.environ if env is None else env
    if env.get("REPL_SEED") not in (None, ""):
        try:
            seed = int(env["REPL_SEED"])
        except ValueError:
            raise CliError("config", "REPL_SEED must be an integer", "REPL_SEED") from None
        for p in SEED_PATHS:
            _set_path(cfg, p, seed)
    for item in overrides:
        if "=" not in item:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(val))
    return cfg


def _build(section: str, cls, values: dict):
    names = {f.name for f in fields(cls)}
    for k in values:
        if k not in names:
            raise CliError("config", "unknown configuration key", f"{section}.{k}")
    try:
        obj = cls(**values)
        obj.validate()
    except ConfigError as exc:
        raise CliError("config", str(exc).split(": ", 1)[-1], f"{section}.{exc.field}") from None
    except TypeError as exc:
        raise CliError("config", str(exc), section) from None
    return obj


def model_config(cfg: dict) -> ModelConfig:
    return _build("model", ModelConfig, cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    loss = _build("train.loss", LossConfig, t.pop("loss", {}))
    return _build("train", TrainConfig, {**t, "loss": loss})


def decode_config(cfg: dict) -> DecodeConfig:
    return _build("decode", DecodeConfig, cfg["decode"])


def _metrics(cfg: dict) -> tuple:
    m = cfg["metrics"]
    w, pct = m["rep_w_window"], m["percentile"]
    if not isinstance(w, int) or w < 1:
        raise CliError("config", "must be a positive integer", "metrics.rep_w_window")
    if not isinstance(pct, (int, float)) or not 0 < pct <= 100:
        raise CliError("config", "must lie in (0, 100]", "metrics.percentile")
    return w, float(pct)


def validate(cfg: dict) -> None:
    """Check every typed section, whatever the subcommand needs."""
    model_config(cfg)
    train_config(cfg)
    decode_config(cfg)
    _metrics(cfg)


# ---------------------------------------------------------------------------
# data and manifests
# ---------------------------------------------------------------------------


def _load(path, **kw):
    try:
        return load_jsonl(path, **kw)
    except FileNotFoundError:
        raise CliError("io", f"file not found: {path}") from None
    except ValueError as exc:
        raise CliError("data", str(exc)) from None


def _generated(cfg: dict):
    d = cfg["data"]
    try:
        pairs = gen_synthetic(int(d["seed"]), int(d["n_pairs"]), float(d["stack_ratio"]))
    except ValueError as exc:
        raise CliError("config", str(exc), "data.stack_ratio") from None
    if not 0.0 < float(d["eval_fraction"]) < 1.0:
        raise CliError("config", "must lie in (0, 1)", "data.eval_fraction")
    return split_corpus(pairs, float(d["eval_fraction"]), int(d["seed"]))


def load_data(cfg: dict, need_eval: bool = True) -> tuple:
    d = cfg["data"]
    if d["train_path"]:
        train = _load(d["train_path"])
        if need_eval and not d["eval_path"]:
            raise CliError("config", "required when data.train_path is set", "data.eval_path")
        held = _load(d["eval_path"]) if d["eval_path"] else []
        return train, held
    return _generated(cfg)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs=(), outputs=(), extra=None) -> None:
    manifest = {
        "command": command,
        "toolkit_version": __version__,
        "config": cfg,
        "seeds": {p: cfg[p.split(".")[0]][p.split(".")[1]] for p in SEED_PATHS},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(Path(o).name) for o in outputs),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _out_dir(args, cfg) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory: {exc}") from None
    return out


def _checkpoint(path):
    try:
        params, extra, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("io", f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise CliError("io", str(exc)) from None
    if "vocab" not in extra:
        raise CliError("io", f"{path}: checkpoint carries no vocabulary")
    return params, Vocab.from_json(extra["vocab"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> None:
    out = _out_dir(args, cfg)
    train, held = _generated(cfg)
    save_jsonl(out / "train.jsonl", train)
    save_jsonl(out / "eval.jsonl", held)
    write_manifest(out, "gen-data", cfg, outputs=[out / "train.jsonl", out / "eval.jsonl"])


def cmd_train(args, cfg) -> None:
    out = _out_dir(args, cfg)
    mc, tc = model_config(cfg), train_config(cfg)
    train_pairs, _ = load_data(cfg, need_eval=False)
    if args.resume:
        # the checkpoint's own train config and vocabulary take precedence
        _, vocab = _checkpoint(args.resume)
        src, tgt = encode_pairs(vocab, train_pairs)
        tr = Trainer.load(args.resume, src, tgt)
    else:
        vocab = build_vocab(train_pairs, mc.vocab_size)
        src, tgt = encode_pairs(vocab, train_pairs)
        tr = Trainer(init_params(mc), tc, src, tgt, vocab)
    tr.run(until=args.steps)
    tr.save(out / "model.ckpt")
    _write(out / "train_log.csv", log_csv(tr.log))
    inputs = [p for p in (cfg["data"]["train_path"], args.resume) if p]
    write_manifest(out, "train", cfg, inputs, [out / "model.ckpt", out / "train_log.csv"], {"steps": tr.step})


def cmd_decode(args, cfg) -> None:
    out = _out_dir(args, cfg)
    params, vocab = _checkpoint(args.checkpoint)
    dc = decode_config(cfg)
    pairs = _load(args.input)
    hyps, diags = translate(params, vocab, pairs, dc)
    for p, h in zip(pairs, hyps):
        p.hyp = h
    save_jsonl(out / "hyps.jsonl", pairs)
    outputs = [out / "hyps.jsonl"]
    if args.trace_decode:
        with open(out / "decode_trace.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for i, d in enumerate(diags):
                for e in d:
                    fh.write(json.dumps({"index": i, **e}, sort_keys=True, ensure_ascii=False) + "\n")
        outputs.append(out / "decode_trace.jsonl")
    write_manifest(out, "decode", cfg, [args.checkpoint, args.input], outputs)


def cmd_eval(args, cfg) -> None:
    out = _out_dir(args, cfg)
    w, pct = _metrics(cfg)
    pairs = _load(args.hyps, require_hyp=True)
    groups = [("all", pairs)] + [(t, [p for p in pairs if p.tag == t]) for t in ("stacked", "clean")]
    rows = []
    for name, sub in groups:
        if sub:
            rep = compute_report([p.hyp for p in sub], [p.ref for p in sub], w)
            rows.append([name] + rep.row())
    header = ["Dataset"] + REPORT_COLUMNS
    _write(out / "report.csv", to_csv(header, rows))
    _write(out / "report.md", to_markdown(header, rows))
    screen = top_percentile_screen([p.hyp for p in pairs], pct, [p.ref for p in pairs], w)
    sheader = ["Percentile"] + SCREEN_COLUMNS
    _write(out / "screen.csv", to_csv(sheader, [[pct] + screen.screen_row()]))
    _write(out / "screen.md", to_markdown(sheader, [[pct] + screen.screen_row()]))
    outputs = [out / n for n in ("report.csv", "report.md", "screen.csv", "screen.md")]
    write_manifest(out, "eval", cfg, [args.hyps], outputs)


def cmd_analyze(args, cfg) -> None:
    out = _out_dir(args, cfg)
    params, vocab = _checkpoint(args.checkpoint)
    pairs = _load(args.input)
    if not 0 <= args.index < len(pairs):
        raise CliError("args", f"--index must lie in [0, {len(pairs)})", "index")
    pair = pairs[args.index]
    src, tgt = encode_pairs(vocab, [pair])
    T = train_config(cfg).loss.T
    cm = contribution_matrix(params, src[0], tgt[0], vocab)
    with nx.no_grad():
        trace = forward_teacher_forced(params, src[0], tgt[0])
    sim, decay = attenuation_matrices(trace, T)
    labels = [vocab.id_to_token[i] for i in tgt[0]]
    outputs = []
    for stem, values, rows, cols, title in (
        ("contribution", cm.values, cm.row_labels, cm.col_labels, f"token contributions, {LABEL}"),
        ("attention_similarity", sim, labels, labels, "attention similarity"),
        ("decay", decay, labels, labels, f"exponential decay, T={T}"),
    ):
        outputs.append(_write(out / f"{stem}.csv", matrix_csv(values, rows, cols, title)))
        outputs.append(_write(out / f"{stem}.svg", heatmap_svg(values, rows, cols, title)))
    adj = adjacent_similarity(trace)
    lines = ["position,token,next_token,cosine"]
    for t, c in adj["pairs"]:
        lines.append(f"{t},{labels[t]},{labels[t + 1]},{c:.6f}")
    outputs.append(_write(out / "adjacent_similarity.csv", "\n".join(lines) + "\n"))
    write_manifest(out, "analyze", cfg, [args.checkpoint, args.input], outputs, {"index": args.index})


def cmd_sweep(args, cfg) -> None:
    out = _out_dir(args, cfg)
    mc, tc, dc = model_config(cfg), train_config(cfg), decode_config(cfg)
    w, _ = _metrics(cfg)
    grid = cfg["sweep"]
    for k in ("W", "N", "T"):
        if not isinstance(grid.get(k), list) or not grid[k]:
            raise CliError("config", "must be a non-empty list", f"sweep.{k}")
    train_pairs, eval_pairs = load_data(cfg)
    cells = sweep(grid, mc, tc, train_pairs, eval_pairs, dc, None, w, args.workers)
    rows = [c.row() for c in cells]
    _write(out / "sweep.csv", to_csv(SWEEP_COLUMNS, rows))
    _write(out / "sweep.md", to_markdown(SWEEP_COLUMNS, rows))
    inputs = [p for p in (cfg["data"]["train_path"], cfg["data"]["eval_path"]) if p]
    write_manifest(out, "sweep", cfg, inputs, [out / "sweep.csv", out / "sweep.md"])


def cmd_compare(args, cfg) -> None:
    out = _out_dir(args, cfg)
    mc, tc, dc = model_config(cfg), train_config(cfg), decode_config(cfg)
    w, _ = _metrics(cfg)
    kinds = args.kinds.split(",") if args.kinds else cfg["compare"]["kinds"]
    baselines = cfg["compare"]["decode_baselines"]
    for b in baselines:
        if b not in DECODE_BASELINES:
            raise CliError("config", f"must be drawn from {sorted(DECODE_BASELINES)}", "compare.decode_baselines")
    pre = None
    n_pre, lr_pre = cfg["compare"]["pretrain_epochs"], cfg["compare"]["pretrain_learning_rate"]
    if not isinstance(n_pre, int) or n_pre < 0:
        raise CliError("config", "must be a non-negative integer", "compare.pretrain_epochs")
    if n_pre:
        if lr_pre is not None and not (isinstance(lr_pre, (int, float)) and lr_pre > 0):
            raise CliError("config", "must be positive", "compare.pretrain_learning_rate")
        pre = replace(tc, epochs=n_pre, learning_rate=tc.learning_rate if lr_pre is None else float(lr_pre))
    train_pairs, eval_pairs = load_data(cfg)
    try:
        res = compare(mc, tc, train_pairs, eval_pairs, kinds, dc, None, w, baselines, pre)
    except ValueError as exc:
        raise CliError("config", str(exc), "compare.kinds") from None
    _write(out / "compare.csv", to_csv(COMPARE_COLUMNS, res.rows))
    _write(out / "compare.md", to_markdown(COMPARE_COLUMNS, res.rows))
    acc_rows = [[d, m, a] for (d, m), a in res.accuracy.items()]
    _write(out / "accuracy.csv", to_csv(["Dataset", "Method", "token_accuracy"], acc_rows))
    inputs = [p for p in (cfg["data"]["train_path"], cfg["data"]["eval_path"]) if p]
    outputs = [out / n for n in ("compare.csv", "compare.md", "accuracy.csv")]
    write_manifest(out, "compare", cfg, inputs, outputs)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.loss.kind=CTSD (repeatable)")
    common.add_argument("--out-dir", default="runs/latest", help="directory for outputs and manifest.json")

    parser = argparse.ArgumentParser(prog="ctsd", description="Repetition-suppression training and evaluation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic train/eval corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--stack-ratio", type=float)
    p.add_argument("--eval-fraction", type=float)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps in total")

    p = sub.add_parser("decode", parents=[common], help="decode a JSONL corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--trace-decode", action="store_true", help="write per-step diagnostics to decode_trace.jsonl")

    p = sub.add_parser("eval", parents=[common], help="score a hypotheses JSONL file")
    p.add_argument("--hyps", required=True)

    p = sub.add_parser("analyze", parents=[common], help="contribution and attenuation matrices for one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("sweep", parents=[common], help="train one model per (W, N, T) cell")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compare", parents=[common], help="train and evaluate one arm per loss kind")
    p.add_argument("--kinds", help="comma-separated loss kinds, e.g. CE,CT,CTSD")
    return parser


def _flag_overrides(args) -> list:
    out = []
    if args.command == "gen-data":
        for flag, key in (("seed", "data.seed"), ("n_pairs", "data.n_pairs"),
                          ("stack_ratio", "data.stack_ratio"), ("eval_fraction", "data.eval_fraction")):
            v = getattr(args, flag)
            if v is not None:
                out.append(f"{key}={json.dumps(v)}")
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, list(args.overrides) + _flag_overrides(args))
        validate(cfg)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        if exc.field:
            err["field"] = exc.field
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
