"""Vocabulary, JSONL corpus I/O and the synthetic keyword-stacked title generator.

The generator stands in for a proprietary e-commerce title set. Titles are
sequences of noun groups (attributes followed by a noun); the toy
"translation" maps every word through a fixed lexicon and reverses word
order inside each group. Stacked titles repeat one keyword group several
times, and their references repeat the translated group just as often.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import BOS, EOS, PAD, SEP, UNK

RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"]
TAGS = ("clean", "stacked")

NOUNS = (
    "cap hat excavator table dress shoe bag lamp chair sofa watch phone case cable charger "
    "bottle cup jacket shirt glove tent bike helmet drill pump valve mirror towel pillow blanket"
).split()
ATTRIBUTES = (
    "baseball custom plain embroidered mini crawler hydraulic electric small micro modern "
    "rotating outdoor new best cheap wholesale portable waterproof leather cotton wooden metal "
    "plastic steel red blue black white green large folding smart wireless led solar kids women "
    "men vintage luxury sports travel kitchen office garden industrial digital automatic manual "
    "heavy light soft hard round square long short warm cool fashion classic premium mobile "
    "magnetic silicone ceramic glass rubber bamboo"
).split()


def _make_lexicon() -> dict:
    # fixed RNG: the lexicon is the same for every corpus seed
    rng = np.random.default_rng(20240607)
    onsets = ["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z", "sch", "st", "kr", "br"]
    vowels = ["a", "e", "i", "o", "u", "ei", "au", "ä", "ü", "ö"]
    codas = ["", "n", "r", "t", "ng", "ck", "l", "s"]
    used, lex = set(), {}
    for word in NOUNS + ATTRIBUTES:
        while True:
            n_syl = int(rng.integers(2, 4))
            cand = "".join(
                onsets[rng.integers(len(onsets))] + vowels[rng.integers(len(vowels))] + codas[rng.integers(len(codas))]
                for _ in range(n_syl)
            )
            if cand not in used:
                break
        used.add(cand)
        lex[word] = cand.capitalize() if word in NOUNS else cand
    return lex


LEXICON = _make_lexicon()


@dataclass
class CorpusPair:
    src: str
    ref: str
    tag: str | None = None
    hyp: str | None = None

    def __post_init__(self):
        if not self.src.strip() or not self.ref.strip():
            raise ValueError("src and ref must be non-empty")
        if self.tag is not None and self.tag not in TAGS:
            raise ValueError(f"tag must be one of {TAGS}")

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


class Vocab:
    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token) -> bool:
        return token in self.token_to_id

    def encode(self, text: str) -> list:
        return [self.token_to_id.get(t, UNK) for t in text.strip().split()]

    def decode(self, ids, strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, SEP):
                continue
            if strip_special and i == EOS:
                break
            # ids past the vocabulary (unused model rows) read as <unk>
            out.append(self.id_to_token[i] if 0 <= i < len(self.id_to_token) else self.id_to_token[UNK])
        return " ".join(out)

    def to_json(self) -> list:
        return list(self.id_to_token)

    @classmethod
    def from_json(cls, tokens) -> "Vocab":
        if list(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("reserved ids do not match")
        return cls(tokens[len(RESERVED) :])


def _texts(corpus) -> list:
    out = []
    for item in corpus:
        if isinstance(item, str):
            out.append(item)
        elif isinstance(item, CorpusPair):
            out.extend([item.src, item.ref])
        else:
            out.extend([item["src"], item["ref"]])
    return out


def build_vocab(corpus, max_size: int = 512) -> Vocab:
    """Most frequent whitespace tokens; ties go to the lexicographically smaller token."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)}")
    texts = _texts(corpus)
    if not texts:
        raise ValueError("empty corpus")
    counts = Counter(t for s in texts for t in s.split() if t not in RESERVED)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ranked[: max_size - len(RESERVED)])


# ---------------------------------------------------------------------------
# synthetic titles
# ---------------------------------------------------------------------------


def translate_group(group) -> list:
    return [LEXICON[w] for w in reversed(group)]


def _draw_group(rng, attrs_left: list, nouns_left: list, min_len: int = 1) -> list:
    n_attr = int(rng.integers(max(0, min_len - 1), 3))
    attrs = [attrs_left.pop(int(rng.integers(len(attrs_left)))) for _ in range(n_attr)]
    noun = nouns_left.pop(int(rng.integers(len(nouns_left))))
    return attrs + [noun]


def gen_synthetic(seed: int, n_pairs: int, stack_ratio: float = 0.5) -> list:
    """Deterministic list of :class:`CorpusPair` with a ``stack_ratio`` share of stacked titles."""
    if not 0.0 <= stack_ratio <= 1.0:
        raise ValueError("stack_ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        attrs, nouns = list(ATTRIBUTES), list(NOUNS)
        stacked = bool(rng.random() < stack_ratio)
        if stacked:
            key = _draw_group(rng, attrs, nouns, min_len=2)
            others = [_draw_group(rng, attrs, nouns) for _ in range(int(rng.integers(1, 3)))]
            groups = [key] * int(rng.integers(2, 5)) + others
            order = rng.permutation(len(groups))
            groups = [groups[i] for i in order]
        else:
            groups = [_draw_group(rng, attrs, nouns) for _ in range(int(rng.integers(2, 5)))]
        src = " ".join(w for g in groups for w in g)
        ref = " ".join(w for g in groups for w in translate_group(g))
        pairs.append(CorpusPair(src, ref, "stacked" if stacked else "clean"))
    return pairs


def split_corpus(pairs: list, eval_fraction: float, seed: int):
    """Deterministic ``(train, eval)`` split."""
    idx = np.random.default_rng(seed).permutation(len(pairs))
    n_eval = int(round(len(pairs) * eval_fraction))
    ev = set(idx[:n_eval].tolist())
    train = [p for i, p in enumerate(pairs) if i not in ev]
    held = [p for i, p in enumerate(pairs) if i in ev]
    return train, held


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def save_jsonl(path, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            obj = p.to_json() if isinstance(p, CorpusPair) else dict(p)
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def load_jsonl(path, require_hyp: bool = False) -> list:
    text = Path(path).read_bytes().decode("utf-8")
    pairs = []
    for lineno, line in enumerate(text.replace("\r\n", "\n").replace("\r", "\n").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ValueError(f"{path}:{lineno}: expected a JSON object")
        for key in ("src", "ref") + (("hyp",) if require_hyp else ()):
            if not isinstance(obj.get(key), str):
                raise ValueError(f"{path}:{lineno}: missing or non-string field {key!r}")
        try:
            pairs.append(CorpusPair(obj["src"], obj["ref"], obj.get("tag"), obj.get("hyp")))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return pairs


def encode_pairs(vocab: Vocab, pairs) -> tuple:
    """Source ids and target ids (target ends with EOS)."""
    src = [vocab.encode(p.src) for p in pairs]
    tgt = [vocab.encode(p.ref) + [EOS] for p in pairs]
    return src, tgt
