import numpy as np
import pytest

from ctsd import numerics as nx
from ctsd.model import ForwardTrace


class ToyInstance:
    """Free leaves ``h``, ``W`` and attention scores ``A``; every call to
    :meth:`trace` rebuilds the graph so grad_check can perturb the leaves."""

    def __init__(self, seed, T=7, V=11, d=8, S=5, B=1, alphabet=None, scale=1.0):
        rng = np.random.default_rng(seed)
        self.h = nx.Tensor(rng.normal(0, scale, (B, T, d)), requires_grad=True)
        self.W = nx.Tensor(rng.normal(0, scale, (d, V)), requires_grad=True)
        self.A = nx.Tensor(rng.normal(0, 1.0, (B, T, S)), requires_grad=True)
        hi = alphabet if alphabet is not None else V
        self.tgt = rng.integers(1, hi, size=(B, T))
        self.mask = np.ones((B, T), dtype=bool)

    @property
    def leaves(self):
        return [self.h, self.W, self.A]

    def trace(self):
        logits = nx.matmul(self.h, self.W)
        atten = nx.softmax(self.A, axis=-1)
        src_mask = np.ones(self.A.shape[::2], dtype=bool)
        return ForwardTrace(self.h, logits, atten, self.tgt, self.mask, src_mask)


def make_trace(h, W, atten, tgt, mask=None):
    """Trace from plain arrays (no gradients needed)."""
    h = nx.Tensor(np.asarray(h, dtype=np.float64)[None] if np.ndim(h) == 2 else np.asarray(h, dtype=np.float64))
    W = nx.Tensor(np.asarray(W, dtype=np.float64))
    a = np.asarray(atten, dtype=np.float64)
    a = nx.Tensor(a[None] if a.ndim == 2 else a)
    tgt = np.asarray(tgt)
    tgt = tgt[None] if tgt.ndim == 1 else tgt
    mask = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(tgt.shape)
    return ForwardTrace(h, nx.matmul(h, W), a, tgt, mask, np.ones(a.shape[::2], dtype=bool))


def logits_trace(logits, tgt, atten=None, mask=None):
    """Trace whose logits are given directly (identity output projection)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
    B, T, V = logits.shape
    if atten is None:
        atten = np.full((B, T, 3), 1.0 / 3)
    return make_trace(logits, np.eye(V), atten, tgt, mask)


@pytest.fixture
def toy():
    return ToyInstance


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str = "") -> None:
        prev = ACCEPTANCE.get(name)
        # a criterion spread over several tests passes only if all parts pass
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}" if detail else prev[1]
        ACCEPTANCE[name] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
