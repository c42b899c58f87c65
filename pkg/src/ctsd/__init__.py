"""Repetition suppression for sequence-to-sequence models: a small float64
transformer on a numpy autodiff core, contrastive token objectives with
similarity decay, decode-time suppressors, repetition metrics and
attribution tools."""

__version__ = "0.1.0"
