"""Attentional sequence-to-sequence translation with scheduled sampling,
self-critical policy-gradient fine-tuning and probability-averaging
ensembles, on a small numpy autodiff core."""

__version__ = "0.1.0"
