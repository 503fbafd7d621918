"""Desk-scale multilingual NMT lab: synthetic corpora, subword vocab,
temperature-based sampling, a numpy transformer with built-in reverse-mode
autodiff, deterministic training, BLEU evaluation, and an experiment harness.
"""

__version__ = "0.1.0"
