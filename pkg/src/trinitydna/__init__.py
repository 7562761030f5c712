"""DNA foundation model toolkit: multi-kernel embedding, sliding multi-window
attention, reverse-complement fusion, MLM pre-training, zero-shot scoring and
a coding-sequence annotation benchmark, built on a small numpy autograd."""

__version__ = "0.1.0"
