"""GRPO post-training of a toy frequency-domain image restorer."""

__version__ = "0.1.0"
