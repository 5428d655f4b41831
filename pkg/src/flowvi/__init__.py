"""Normalizing-flow variational encoder-decoder for summarization, on a numpy autodiff core."""

__version__ = "0.1.0"
