"""Multilingual acoustic and acoustically grounded word embeddings on a numpy autodiff core."""

__version__ = "0.1.0"
