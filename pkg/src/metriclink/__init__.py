"""Disease mention normalization with candidate generation and a triplet-trained CNN ranker."""

__version__ = "0.1.0"
