"""Contrastive (SimCLR-style) and generative (MAE-style) self-supervised
pretraining for multivariate time series, built on a small numpy autodiff
engine."""

__version__ = "0.1.0"
