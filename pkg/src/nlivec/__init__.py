"""Sentence encoders trained on natural language inference, with transfer
and caption-image retrieval evaluation, on a small numpy autodiff core."""

__version__ = "0.1.0"
