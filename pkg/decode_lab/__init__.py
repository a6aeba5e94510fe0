"""Encoder-decoder pretraining on longitudinal visit histories, with a synthetic cohort generator."""

__version__ = "0.1.0"
