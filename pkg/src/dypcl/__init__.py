"""Phoneme-level contrastive learning with dynamic CTC alignment and curricula."""

__version__ = "0.1.0"
