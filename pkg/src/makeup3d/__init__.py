"""Adversarial makeup generation in UV texture space for facial privacy protection."""

__version__ = "0.1.0"
