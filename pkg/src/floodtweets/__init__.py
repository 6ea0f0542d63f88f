"""Flood-related tweet classification: text, image and multimodal runs."""

__version__ = "0.1.0"
