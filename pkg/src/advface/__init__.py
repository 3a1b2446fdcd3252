"""Adversarial transformation networks against face-recognition embeddings."""

__version__ = "0.1.0"
