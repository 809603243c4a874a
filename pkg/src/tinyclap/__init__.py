"""Desk-scale contrastive audio-text embedding workbench with order-sensitive
synthetic corpora, a from-scratch reverse-mode gradient engine, and a full
train/evaluate/verify command line."""

__version__ = "0.1.0"
