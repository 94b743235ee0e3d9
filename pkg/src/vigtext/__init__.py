"""Dual-graph detector for AI-generated images.

Images are split into labelled patches; patch nodes carry averaged
spatial and frequency (DCT) embeddings, word nodes come from
patch-referenced explanation text, and a small graph attention
network classifies the combined graph as real or fake.
"""

__version__ = "0.1.0"
