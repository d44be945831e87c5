"""Spectral-to-chroma pretraining toolkit for multispectral tiles.

The package trains a convolutional encoder to predict the chromatic
components of a tile's color image from its non-visible spectral bands,
reuses that encoder for label-efficient classification, averages sigmoid
probabilities across an RGB and a spectral branch, and explains branch
decisions with gradient-weighted activation maps.  Everything runs on a
small numpy-based reverse-mode differentiation core.
"""

__version__ = "0.1.0"
