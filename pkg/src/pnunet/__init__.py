"""Anomaly detection by denoising reconstruction with self-refining noise masks.

A small convolutional encoder-decoder is trained to undo noise injected
into defect-free images. The injected noise is progressively reshaped by
two residual maps: a positive map that concentrates noise where known
defective samples reconstruct poorly, and a negative map that suppresses
it where normal samples do. At inference a single forward pass yields a
per-pixel anomaly map as the difference between input and reconstruction.
A latent-search baseline is included for runtime comparison.
"""

__version__ = "0.1.0"
