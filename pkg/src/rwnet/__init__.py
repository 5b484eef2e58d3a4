"""Few-shot point cloud classification with wavelet attention and
rate-distortion coefficient masks."""

__version__ = "0.1.0"
