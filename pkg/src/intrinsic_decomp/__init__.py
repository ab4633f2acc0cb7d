"""Intrinsic image decomposition with a guided, differentiable domain filter.

The package is self-contained on top of numpy: a small reverse-mode
autodiff tape, convolutional networks built on it, the recursive
edge-preserving filter (compiled kernel with a numpy fallback), the
training losses, evaluation metrics and a synthetic data generator.
"""
__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
