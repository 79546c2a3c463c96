"""Multimodal sensor activity recognition pipeline.

Channel expansion over cardinality/radix groups, spatiotemporal
disentanglement with modality alignment, gradient-balanced optimization,
imbalance-aware metrics, and an inference latency benchmark, all on a
minimal reverse-mode autodiff tensor core.
"""

from .tensor import (
    Tensor,
    Parameter,
    ShapeError,
    backward,
    grad_check,
    no_grad,
    scaled_dot_attention,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "backward",
    "grad_check",
    "no_grad",
    "scaled_dot_attention",
    "__version__",
]
