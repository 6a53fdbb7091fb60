"""protograph: hierarchical prototype graph classification of 3-D volumes.

The package localizes critical regions of a volume as channel prototypes,
embeds them with hierarchy-aware contrastive losses, builds a per-subject
graph over the prototypes with self-attention, and classifies with a small
graph convolutional encoder.  Everything runs on a from-scratch float64
reverse-mode autodiff core so that gradients are verifiable against finite
differences.
"""

from .autodiff import (
    GraphError,
    NumericsError,
    ShapeMismatch,
    Tensor,
    conv3d,
    cross_entropy,
    dense,
    grad_check,
    relu,
    softmax,
)

__version__ = "0.1.0"

__all__ = [
    "GraphError",
    "NumericsError",
    "ShapeMismatch",
    "Tensor",
    "conv3d",
    "cross_entropy",
    "dense",
    "grad_check",
    "relu",
    "softmax",
    "__version__",
]
