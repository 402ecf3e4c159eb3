"""Constant, sparse, random ternary 1x1 convolutions for separable residual networks."""

from .linalg import (DenseTernary, IndexPairMatrix, OpCounter, PackedBitplanes, convert,
                     matvec, matvec_transpose, pointwise_apply)
from .weightgen import Generator, WeightSpec, generate

__all__ = [
    "DenseTernary", "IndexPairMatrix", "PackedBitplanes", "OpCounter", "convert",
    "matvec", "matvec_transpose", "pointwise_apply", "Generator", "WeightSpec", "generate",
]
__version__ = "0.1.0"
