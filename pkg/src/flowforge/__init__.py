"""flowforge: exactly invertible convolutions for normalizing flows.

Layers (actnorm, affine coupling, 1x1 / emerging / periodic convolutions)
come with exact inverses and exact log-Jacobian determinants, a dense-matrix
verification oracle, a minimal reverse-mode tape for training, and a CLI
for desk-scale 8-bit image modeling.
"""

from .convkit import HAVE_COMPILED_KERNEL

__version__ = "0.1.0"

__all__ = ["HAVE_COMPILED_KERNEL", "__version__"]
