"""Two-party secure-computation toolkit for privacy-preserving detection."""

from .numeric import FixedPointCodec, Ring, default_codec
from .sharing import (
    Share,
    SharedTensor,
    mul_grr,
    reconstruct_additive,
    shamir_reconstruct,
    shamir_share,
    split_additive,
)

__version__ = "0.1.0"

__all__ = [
    "FixedPointCodec",
    "Ring",
    "Share",
    "SharedTensor",
    "default_codec",
    "mul_grr",
    "reconstruct_additive",
    "shamir_reconstruct",
    "shamir_share",
    "split_additive",
    "__version__",
]
