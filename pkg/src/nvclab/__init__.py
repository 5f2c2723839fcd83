"""Encoder-side latent refinement for a small conditional video codec.

The codec is frozen; only the coded latent of each frame is optimized at
encode time, so any conforming decoder reads the refined stream unchanged.
"""

from .codec import LAMBDAS, CodecModel, default_model, load_model, save_model
from .metrics import RDCurve, bd_rate, psnr
from .pipeline import GopConfig, decode_sequence, encode_sequence
from .refiner import RefineConfig, refine_latent

__version__ = "0.1.0"

__all__ = [
    "LAMBDAS",
    "CodecModel",
    "default_model",
    "load_model",
    "save_model",
    "RDCurve",
    "bd_rate",
    "psnr",
    "GopConfig",
    "encode_sequence",
    "decode_sequence",
    "RefineConfig",
    "refine_latent",
]
