"""Python front end for the learned image codec."""

import numpy as np

from ._tic import (
    CheckpointError,
    ContractError,
    FormatError,
    ImageError,
    Model,
    NonFiniteError,
    bpp,
    lambda_ladder,
    preset_names,
    psnr,
    synthetic_images,
)

__all__ = [
    "CheckpointError",
    "ContractError",
    "FormatError",
    "ImageError",
    "Model",
    "NonFiniteError",
    "bpp",
    "image_psnr",
    "lambda_ladder",
    "preset_names",
    "psnr",
    "synthetic_images",
]


def image_psnr(a, b):
    """PSNR between two uint8 images of the same shape."""
    a = np.asarray(a, dtype=np.float64) / 255.0
    b = np.asarray(b, dtype=np.float64) / 255.0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return psnr(float(np.mean((a - b) ** 2)))
