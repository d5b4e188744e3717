"""UID-KAT unpaired image dehazing (C++ core)."""

from ._core import (
    CheckpointError,
    Generator,
    IoError,
    NumericError,
    ShapeError,
    Trainer,
    audit,
    gradcheck,
    identity_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    patch_nce_single,
    psnr,
    rational_eval,
    read_image,
    safe_pade,
    ssim,
    synthesize_haze,
    synthesize_haze_folder,
    total_generator_loss,
    write_png,
)

__all__ = [
    "CheckpointError",
    "Generator",
    "IoError",
    "NumericError",
    "ShapeError",
    "Trainer",
    "audit",
    "gradcheck",
    "identity_loss",
    "lsgan_discriminator_loss",
    "lsgan_generator_loss",
    "patch_nce_single",
    "psnr",
    "rational_eval",
    "read_image",
    "safe_pade",
    "ssim",
    "synthesize_haze",
    "synthesize_haze_folder",
    "total_generator_loss",
    "write_png",
]
