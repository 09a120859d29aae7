"""icae: a self-contained learned image codec with bit-exact entropy coding."""

from .autodiff import Tensor, backward, grad_check
from .codec import build_codec_tables, decode_array, encode_array
from .metrics import aggregate, bpp, ms_ssim, mse, psnr
from .model import CodecModel
from .trainer import TrainConfig, ingest_dataset, rd_loss, sample_patch, train
from .transforms import ArchConfig, TransformStack, build_transform, forward, gdn, igdn

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CodecModel",
    "Tensor",
    "TrainConfig",
    "TransformStack",
    "aggregate",
    "backward",
    "bpp",
    "build_codec_tables",
    "build_transform",
    "decode_array",
    "encode_array",
    "forward",
    "gdn",
    "grad_check",
    "igdn",
    "ingest_dataset",
    "ms_ssim",
    "mse",
    "psnr",
    "rd_loss",
    "sample_patch",
    "train",
    "__version__",
]
