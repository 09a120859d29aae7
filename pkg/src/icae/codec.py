"""Image-level encode/decode: padding, transforms, entropy coding, container.

Everything here is pure in-memory compute (no file I/O), so callers can
time compression work in isolation. Both coder ends derive the Gaussian
scale field from the same rounded side-info latents through the hyper
synthesis transform, which keeps the context ids integer-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .container import StreamHeader, pack_stream, unpack_stream
from .entropy import EntropyTable, range_decode, range_encode, round_half_away
from .model import CodecModel
from .transforms import forward

PAD_MULTIPLE = 64


@dataclass
class CodecTables:
    gaussian: EntropyTable
    prior: EntropyTable


def build_codec_tables(model: CodecModel) -> CodecTables:
    """Build both coding tables once; reuse across a batch of images."""
    return CodecTables(
        gaussian=model.conditional.build_tables(),
        prior=model.prior.build_tables(),
    )


def pad_image(rgb01: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Edge-replicate an HxWx3 image up to the next multiple of ``multiple``."""
    h, w = rgb01.shape[:2]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return rgb01
    return np.pad(rgb01, ((0, ph), (0, pw), (0, 0)), mode="edge")


def padded_dims(height: int, width: int, multiple: int = PAD_MULTIPLE) -> tuple[int, int]:
    return (
        (height + multiple - 1) // multiple * multiple,
        (width + multiple - 1) // multiple * multiple,
    )


def _to_nchw(rgb01: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(rgb01.transpose(2, 0, 1)[None]).astype(np.float32))


def _sigma_contexts(model: CodecModel, z_sym: np.ndarray) -> np.ndarray:
    """Scale-table context ids for the latents, derived from rounded z."""
    sigma = forward(model.hyper_synthesis, Tensor(z_sym.astype(np.float32)))
    return model.conditional.snap_indexes(sigma.data)


def _channel_contexts(shape) -> np.ndarray:
    _, c, h, w = shape
    return np.repeat(np.arange(c, dtype=np.int64), h * w)


def encode_array(rgb01: np.ndarray, model: CodecModel, tables: CodecTables | None = None) -> bytes:
    """Compress an HxWx3 float image in [0, 1] into container bytes."""
    if rgb01.ndim != 3 or rgb01.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {rgb01.shape}")
    if tables is None:
        tables = build_codec_tables(model)
    height, width = rgb01.shape[:2]
    x = _to_nchw(pad_image(rgb01))

    y = forward(model.analysis, x)
    z = forward(model.hyper_analysis, y)
    z_sym = round_half_away(z.data).astype(np.int64)
    y_sym = round_half_away(y.data).astype(np.int64)

    ctx_y = _sigma_contexts(model, z_sym)
    z_bytes = range_encode(z_sym.ravel(), _channel_contexts(z_sym.shape), tables.prior)
    y_bytes = range_encode(y_sym.ravel(), ctx_y.ravel(), tables.gaussian)

    header = StreamHeader(
        variant=model.cfg.variant,
        n_channels=model.cfg.n_channels,
        m_channels=model.cfg.m_channels,
        height=height,
        width=width,
    )
    return pack_stream(header, z_bytes, y_bytes)


def decode_latents(
    data: bytes, model: CodecModel, tables: CodecTables | None = None
) -> tuple[StreamHeader, np.ndarray, np.ndarray]:
    """Recover the exact integer latents (y, z) from container bytes."""
    header, z_bytes, y_bytes = unpack_stream(data)
    if (
        header.variant != model.cfg.variant
        or header.n_channels != model.cfg.n_channels
        or header.m_channels != model.cfg.m_channels
    ):
        raise ValueError(
            f"stream was coded with variant={header.variant} N={header.n_channels} "
            f"M={header.m_channels}, but the loaded model is variant={model.cfg.variant} "
            f"N={model.cfg.n_channels} M={model.cfg.m_channels}"
        )
    if tables is None:
        tables = build_codec_tables(model)
    ph, pw = padded_dims(header.height, header.width)
    z_shape = (1, model.cfg.n_channels, ph // 64, pw // 64)
    y_shape = (1, model.cfg.m_channels, ph // 16, pw // 16)

    z_sym = range_decode(
        z_bytes, _channel_contexts(z_shape), tables.prior, int(np.prod(z_shape))
    ).reshape(z_shape)
    ctx_y = _sigma_contexts(model, z_sym)
    y_sym = range_decode(
        y_bytes, ctx_y.ravel(), tables.gaussian, int(np.prod(y_shape))
    ).reshape(y_shape)
    return header, y_sym, z_sym


def decode_array(data: bytes, model: CodecModel, tables: CodecTables | None = None) -> np.ndarray:
    """Decompress container bytes back to an HxWx3 float image in [0, 1]."""
    header, y_sym, _ = decode_latents(data, model, tables)
    x_hat = forward(model.synthesis, Tensor(y_sym.astype(np.float32)))
    rgb = np.clip(x_hat.data[0].transpose(1, 2, 0), 0.0, 1.0)
    out = rgb[: header.height, : header.width, :]
    if out.shape[:2] != (header.height, header.width):
        raise ValueError(
            f"decoded image is incomplete: got {out.shape[:2]}, "
            f"header promises {(header.height, header.width)}"
        )
    return np.ascontiguousarray(out)
