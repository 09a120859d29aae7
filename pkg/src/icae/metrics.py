"""Rate and distortion metrics: MSE, PSNR, 5-scale MS-SSIM, bpp, reports.

All distortion metrics operate on the 0-255 sample scale in float64.
PSNR is computed jointly over all RGB samples; MS-SSIM is the mean of
per-channel scores (no colorspace conversion). SSIM windows use valid
(unpadded) regions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WINDOW = 11
MS_SSIM_SIGMA = 1.5
MS_SSIM_MIN_SIDE = 176  # 5 dyadic scales with an 11-tap window
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2
PSNR_CAP_DB = 100.0


def _as_float_image(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected a HxW or HxWxC image, got shape {arr.shape}")
    return arr


def _check_same_dims(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    """Mean squared error over all samples, 0-255 scale."""
    a = _as_float_image(a)
    b = _as_float_image(b)
    _check_same_dims(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at the 100 dB sentinel."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(255.0 ** 2 / err), PSNR_CAP_DB)


def bpp(stream_bytes: int, height: int, width: int) -> float:
    """Bits per pixel of a coded representation."""
    if height <= 0 or width <= 0:
        raise ValueError(f"image area must be positive, got {height}x{width}")
    return 8.0 * stream_bytes / (height * width)


def _gaussian_window(taps: int = MS_SSIM_WINDOW, sigma: float = MS_SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(taps, dtype=np.float64) - (taps - 1) / 2.0
    w = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation with a 1-D window."""
    k = window.size
    h, w = img.shape
    tmp = np.zeros((h - k + 1, w), dtype=np.float64)
    for i in range(k):
        tmp += window[i] * img[i : i + h - k + 1, :]
    out = np.zeros((h - k + 1, w - k + 1), dtype=np.float64)
    for j in range(k):
        out += window[j] * tmp[:, j : j + w - k + 1]
    return out


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _ms_ssim_single(x: np.ndarray, y: np.ndarray) -> float:
    win = _gaussian_window()
    levels = len(MS_SSIM_WEIGHTS)
    factors = []
    for level in range(levels):
        mu1 = _filter_valid(x, win)
        mu2 = _filter_valid(y, win)
        var1 = _filter_valid(x * x, win) - mu1 * mu1
        var2 = _filter_valid(y * y, win) - mu2 * mu2
        cov = _filter_valid(x * y, win) - mu1 * mu2
        cs = (2.0 * cov + _C2) / (var1 + var2 + _C2)
        if level == levels - 1:
            lum = (2.0 * mu1 * mu2 + _C1) / (mu1 * mu1 + mu2 * mu2 + _C1)
            factors.append(float(np.mean(lum * cs)))
        else:
            factors.append(float(np.mean(cs)))
            x = _downsample2(x)
            y = _downsample2(y)
    score = 1.0
    for f, w in zip(factors, MS_SSIM_WEIGHTS):
        score *= max(f, 0.0) ** w
    return score


def ms_ssim(a, b) -> float:
    """5-scale MS-SSIM in [0, 1]; mean over channels for color images."""
    a = _as_float_image(a)
    b = _as_float_image(b)
    _check_same_dims(a, b)
    h, w = a.shape[:2]
    if min(h, w) < MS_SSIM_MIN_SIDE:
        raise ValueError(
            f"MS-SSIM requires images of at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE} "
            f"(5 dyadic scales with an {MS_SSIM_WINDOW}-tap window), got {h}x{w}"
        )
    if a.ndim == 2:
        return _ms_ssim_single(a, b)
    scores = [_ms_ssim_single(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]
    return float(np.mean(scores))


@dataclass
class MetricRow:
    name: str
    bpp: float
    psnr_db: float
    ms_ssim: float
    encode_s: float
    decode_s: float

    def values(self):
        return (self.bpp, self.psnr_db, self.ms_ssim, self.encode_s, self.decode_s)


CSV_HEADER = "name,bpp,psnr_db,ms_ssim,encode_s,decode_s"


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    average: MetricRow

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for row in [*self.rows, self.average]:
            lines.append(
                f"{row.name},{row.bpp:.6f},{row.psnr_db:.4f},{row.ms_ssim:.6f},"
                f"{row.encode_s:.4f},{row.decode_s:.4f}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        headers = ("name", "bpp", "psnr_db", "ms_ssim", "encode_s", "decode_s")
        table = [headers]
        for row in [*self.rows, self.average]:
            table.append(
                (
                    row.name,
                    f"{row.bpp:.4f}",
                    f"{row.psnr_db:.2f}",
                    f"{row.ms_ssim:.4f}",
                    f"{row.encode_s:.4f}",
                    f"{row.decode_s:.4f}",
                )
            )
        widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
        lines = []
        for r in table:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"


def aggregate(rows: list[MetricRow]) -> MetricsReport:
    """Append the arithmetic-mean row over all per-image rows."""
    if not rows:
        raise ValueError("cannot aggregate an empty set of rows")
    for row in rows:
        if not 0.0 <= row.ms_ssim <= 1.0:
            raise ValueError(f"ms_ssim out of [0, 1] in row {row.name!r}: {row.ms_ssim}")
    cols = np.array([row.values() for row in rows], dtype=np.float64)
    means = cols.mean(axis=0)
    average = MetricRow("average", *[float(v) for v in means])
    return MetricsReport(rows=list(rows), average=average)
