"""Quantization, probability models, and integer CDF tables for coding.

Two models feed the range coder:

* ``GaussianConditional`` -- zero-mean Gaussian per latent element, with
  the standard deviation snapped to a 64-entry logarithmic scale table so
  encoder and decoder agree on integer context ids exactly.
* ``FactorizedPrior`` -- per-channel logistic density with learned
  location and scale, used for the side-information latents.

Tables hold cumulative integer frequencies at 16-bit precision; symbols
outside a context's alphabet are escape-coded followed by a raw 16-bit
signed value. All table construction is float64 and deterministic, so
tables rebuilt from the same checkpoint are byte-identical.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, ndtr, ndtri

from . import autodiff
from .autodiff import Tensor, gaussian_bin_likelihood, maximum
from .rangecoder import MAX_TOTAL, RangeDecoder, RangeEncoder, IncompleteStreamError

SCALE_FLOOR = 0.11
SCALE_MAX = 256.0
SCALE_LEVELS = 64
CDF_PRECISION = 16
CDF_TOTAL = 1 << CDF_PRECISION
TAIL_MASS = 1e-9
LIKELIHOOD_BOUND = 1e-9
RAW_OFFSET = 1 << 15
SCALE_EPS = 1e-6

assert CDF_TOTAL <= MAX_TOTAL


def quantize(v: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Quantize latents: additive uniform noise for training, rounding for coding.

    Noise mode perturbs by U[-0.5, 0.5) and stays differentiable as the
    identity; round mode maps to the nearest integer, ties away from zero,
    and detaches from the graph.
    """
    if mode == "noise":
        if rng is None:
            raise ValueError("noise-mode quantization requires an rng")
        noise = rng.uniform(-0.5, 0.5, size=v.data.shape).astype(v.data.dtype)
        return v + Tensor(noise)
    if mode == "round":
        return Tensor(round_half_away(v.data))
    raise ValueError(f"unknown quantization mode {mode!r}; expected 'noise' or 'round'")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def estimate_bits(probs) -> float:
    """Total information content sum(-log2 p), accumulated in float64."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    data = data.astype(np.float64, copy=False)
    if data.size and (not np.all(np.isfinite(data)) or data.min() <= 0.0):
        raise ValueError("estimate_bits requires strictly positive finite probabilities")
    return float(-np.log2(data).sum()) if data.size else 0.0


def rate_bits_tensor(probs: Tensor) -> Tensor:
    """Differentiable counterpart of estimate_bits for the training loss."""
    if probs.data.min() <= 0.0:
        raise ValueError("rate term requires strictly positive probabilities")
    return autodiff.tsum(autodiff.log(probs)) * (-1.0 / math.log(2.0))


def logistic_bin_likelihood(z: Tensor, loc: Tensor, scale: Tensor) -> Tensor:
    """Unit-bin mass around z under a logistic(loc, scale) density.

    Float64 internally with the reflected form, so tail bins keep full
    relative accuracy; differentiable in z, loc, and scale.
    """
    zd = z.data.astype(np.float64, copy=False)
    ld = loc.data.astype(np.float64, copy=False)
    sd = scale.data.astype(np.float64, copy=False)
    c = zd - ld
    v = np.abs(c)
    a = (0.5 - v) / sd
    b = (-0.5 - v) / sd
    fa = expit(a)
    fb = expit(b)
    p = fa - fb

    def bwd(out):
        g = out.grad.astype(np.float64, copy=False)
        da = fa * (1.0 - fa)
        db = fb * (1.0 - fb)
        dv = (db - da) / sd
        dz = g * dv * np.sign(c)
        if z.requires_grad or z._parents:
            autodiff._accum(z, autodiff._unbroadcast(dz, z.data.shape).astype(z.data.dtype))
        if loc.requires_grad or loc._parents:
            autodiff._accum(loc, autodiff._unbroadcast(-dz, loc.data.shape).astype(loc.data.dtype))
        if scale.requires_grad or scale._parents:
            ds = -(da * a - db * b) / sd
            autodiff._accum(scale, autodiff._unbroadcast(g * ds, scale.data.shape).astype(scale.data.dtype))

    dtype = np.result_type(z.data, loc.data, scale.data)
    return autodiff._make(p.astype(dtype), (z, loc, scale), "logistic_bin_likelihood", bwd)


def scale_table() -> np.ndarray:
    """64 logarithmically spaced standard deviations spanning [0.11, 256]."""
    return np.exp(np.linspace(math.log(SCALE_FLOOR), math.log(SCALE_MAX), SCALE_LEVELS))


class EntropyTable:
    """Per-context cumulative integer frequencies shared by both coder ends.

    Context ``i`` codes integer values ``offsets[i] .. offsets[i] +
    n_symbols - 2`` directly; the final slot is the escape symbol for
    out-of-alphabet values.
    """

    def __init__(self, offsets: np.ndarray, cdfs: list[np.ndarray]):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.cdfs = cdfs
        for cdf in cdfs:
            if cdf[0] != 0 or cdf[-1] != CDF_TOTAL or np.any(np.diff(cdf) < 1):
                raise ValueError("CDF must rise strictly from 0 to 2^16")

    @property
    def n_contexts(self) -> int:
        return len(self.cdfs)

    def escape_index(self, ctx: int) -> int:
        return len(self.cdfs[ctx]) - 2

    def to_bytes(self) -> bytes:
        """Canonical serialization, used to assert encoder/decoder identity."""
        parts = [np.int64(self.n_contexts).tobytes()]
        for off, cdf in zip(self.offsets, self.cdfs):
            parts.append(np.int64(off).tobytes())
            parts.append(np.int64(len(cdf)).tobytes())
            parts.append(cdf.astype(np.int64).tobytes())
        return b"".join(parts)


def quantize_pmf(pmf: np.ndarray, total: int = CDF_TOTAL) -> np.ndarray:
    """Integer frequencies summing to exactly ``total``, every bin >= 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n == 0:
        raise ValueError("empty pmf")
    if n > total:
        raise ValueError(f"alphabet of {n} symbols cannot fit {total} total frequency")
    pmf = np.maximum(pmf, 0.0)
    mass = pmf.sum()
    pmf = np.full(n, 1.0 / n) if mass <= 0 else pmf / mass
    scaled = pmf * total
    freqs = np.maximum(np.floor(scaled), 1.0).astype(np.int64)
    diff = total - int(freqs.sum())
    if diff > 0:
        remainders = scaled - np.floor(scaled)
        order = np.argsort(-remainders, kind="stable")
        for step in range(diff):
            freqs[order[step % n]] += 1
    elif diff < 0:
        order = np.argsort(-freqs, kind="stable")
        i = 0
        while diff < 0:
            j = order[i % n]
            if freqs[j] > 1:
                freqs[j] -= 1
                diff += 1
            i += 1
    return freqs


def _freqs_to_cdf(freqs: np.ndarray) -> np.ndarray:
    cdf = np.zeros(freqs.size + 1, dtype=np.int64)
    np.cumsum(freqs, out=cdf[1:])
    return cdf


class GaussianConditional:
    """Zero-mean Gaussian bin model conditioned on a snapped scale index."""

    def __init__(self, scale_floor: float = SCALE_FLOOR, tail_mass: float = TAIL_MASS):
        if scale_floor <= 0:
            raise ValueError("scale_floor must be positive")
        self.scale_floor = scale_floor
        self.tail_mass = tail_mass
        self._table = scale_table()
        self._tables_cache = None

    def bin_prob(self, k, sigma):
        """P(round(Y) == k) for Y ~ N(0, sigma^2), float64, tail-stable."""
        k = np.asarray(k, dtype=np.float64)
        sigma = np.maximum(np.asarray(sigma, dtype=np.float64), self.scale_floor)
        v = np.abs(k)
        p = ndtr((0.5 - v) / sigma) - ndtr((-0.5 - v) / sigma)
        return p if p.shape else float(p)

    def likelihood(self, y: Tensor, sigma: Tensor) -> Tensor:
        """Differentiable bin mass with floored scale and bounded output."""
        sigma_f = maximum(sigma, self.scale_floor)
        p = gaussian_bin_likelihood(y, sigma_f)
        return maximum(p, LIKELIHOOD_BOUND)

    def snap_indexes(self, sigma: np.ndarray) -> np.ndarray:
        """Map each sigma to the index of the first table entry >= sigma."""
        clipped = np.clip(np.asarray(sigma, dtype=np.float64), self._table[0], self._table[-1])
        return np.searchsorted(self._table, clipped, side="left").astype(np.int64)

    def build_tables(self) -> EntropyTable:
        if self._tables_cache is not None:
            return self._tables_cache
        z_tail = float(ndtri(1.0 - self.tail_mass))
        offsets = np.empty(SCALE_LEVELS, dtype=np.int64)
        cdfs = []
        for i, sigma in enumerate(self._table):
            kmax = int(math.ceil(z_tail * sigma - 0.5))
            kmax = max(kmax, 0)
            ks = np.arange(-kmax, kmax + 1, dtype=np.float64)
            pmf = self.bin_prob(ks, sigma)
            escape = max(1.0 - pmf.sum(), self.tail_mass)
            freqs = quantize_pmf(np.concatenate([pmf, [escape]]))
            offsets[i] = -kmax
            cdfs.append(_freqs_to_cdf(freqs))
        self._tables_cache = EntropyTable(offsets, cdfs)
        return self._tables_cache


class FactorizedPrior:
    """Per-channel logistic density with learned location and scale."""

    def __init__(self, channels: int):
        self.channels = channels
        self.loc = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        # softplus(raw) + eps == 1 at init
        raw0 = math.log(math.e - 1.0)
        self.scale_raw = Tensor(np.full(channels, raw0, dtype=np.float32), requires_grad=True)

    def parameters(self):
        return [self.loc, self.scale_raw]

    def scale(self) -> Tensor:
        return autodiff.softplus(self.scale_raw) + SCALE_EPS

    def likelihood(self, z: Tensor) -> Tensor:
        c = self.channels
        loc = autodiff.reshape(self.loc, (1, c, 1, 1))
        scale = autodiff.reshape(self.scale(), (1, c, 1, 1))
        p = logistic_bin_likelihood(z, loc, scale)
        return maximum(p, LIKELIHOOD_BOUND)

    def bin_prob(self, k, channel: int):
        """Float64 bin mass for a channel, matching the training likelihood."""
        loc = float(self.loc.data[channel])
        scale = float(np.logaddexp(0.0, self.scale_raw.data[channel])) + SCALE_EPS
        v = np.abs(np.asarray(k, dtype=np.float64) - loc)
        p = expit((0.5 - v) / scale) - expit((-0.5 - v) / scale)
        return p if p.shape else float(p)

    def build_tables(self, tail_mass: float = TAIL_MASS) -> EntropyTable:
        offsets = np.empty(self.channels, dtype=np.int64)
        cdfs = []
        logit_tail = math.log(tail_mass / (1.0 - tail_mass))
        for ch in range(self.channels):
            loc = float(self.loc.data[ch])
            scale = float(np.logaddexp(0.0, self.scale_raw.data[ch])) + SCALE_EPS
            kmin = int(math.floor(loc + scale * logit_tail - 0.5))
            kmax = int(math.ceil(loc - scale * logit_tail + 0.5))
            if kmax - kmin + 1 > CDF_TOTAL // 2:
                # keep pathological scales codeable via escapes
                kmin, kmax = -(CDF_TOTAL // 4), CDF_TOTAL // 4 - 1
            ks = np.arange(kmin, kmax + 1, dtype=np.float64)
            pmf = self.bin_prob(ks, ch)
            escape = max(1.0 - pmf.sum(), tail_mass)
            freqs = quantize_pmf(np.concatenate([pmf, [escape]]))
            offsets[ch] = kmin
            cdfs.append(_freqs_to_cdf(freqs))
        return EntropyTable(offsets, cdfs)


# -- symbol coding ------------------------------------------------------------

def range_encode(symbols: np.ndarray, contexts: np.ndarray, table: EntropyTable) -> bytes:
    """Range-code integer symbols under per-symbol contexts.

    Out-of-alphabet values are escape-coded followed by a raw 16-bit
    signed payload.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    contexts = np.asarray(contexts, dtype=np.int64).ravel()
    if symbols.shape != contexts.shape:
        raise ValueError(f"symbols {symbols.shape} and contexts {contexts.shape} differ in length")
    if contexts.size and (contexts.min() < 0 or contexts.max() >= table.n_contexts):
        raise ValueError(
            f"context id out of range: got [{contexts.min()}, {contexts.max()}], "
            f"table has {table.n_contexts} contexts"
        )
    enc = RangeEncoder()
    offsets, cdfs = table.offsets, table.cdfs
    for value, ctx in zip(symbols.tolist(), contexts.tolist()):
        cdf = cdfs[ctx]
        escape = len(cdf) - 2
        idx = value - offsets[ctx]
        if 0 <= idx < escape:
            enc.encode(int(cdf[idx]), int(cdf[idx + 1] - cdf[idx]), CDF_TOTAL)
        else:
            enc.encode(int(cdf[escape]), int(cdf[escape + 1] - cdf[escape]), CDF_TOTAL)
            raw = value + RAW_OFFSET
            if not 0 <= raw < (1 << 16):
                raise ValueError(f"symbol {value} outside the 16-bit escape range")
            enc.encode(raw, 1, 1 << 16)
    return enc.finish()


def range_decode(
    data: bytes,
    contexts: np.ndarray,
    table: EntropyTable,
    count: int,
    verify: bool = True,
) -> np.ndarray:
    """Inverse of range_encode; raises IncompleteStreamError on bad input.

    With ``verify`` (default), the decoded symbols are re-encoded and the
    bytes compared, so truncated or tampered streams that happen to stay
    decodable are still rejected rather than silently corrupting output.
    """
    contexts = np.asarray(contexts, dtype=np.int64).ravel()
    if contexts.size != count:
        raise ValueError(f"need {count} context ids, got {contexts.size}")
    if contexts.size and (contexts.min() < 0 or contexts.max() >= table.n_contexts):
        raise ValueError(
            f"context id out of range: got [{contexts.min()}, {contexts.max()}], "
            f"table has {table.n_contexts} contexts"
        )
    dec = RangeDecoder(data)
    offsets, cdfs = table.offsets, table.cdfs
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        ctx = contexts[i]
        cdf = cdfs[ctx]
        cum = dec.decode_freq(CDF_TOTAL)
        idx = int(np.searchsorted(cdf, cum, side="right")) - 1
        dec.consume(int(cdf[idx]), int(cdf[idx + 1] - cdf[idx]), CDF_TOTAL)
        if idx == len(cdf) - 2:  # escape
            raw = dec.decode_freq(1 << 16)
            dec.consume(raw, 1, 1 << 16)
            out[i] = raw - RAW_OFFSET
        else:
            out[i] = offsets[ctx] + idx
    if verify and range_encode(out, contexts, table) != bytes(data):
        raise IncompleteStreamError("incomplete stream: decoded bytes fail re-encode verification")
    return out


def table_bits(symbols: np.ndarray, contexts: np.ndarray, table: EntropyTable) -> float:
    """Information content of symbols under the table's discretized model."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    contexts = np.asarray(contexts, dtype=np.int64).ravel()
    total_bits = 0.0
    for value, ctx in zip(symbols.tolist(), contexts.tolist()):
        cdf = table.cdfs[ctx]
        escape = len(cdf) - 2
        idx = value - table.offsets[ctx]
        if 0 <= idx < escape:
            freq = cdf[idx + 1] - cdf[idx]
            total_bits += -math.log2(freq / CDF_TOTAL)
        else:
            freq = cdf[escape + 1] - cdf[escape]
            total_bits += -math.log2(freq / CDF_TOTAL) + 16.0
    return total_bits
