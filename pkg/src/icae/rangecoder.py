"""Byte-oriented carry-less range coder with 64-bit state.

Subbotin-style renormalization: a byte is emitted once the top byte of the
coding interval settles; when the interval gets too small without
settling, it is clamped to the next 2^48 boundary so carries can never
propagate. Cumulative frequency totals up to 2^16 are supported with no
measurable precision loss (range stays >= 2^48 between symbols).

The flush emits only two bytes: the final interval always contains a
multiple of 2^48, whose 48 low zero bits the decoder reconstructs by
zero-padding (a fixed six reads past the end of the stream; a seventh is
an incomplete-stream error).
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
TOP = 1 << 56
BOT = 1 << 48
MAX_TOTAL = 1 << 16
FLUSH_BYTES = 2
_PAD_READS = 8 - FLUSH_BYTES


class IncompleteStreamError(ValueError):
    """Coded stream is truncated, corrupt, or not produced by this coder."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK64
        self._out = bytearray()

    def encode(self, cum_low: int, freq: int, total: int):
        """Narrow the interval to [cum_low, cum_low + freq) / total."""
        if not 0 < total <= MAX_TOTAL:
            raise ValueError(f"total {total} out of range (0, {MAX_TOTAL}]")
        if freq <= 0 or cum_low < 0 or cum_low + freq > total:
            raise ValueError(f"bad frequency interval [{cum_low}, {cum_low + freq}) of {total}")
        r = self.range // total
        self.low = (self.low + r * cum_low) & MASK64
        self.range = r * freq
        self._normalize()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass  # top byte settled
            elif self.range < BOT:
                self.range = (-self.low) & (BOT - 1)
            else:
                break
            self._out.append((self.low >> 56) & 0xFF)
            self.low = (self.low << 8) & MASK64
            self.range = (self.range << 8) & MASK64

    def finish(self) -> bytes:
        # Any value in [low, low + range) disambiguates; range >= BOT here,
        # so a multiple of 2^48 exists in the interval and only its top two
        # bytes need to be written.
        value = (self.low + BOT - 1) >> 48 << 48 & MASK64
        self._out.append((value >> 56) & 0xFF)
        self._out.append((value >> 48) & 0xFF)
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._pads = 0
        self.low = 0
        self.range = MASK64
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        self._pads += 1
        if self._pads > _PAD_READS:
            raise IncompleteStreamError("incomplete stream: ran out of coded bytes")
        return 0

    def decode_freq(self, total: int) -> int:
        """Return the cumulative-frequency position of the next symbol."""
        if not 0 < total <= MAX_TOTAL:
            raise ValueError(f"total {total} out of range (0, {MAX_TOTAL}]")
        r = self.range // total
        cum = (self.code - self.low) // r
        if cum >= total:
            raise IncompleteStreamError("incomplete stream: coded value outside frequency table")
        return cum

    def consume(self, cum_low: int, freq: int, total: int):
        """Commit the symbol interval chosen from decode_freq's position."""
        r = self.range // total
        self.low = (self.low + r * cum_low) & MASK64
        self.range = r * freq
        self._normalize()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = (-self.low) & (BOT - 1)
            else:
                break
            self.low = (self.low << 8) & MASK64
            self.range = (self.range << 8) & MASK64
            self.code = ((self.code << 8) & MASK64) | self._read_byte()
