"""Reference arithmetic coder and quantized-CDF table construction.

This module defines the bit-exact stream contract: any accelerated
backend must reproduce these bytes exactly. The coder is a 32-bit
binary arithmetic coder driven by integer CDF rows normalized to
2^16. Stream layout (documented byte-exactly):

    [varint symbol count][coder payload][crc32 LE]

The crc covers the varint, the row-index sequence (as little-endian
uint32) and the payload, so a truncated stream, a corrupted byte or a
mismatched row sequence all surface as a checksum error instead of
silently wrong symbols. An empty symbol list encodes to the single
byte varint(0).

Out-of-range symbols are escaped: the row's trailing escape slot is
coded, then a side bit and the overflow magnitude in an Exp-Golomb
style bypass code (bits coded against a uniform binary row).
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
import scipy.special

__all__ = [
    "QuantizedCDF",
    "CoderError",
    "CorruptStreamError",
    "build_cdf_gaussian",
    "default_sigma_table",
    "sigma_bucket_indices",
    "quantize_cdf",
    "encode_symbols",
    "decode_symbols",
    "available_backends",
    "get_backend_name",
]

PRECISION = 16
TOTAL = 1 << PRECISION

_STATE_BITS = 32
_MASK = (1 << _STATE_BITS) - 1
_TOP = 1 << (_STATE_BITS - 1)
_SECOND = _TOP >> 1

SIGMA_TABLE_SIZE = 64
SIGMA_TABLE_MIN = 1e-2
SIGMA_TABLE_MAX = 64.0


class CoderError(ValueError):
    """Invalid coder input (bad row index, oversized table, ...)."""


class CorruptStreamError(ValueError):
    """Checksum mismatch: truncated, corrupted or misdescribed stream."""


@dataclass
class QuantizedCDF:
    """Integer CDF rows at 16-bit precision.

    Each row is a non-decreasing int64 array starting at 0 and ending at
    2^16 with every symbol given nonzero mass. The final symbol of every
    row is the escape slot; ``offsets[r]`` is the value represented by
    the row's first regular symbol.
    """

    rows: list[np.ndarray]
    offsets: np.ndarray
    precision: int = PRECISION

    def __post_init__(self):
        self.rows = [np.asarray(r, dtype=np.int64) for r in self.rows]
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if len(self.rows) != len(self.offsets):
            raise CoderError("offsets must align with rows")
        for i, row in enumerate(self.rows):
            if row[0] != 0 or row[-1] != TOTAL:
                raise CoderError(f"row {i} must span [0, {TOTAL}], got [{row[0]}, {row[-1]}]")
            if len(row) - 1 >= TOTAL:
                raise CoderError(f"row {i} has {len(row) - 1} symbols, must be < {TOTAL}")
            if np.any(np.diff(row) <= 0):
                raise CoderError(f"row {i} is not strictly increasing (zero-mass symbol)")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def regular_counts(self) -> np.ndarray:
        """Number of non-escape symbols per row."""
        return np.array([len(r) - 2 for r in self.rows], dtype=np.int64)

    def flatten(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated rows plus start indices, for the FFI boundary."""
        starts = np.zeros(len(self.rows) + 1, dtype=np.int64)
        for i, row in enumerate(self.rows):
            starts[i + 1] = starts[i] + len(row)
        flat = np.concatenate([r.astype(np.uint32) for r in self.rows]) if self.rows else np.zeros(0, np.uint32)
        return flat.astype(np.uint32), starts, self.offsets.astype(np.int32)


def default_sigma_table() -> np.ndarray:
    """64 log-spaced sigma buckets spanning [1e-2, 64]."""
    return np.exp(
        np.linspace(math.log(SIGMA_TABLE_MIN), math.log(SIGMA_TABLE_MAX), SIGMA_TABLE_SIZE)
    )


def sigma_bucket_indices(sigma: np.ndarray, sigma_table: np.ndarray) -> np.ndarray:
    """Map each sigma to the smallest bucket with table value >= sigma."""
    idx = np.searchsorted(sigma_table, np.asarray(sigma, dtype=np.float64), side="left")
    return np.clip(idx, 0, len(sigma_table) - 1).astype(np.int64)


def quantize_cdf(cdf_float: np.ndarray) -> np.ndarray:
    """Quantize a float CDF (0 -> 1, len n_symbols+1) to integer counts.

    Rounds boundary-wise so each symbol keeps round(p * 2^16) mass up to
    +-1, then bumps collisions to give every symbol at least one count.
    """
    cdf_float = np.asarray(cdf_float, dtype=np.float64)
    n = len(cdf_float) - 1
    if n >= TOTAL:
        raise CoderError(f"{n} symbols do not fit {PRECISION}-bit precision")
    q = np.rint(cdf_float * TOTAL).astype(np.int64)
    q[0] = 0
    q[-1] = TOTAL
    for k in range(1, n):
        if q[k] <= q[k - 1]:
            q[k] = q[k - 1] + 1
    for k in range(n - 1, 0, -1):
        if q[k] >= q[k + 1]:
            q[k] = q[k + 1] - 1
    if np.any(np.diff(q) <= 0):
        raise CoderError("CDF quantization failed: too many symbols for the precision")
    return q


def build_cdf_gaussian(sigma_table: np.ndarray | None = None, precision: int = PRECISION) -> QuantizedCDF:
    """Tabulate zero-mean Gaussian-convolved-uniform rows per sigma bucket.

    Row b covers integer symbols in [-tail_b, tail_b] with
    tail_b = max(1, ceil(6 * sigma_b)) plus a trailing escape slot that
    carries both tails' mass.
    """
    if precision != PRECISION:
        raise CoderError(f"only {PRECISION}-bit precision is supported")
    if sigma_table is None:
        sigma_table = default_sigma_table()
    rows = []
    offsets = []
    for sigma in np.asarray(sigma_table, dtype=np.float64):
        tail = max(1, int(math.ceil(6.0 * sigma)))
        bounds = np.arange(-tail, tail + 1) + 0.5  # upper boundary of each symbol
        upper = scipy.special.ndtr(bounds / sigma)
        lower0 = scipy.special.ndtr((-tail - 0.5) / sigma)
        cdf_float = np.concatenate([[0.0], upper - lower0, [1.0]])
        rows.append(quantize_cdf(cdf_float))
        offsets.append(-tail)
    return QuantizedCDF(rows=rows, offsets=np.array(offsets))


# ---------------------------------------------------------------------------
# Arithmetic coder core (binary renormalization, 32-bit state)
# ---------------------------------------------------------------------------


class _Encoder:
    def __init__(self):
        self.low = 0
        self.high = _MASK
        self.underflow = 0
        self._acc = 0
        self._nacc = 0
        self.out = bytearray()

    def _emit(self, bit: int):
        self._acc = (self._acc << 1) | bit
        self._nacc += 1
        if self._nacc == 8:
            self.out.append(self._acc)
            self._acc = 0
            self._nacc = 0

    def encode(self, cum_lo: int, cum_hi: int):
        low = self.low
        high = self.high
        rng = high - low + 1
        high = low + ((cum_hi * rng) >> PRECISION) - 1
        low = low + ((cum_lo * rng) >> PRECISION)
        while (low ^ high) & _TOP == 0:
            bit = low >> (_STATE_BITS - 1)
            self._emit(bit)
            inv = bit ^ 1
            while self.underflow > 0:
                self._emit(inv)
                self.underflow -= 1
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while low & ~high & _SECOND != 0:
            self.underflow += 1
            low = (low << 1) & (_MASK >> 1)
            high = ((high << 1) & (_MASK >> 1)) | _TOP | 1
        self.low = low
        self.high = high

    def encode_bypass(self, bit: int):
        half = TOTAL >> 1
        if bit:
            self.encode(half, TOTAL)
        else:
            self.encode(0, half)

    def finish(self) -> bytes:
        # One disambiguating bit, then zero padding to the byte boundary.
        self._emit(1)
        while self._nacc != 0:
            self._emit(0)
        return bytes(self.out)


class _Decoder:
    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0
        self._acc = 0
        self._nacc = 0
        self.low = 0
        self.high = _MASK
        code = 0
        for _ in range(_STATE_BITS):
            code = (code << 1) | self._read_bit()
        self.code = code

    def _read_bit(self) -> int:
        if self._nacc == 0:
            if self.pos < len(self.data):
                self._acc = self.data[self.pos]
                self.pos += 1
                self._nacc = 8
            else:
                return 0  # implicit zero tail
        self._nacc -= 1
        return (self._acc >> self._nacc) & 1

    def decode(self, row: list) -> int:
        low = self.low
        high = self.high
        code = self.code
        rng = high - low + 1
        value = (((code - low + 1) << PRECISION) - 1) // rng
        sym = bisect_right(row, value) - 1
        cum_lo = row[sym]
        cum_hi = row[sym + 1]
        high = low + ((cum_hi * rng) >> PRECISION) - 1
        low = low + ((cum_lo * rng) >> PRECISION)
        while (low ^ high) & _TOP == 0:
            code = ((code << 1) & _MASK) | self._read_bit()
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while low & ~high & _SECOND != 0:
            code = (code & _TOP) | ((code << 1) & (_MASK >> 1)) | self._read_bit()
            low = (low << 1) & (_MASK >> 1)
            high = ((high << 1) & (_MASK >> 1)) | _TOP | 1
        self.low = low
        self.high = high
        self.code = code
        return sym

    def decode_bypass(self) -> int:
        return self.decode(_BYPASS_ROW)


_BYPASS_ROW = [0, TOTAL >> 1, TOTAL]


def _encode_overflow(enc: _Encoder, value: int):
    k = 0
    while value >= (1 << k):
        enc.encode_bypass(1)
        value -= 1 << k
        k += 1
    enc.encode_bypass(0)
    for i in range(k - 1, -1, -1):
        enc.encode_bypass((value >> i) & 1)


def _decode_overflow(dec: _Decoder) -> int:
    k = 0
    while dec.decode_bypass():
        k += 1
        if k > 62:
            raise CorruptStreamError("runaway overflow code")
    rem = 0
    for _ in range(k):
        rem = (rem << 1) | dec.decode_bypass()
    return (1 << k) - 1 + rem


def _write_varint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise CorruptStreamError("truncated varint")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise CorruptStreamError("oversized varint")


def _stream_crc(header: bytes, row_indices: np.ndarray, payload: bytes) -> int:
    crc = zlib.crc32(header)
    crc = zlib.crc32(np.ascontiguousarray(row_indices, dtype="<u4").tobytes(), crc)
    return zlib.crc32(payload, crc)


# ---------------------------------------------------------------------------
# Reference backend
# ---------------------------------------------------------------------------


def _reference_encode(symbols: np.ndarray, cdf: QuantizedCDF, row_indices: np.ndarray) -> bytes:
    header = _write_varint(len(symbols))
    if len(symbols) == 0:
        return header
    enc = _Encoder()
    rows = [r.tolist() for r in cdf.rows]
    offsets = cdf.offsets.tolist()
    sym_list = symbols.tolist()
    idx_list = row_indices.tolist()
    n_rows = len(rows)
    for s, r in zip(sym_list, idx_list):
        if r < 0 or r >= n_rows:
            raise CoderError(f"row index {r} out of range [0, {n_rows})")
        row = rows[r]
        n_regular = len(row) - 2
        index = s - offsets[r]
        if 0 <= index < n_regular:
            enc.encode(row[index], row[index + 1])
        else:
            enc.encode(row[n_regular], row[n_regular + 1])  # escape slot
            if index < 0:
                enc.encode_bypass(0)
                _encode_overflow(enc, -index - 1)
            else:
                enc.encode_bypass(1)
                _encode_overflow(enc, index - n_regular)
    payload = enc.finish()
    crc = _stream_crc(header, row_indices, payload)
    return header + payload + struct.pack("<I", crc)


def _reference_decode(data: bytes, cdf: QuantizedCDF, row_indices: np.ndarray, count: int) -> np.ndarray:
    n, pos = _read_varint(data, 0)
    if n != count or len(row_indices) != count:
        raise CorruptStreamError(f"stream describes {n} symbols, caller expects {count}")
    if count == 0:
        if pos != len(data):
            raise CorruptStreamError("trailing bytes after empty stream")
        return np.zeros(0, dtype=np.int32)
    if len(data) < pos + 4:
        raise CorruptStreamError("stream shorter than its checksum")
    payload = data[pos:-4]
    (crc_stored,) = struct.unpack("<I", data[-4:])
    crc = _stream_crc(data[:pos], row_indices, payload)
    if crc != crc_stored:
        raise CorruptStreamError(
            f"checksum mismatch (stored {crc_stored:#010x}, computed {crc:#010x})"
        )
    dec = _Decoder(payload)
    rows = [r.tolist() for r in cdf.rows]
    offsets = cdf.offsets.tolist()
    idx_list = row_indices.tolist()
    n_rows = len(rows)
    out = np.empty(count, dtype=np.int64)
    for i, r in enumerate(idx_list):
        if r < 0 or r >= n_rows:
            raise CoderError(f"row index {r} out of range [0, {n_rows})")
        row = rows[r]
        n_regular = len(row) - 2
        sym = dec.decode(row)
        if sym == n_regular:
            side = dec.decode_bypass()
            value = _decode_overflow(dec)
            if side:
                out[i] = offsets[r] + n_regular + value
            else:
                out[i] = offsets[r] - 1 - value
        else:
            out[i] = offsets[r] + sym
    return out


# ---------------------------------------------------------------------------
# Backend dispatch
# ---------------------------------------------------------------------------

_BACKEND_ENV = "SSFW_CODER_BACKEND"


def available_backends() -> list[str]:
    from . import _native

    names = ["reference"]
    if _native.is_available():
        names.append("native")
    return names


def get_backend_name(override: str | None = None) -> str:
    """Resolve the backend: explicit arg > env var > auto."""
    name = override or os.environ.get(_BACKEND_ENV, "auto")
    if name not in ("reference", "native", "auto"):
        raise CoderError(f"unknown coder backend {name!r}")
    if name == "auto":
        from . import _native

        return "native" if _native.is_available() else "reference"
    if name == "native":
        from . import _native

        if not _native.is_available():
            raise CoderError("native coder backend requested but not available")
    return name


def encode_symbols(
    symbols: np.ndarray,
    cdf: QuantizedCDF,
    row_indices: np.ndarray,
    backend: str | None = None,
) -> bytes:
    """Encode integer symbols against per-symbol CDF rows; returns a
    self-contained byte stream that decode_symbols inverts exactly."""
    symbols = np.asarray(symbols).reshape(-1).astype(np.int64)
    row_indices = np.asarray(row_indices).reshape(-1).astype(np.int64)
    if symbols.shape != row_indices.shape:
        raise CoderError(
            f"{len(symbols)} symbols but {len(row_indices)} row indices"
        )
    if len(row_indices) and (row_indices.min() < 0 or row_indices.max() >= cdf.n_rows):
        raise CoderError(
            f"row indices must lie in [0, {cdf.n_rows}), got "
            f"[{row_indices.min()}, {row_indices.max()}]"
        )
    if get_backend_name(backend) == "native":
        from . import _native

        return _native.encode(symbols, cdf, row_indices)
    return _reference_encode(symbols, cdf, row_indices)


def decode_symbols(
    data: bytes,
    cdf: QuantizedCDF,
    row_indices: np.ndarray,
    count: int,
    backend: str | None = None,
) -> np.ndarray:
    """Exact inverse of encode_symbols; raises CorruptStreamError on any
    checksum mismatch instead of returning wrong symbols."""
    row_indices = np.asarray(row_indices).reshape(-1).astype(np.int64)
    if len(row_indices) and (row_indices.min() < 0 or row_indices.max() >= cdf.n_rows):
        raise CoderError(
            f"row indices must lie in [0, {cdf.n_rows}), got "
            f"[{row_indices.min()}, {row_indices.max()}]"
        )
    if get_backend_name(backend) == "native":
        from . import _native

        return _native.decode(data, cdf, row_indices, count)
    return _reference_decode(data, cdf, row_indices, count)
