"""ctypes bridge to the optional accelerated range coder.

The native library is a separate cdylib built from the ``native/`` crate
at the repository root. The boundary carries only flat integer arrays
and byte buffers; status codes mirror the reference coder's error
classes. Search order for the library:

  1. $SSFW_NATIVE_LIB (explicit path)
  2. next to this package (librangecoder_native.{so,dylib})
  3. <repo>/native/target/release/
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from .entropy_coding import CoderError, CorruptStreamError, QuantizedCDF

_STATUS_OK = 0
_STATUS_ROW_RANGE = 1
_STATUS_BUFFER_SMALL = 2
_STATUS_CORRUPT = 3
_STATUS_BAD_INPUT = 4

_lib = None
_load_attempted = False


def _candidate_paths():
    env = os.environ.get("SSFW_NATIVE_LIB")
    if env:
        yield Path(env)
    here = Path(__file__).resolve().parent
    for name in ("librangecoder_native.so", "librangecoder_native.dylib", "rangecoder_native.dll"):
        yield here / name
        # repo root: <root>/src/ssfwin/_native.py -> <root>/native/...
        yield here.parent.parent / "native" / "target" / "release" / name


def _load():
    global _lib, _load_attempted
    if _load_attempted:
        return _lib
    _load_attempted = True
    for path in _candidate_paths():
        if not path.is_file():
            continue
        try:
            lib = ctypes.CDLL(str(path))
        except OSError:
            continue
        lib.rc_encode.restype = ctypes.c_int32
        lib.rc_encode.argtypes = [
            ctypes.POINTER(ctypes.c_int64),  # symbols
            ctypes.c_size_t,                 # n_symbols
            ctypes.POINTER(ctypes.c_int64),  # row indices
            ctypes.POINTER(ctypes.c_uint32),  # flattened cdf rows
            ctypes.POINTER(ctypes.c_int64),  # row start offsets (n_rows + 1)
            ctypes.c_size_t,                 # n_rows
            ctypes.POINTER(ctypes.c_int32),  # per-row first symbol value
            ctypes.POINTER(ctypes.c_uint8),  # out buffer
            ctypes.c_size_t,                 # out capacity
            ctypes.POINTER(ctypes.c_size_t),  # out length
        ]
        lib.rc_decode.restype = ctypes.c_int32
        lib.rc_decode.argtypes = [
            ctypes.POINTER(ctypes.c_uint8),  # stream
            ctypes.c_size_t,                 # stream length
            ctypes.POINTER(ctypes.c_int64),  # row indices
            ctypes.c_size_t,                 # count
            ctypes.POINTER(ctypes.c_uint32),
            ctypes.POINTER(ctypes.c_int64),
            ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_int32),
            ctypes.POINTER(ctypes.c_int64),  # out symbols
        ]
        _lib = lib
        break
    return _lib


def is_available() -> bool:
    return _load() is not None


def _raise_for_status(status: int):
    if status == _STATUS_ROW_RANGE:
        raise CoderError("native coder: row index out of range")
    if status == _STATUS_CORRUPT:
        raise CorruptStreamError("native coder: checksum mismatch")
    if status == _STATUS_BAD_INPUT:
        raise CorruptStreamError("native coder: malformed stream or count mismatch")
    raise CoderError(f"native coder: unexpected status {status}")


def _tables(cdf: QuantizedCDF):
    flat, starts, offsets = cdf.flatten()
    return (
        np.ascontiguousarray(flat, dtype=np.uint32),
        np.ascontiguousarray(starts, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int32),
    )


def _ptr(arr, ctype):
    return arr.ctypes.data_as(ctypes.POINTER(ctype))


def encode(symbols: np.ndarray, cdf: QuantizedCDF, row_indices: np.ndarray) -> bytes:
    lib = _load()
    if lib is None:
        raise CoderError("native coder backend not available")
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    row_indices = np.ascontiguousarray(row_indices, dtype=np.int64)
    flat, starts, offsets = _tables(cdf)
    cap = 64 + 16 * max(1, len(symbols))
    while True:
        out = np.zeros(cap, dtype=np.uint8)
        out_len = ctypes.c_size_t(0)
        status = lib.rc_encode(
            _ptr(symbols, ctypes.c_int64),
            len(symbols),
            _ptr(row_indices, ctypes.c_int64),
            _ptr(flat, ctypes.c_uint32),
            _ptr(starts, ctypes.c_int64),
            cdf.n_rows,
            _ptr(offsets, ctypes.c_int32),
            _ptr(out, ctypes.c_uint8),
            cap,
            ctypes.byref(out_len),
        )
        if status == _STATUS_BUFFER_SMALL:
            cap *= 4
            continue
        if status != _STATUS_OK:
            _raise_for_status(status)
        return out[: out_len.value].tobytes()


def decode(data: bytes, cdf: QuantizedCDF, row_indices: np.ndarray, count: int) -> np.ndarray:
    lib = _load()
    if lib is None:
        raise CoderError("native coder backend not available")
    row_indices = np.ascontiguousarray(row_indices, dtype=np.int64)
    flat, starts, offsets = _tables(cdf)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if len(buf) == 0:
        raise CorruptStreamError("empty stream")
    out = np.zeros(max(1, count), dtype=np.int64)
    status = lib.rc_decode(
        _ptr(buf, ctypes.c_uint8),
        len(buf),
        _ptr(row_indices, ctypes.c_int64),
        count,
        _ptr(flat, ctypes.c_uint32),
        _ptr(starts, ctypes.c_int64),
        cdf.n_rows,
        _ptr(offsets, ctypes.c_int32),
        _ptr(out, ctypes.c_int64),
    )
    if status != _STATUS_OK:
        _raise_for_status(status)
    return out[:count]
