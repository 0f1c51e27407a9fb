"""ctypes bridge to the Rust range coder (native/ crate, cdylib).

The boundary is flat buffers only: int64/uint16/uint8 arrays plus lengths;
negative return values are status codes (see _STATUS).  CDF batches arrive
per coding group, never per symbol.
"""

from __future__ import annotations

import ctypes
import os

import numpy as np

_STATUS = {
    -1: "symbol outside cdf alphabet",
    -2: "output buffer too small",
    -3: "invalid cdf table",
    -4: "null/invalid handle",
}

_lib = None


def _candidate_paths():
    here = os.path.dirname(os.path.abspath(__file__))
    root = os.path.abspath(os.path.join(here, "..", "..", ".."))
    names = ["libmetacodec_rc.so", "libmetacodec_rc.dylib", "metacodec_rc.dll"]
    env = os.environ.get("METACODEC_NATIVE_LIB")
    if env:
        yield env
    for sub in ("native/target/release", "native/target/debug"):
        for name in names:
            yield os.path.join(root, sub, name)


def load_library():
    global _lib
    if _lib is not None:
        return _lib
    for path in _candidate_paths():
        if os.path.exists(path):
            _lib = ctypes.CDLL(path)
            break
    else:
        raise ImportError(
            "native coder library not found; build it with "
            "`cargo build --release` in native/ or set METACODEC_NATIVE_LIB"
        )
    _lib.mc_enc_new.restype = ctypes.c_void_p
    _lib.mc_enc_encode.restype = ctypes.c_int64
    _lib.mc_enc_encode.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(ctypes.c_int64),
        ctypes.c_int64,
        ctypes.POINTER(ctypes.c_uint16),
        ctypes.c_int64,
        ctypes.POINTER(ctypes.c_uint8),
        ctypes.c_int64,
    ]
    _lib.mc_enc_finish.restype = ctypes.c_int64
    _lib.mc_enc_finish.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(ctypes.c_uint8),
        ctypes.c_int64,
    ]
    _lib.mc_enc_free.argtypes = [ctypes.c_void_p]
    _lib.mc_dec_new.restype = ctypes.c_void_p
    _lib.mc_dec_new.argtypes = [ctypes.POINTER(ctypes.c_uint8), ctypes.c_int64]
    _lib.mc_dec_decode.restype = ctypes.c_int64
    _lib.mc_dec_decode.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(ctypes.c_uint16),
        ctypes.c_int64,
        ctypes.c_int64,
        ctypes.POINTER(ctypes.c_int64),
    ]
    _lib.mc_dec_free.argtypes = [ctypes.c_void_p]
    return _lib


def _raise_status(code: int):
    raise ValueError(f"native coder: {_STATUS.get(code, f'status {code}')}")


def _ptr(arr, ctype):
    return arr.ctypes.data_as(ctypes.POINTER(ctype))


class NativeEncoder:
    def __init__(self):
        self._lib = load_library()
        self._handle = self._lib.mc_enc_new()

    def encode(self, symbols: np.ndarray, cdfs: np.ndarray) -> bytes:
        n = symbols.shape[0]
        cap = 2 * n + 4096
        while True:
            out = np.empty(cap, dtype=np.uint8)
            rc = self._lib.mc_enc_encode(
                self._handle,
                _ptr(symbols, ctypes.c_int64),
                n,
                _ptr(cdfs, ctypes.c_uint16),
                cdfs.shape[1],
                _ptr(out, ctypes.c_uint8),
                out.shape[0],
            )
            if rc == -2:  # capacity checked up-front rust-side, nothing consumed
                cap *= 2
                continue
            if rc < 0:
                _raise_status(rc)
            return out[:rc].tobytes()

    def finish(self) -> bytes:
        out = np.empty(4096, dtype=np.uint8)
        rc = self._lib.mc_enc_finish(self._handle, _ptr(out, ctypes.c_uint8), out.shape[0])
        if rc < 0:
            _raise_status(rc)
        return out[:rc].tobytes()

    def __del__(self):
        if getattr(self, "_handle", None):
            self._lib.mc_enc_free(self._handle)
            self._handle = None


class NativeDecoder:
    def __init__(self, payload: np.ndarray):
        self._lib = load_library()
        payload = np.ascontiguousarray(payload, dtype=np.uint8)
        self._payload = payload  # keep alive; rust copies, but be safe
        self._handle = self._lib.mc_dec_new(_ptr(payload, ctypes.c_uint8), payload.shape[0])

    def decode(self, cdfs: np.ndarray) -> np.ndarray:
        n = cdfs.shape[0]
        out = np.empty(n, dtype=np.int64)
        rc = self._lib.mc_dec_decode(
            self._handle,
            _ptr(cdfs, ctypes.c_uint16),
            cdfs.shape[1],
            n,
            _ptr(out, ctypes.c_int64),
        )
        if rc < 0:
            _raise_status(rc)
        return out

    def __del__(self):
        if getattr(self, "_handle", None):
            self._lib.mc_dec_free(self._handle)
            self._handle = None
