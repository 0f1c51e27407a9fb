"""Range coder public API with selectable backends.

Backends implement the same coder byte-for-byte:

* ``numba``  - _kernels compiled with @njit (default when numba imports)
* ``pure``   - _kernels as plain CPython/numpy (fallback)
* ``native`` - Rust cdylib over a C-ABI flat-buffer interface (optional,
  built from native/; see its README)

Select with ``METACODEC_BACKEND=numba|pure|native``.  CDF tables are uint16
rows of length A: cumulative count strictly below each symbol, total 2**16.
"""

import os

import numpy as np

from . import _kernels as _py
from ._kernels import MASK32, PROB_BITS, PROB_TOTAL

__all__ = [
    "PROB_BITS",
    "PROB_TOTAL",
    "RangeEncoder",
    "RangeDecoder",
    "ac_encode",
    "ac_decode",
    "pmf_to_cdf",
    "uniform_cdf",
    "validate_cdf",
    "active_backend",
]


def _load_backend():
    choice = os.environ.get("METACODEC_BACKEND", "").strip().lower()
    if choice == "pure":
        return "pure", _py
    if choice == "native":
        from . import _native

        _native.load_library()
        return "native", _py  # pmf quantization stays in python on the native path
    try:
        from . import _numba_kernels as _nb

        return "numba", _nb
    except ImportError:
        if choice == "numba":
            raise
        return "pure", _py


_BACKEND_NAME, _K = _load_backend()


def active_backend() -> str:
    return _BACKEND_NAME


def _as_cdf_array(cdfs) -> np.ndarray:
    cdfs = np.ascontiguousarray(cdfs, dtype=np.uint16)
    if cdfs.ndim != 2:
        raise ValueError(f"cdfs must be 2-D (n, alphabet), got shape {cdfs.shape}")
    return cdfs


def validate_cdf(cdfs: np.ndarray) -> None:
    """Reject tables that would break coder finiteness."""
    cdfs = _as_cdf_array(cdfs)
    full = np.concatenate(
        [cdfs.astype(np.int64), np.full((cdfs.shape[0], 1), PROB_TOTAL, dtype=np.int64)], axis=1
    )
    if np.any(full[:, 0] != 0):
        raise ValueError("cdf rows must start at 0")
    if np.any(np.diff(full, axis=1) < 1):
        raise ValueError("cdf rows must be strictly increasing (every symbol needs >=1 count)")


def _check_symbols(symbols, alphabet: int):
    if symbols.shape[0] and (symbols.min() < 0 or symbols.max() >= alphabet):
        raise ValueError("symbol outside cdf alphabet")


class RangeEncoder:
    """Stateful encoder; feed batches of (symbols, per-symbol cdf rows)."""

    def __init__(self):
        if _BACKEND_NAME == "native":
            from . import _native

            self._impl = _native.NativeEncoder()
        else:
            self._state = np.zeros(_py.ENC_STATE_LEN, dtype=np.int64)
            _K.enc_init(self._state)
            self._impl = None
        self._chunks = []
        self._n_symbols = 0
        self._finished = False

    def encode(self, symbols, cdfs) -> None:
        if self._finished:
            raise RuntimeError("encoder already finished")
        cdfs = _as_cdf_array(cdfs)
        symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
        if symbols.shape[0] != cdfs.shape[0]:
            raise ValueError("one cdf row per symbol required")
        if symbols.shape[0] == 0:
            return
        _check_symbols(symbols, cdfs.shape[1])
        if self._impl is not None:
            self._chunks.append(self._impl.encode(symbols, cdfs))
        else:
            out = np.empty(2 * symbols.shape[0] + int(self._state[3]) + 16, dtype=np.uint8)
            nout = _K.enc_symbols(self._state, symbols, cdfs, out)
            self._chunks.append(out[:nout].tobytes())
        self._n_symbols += symbols.shape[0]

    def finish(self) -> bytes:
        if self._finished:
            raise RuntimeError("encoder already finished")
        self._finished = True
        if self._n_symbols == 0:
            return b""
        if self._impl is not None:
            self._chunks.append(self._impl.finish())
        else:
            out = np.empty(int(self._state[3]) + 8, dtype=np.uint8)
            nout = _K.enc_finish(self._state, out)
            self._chunks.append(out[:nout].tobytes())
        return b"".join(self._chunks)


class RangeDecoder:
    """Stateful decoder over a fixed payload; never reads past its end."""

    def __init__(self, payload: bytes):
        self._payload = np.frombuffer(payload, dtype=np.uint8)
        if _BACKEND_NAME == "native":
            from . import _native

            self._impl = _native.NativeDecoder(self._payload)
        else:
            self._impl = None
            self._state = np.zeros(_py.DEC_STATE_LEN, dtype=np.int64)
            _K.dec_init(self._state, self._payload)

    def decode(self, cdfs) -> np.ndarray:
        cdfs = _as_cdf_array(cdfs)
        if cdfs.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        if self._impl is not None:
            return self._impl.decode(cdfs)
        out = np.empty(cdfs.shape[0], dtype=np.int64)
        _K.dec_symbols(self._state, cdfs, self._payload, out)
        return out


def ac_encode(symbols, cdfs) -> bytes:
    """One-shot encode of a symbol sequence with per-symbol CDF tables."""
    enc = RangeEncoder()
    enc.encode(symbols, cdfs)
    return enc.finish()


def ac_decode(payload: bytes, cdf_provider, n: int) -> np.ndarray:
    """One-shot decode; cdf_provider(t) must return the table the encoder used at step t."""
    dec = RangeDecoder(payload)
    out = np.empty(n, dtype=np.int64)
    for t in range(n):
        row = np.asarray(cdf_provider(t), dtype=np.uint16)
        out[t] = dec.decode(row[None, :])[0]
    return out


def pmf_to_cdf(pmf: np.ndarray) -> np.ndarray:
    """Quantize pmf rows (n, A) to cum-low uint16 tables, total 1 << 16.

    Largest-remainder apportionment of ``PROB_TOTAL - A`` counts plus one
    guaranteed count per symbol; deterministic, ties to lower index.
    """
    pmf = np.ascontiguousarray(pmf, dtype=np.float64)
    if pmf.ndim == 1:
        pmf = pmf[None, :]
    out = np.empty(pmf.shape, dtype=np.uint16)
    _K.quantize_pmf(pmf, out)
    return out


def uniform_cdf(bits: int, n: int = 1) -> np.ndarray:
    """Exact uniform tables for a 2**bits alphabet (count 2**(16-bits) each)."""
    alphabet = 1 << bits
    step = PROB_TOTAL >> bits
    row = (np.arange(alphabet, dtype=np.uint32) * step).astype(np.uint16)
    return np.broadcast_to(row, (n, alphabet)).copy()
