"""@njit-compiled twins of the pure kernels (same source functions)."""

from numba import njit

from . import _kernels as _py

ENC_STATE_LEN = _py.ENC_STATE_LEN
DEC_STATE_LEN = _py.DEC_STATE_LEN

enc_init = njit(cache=True)(_py.enc_init)
enc_symbols = njit(cache=True)(_py.enc_symbols)
enc_finish = njit(cache=True)(_py.enc_finish)
dec_init = njit(cache=True)(_py.dec_init)
dec_symbols = njit(cache=True)(_py.dec_symbols)
quantize_pmf = njit(cache=True)(_py.quantize_pmf)
