"""Range-coder inner loops.

Everything in this file is written against plain ndarrays and scalar control
flow so the same source compiles under numba's nopython mode and also runs
as ordinary CPython (the fallback backend).  Keep it free of Python objects:
no dicts, no bytearrays, no generators.

Coder: 32-bit range coder, 16-bit probability precision, byte-wise
renormalization with carry resolution (pending-0xFF chain).  CDF tables are
uint16 rows of length A holding the cumulative count strictly below each
symbol; the total is implicitly 1 << 16.
"""

import numpy as np

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
RC_TOP = 1 << 24
MASK32 = (1 << 32) - 1

# encoder state layout: [low, range, cache, ff_count]  (cache == -1: none yet)
ENC_STATE_LEN = 4
# decoder state layout: [code, range, byte_pos]
DEC_STATE_LEN = 3


def enc_init(state):
    state[0] = 0
    state[1] = MASK32
    state[2] = -1
    state[3] = 0


def enc_symbols(state, symbols, cdfs, out):
    """Encode one batch of symbols; returns #bytes written into out."""
    n = symbols.shape[0]
    alphabet = cdfs.shape[1]
    low = state[0]
    rng = state[1]
    cache = state[2]
    ffn = state[3]
    nout = 0
    for t in range(n):
        s = symbols[t]
        cum_lo = int(cdfs[t, s])
        if s == alphabet - 1:
            cum_hi = PROB_TOTAL
        else:
            cum_hi = int(cdfs[t, s + 1])
        r = rng >> PROB_BITS
        low += r * cum_lo
        rng = r * (cum_hi - cum_lo)
        while rng < RC_TOP:
            # shift_low: resolve carries / pend 0xFF bytes, emit one byte frame
            if low < 0xFF000000 or low > MASK32:
                carry = low >> 32
                if cache >= 0:
                    out[nout] = (cache + carry) & 0xFF
                    nout += 1
                ff_byte = (0xFF + carry) & 0xFF
                for _ in range(ffn):
                    out[nout] = ff_byte
                    nout += 1
                ffn = 0
                cache = (low >> 24) & 0xFF
            else:
                ffn += 1
            low = (low << 8) & MASK32
            rng <<= 8
    state[0] = low
    state[1] = rng
    state[2] = cache
    state[3] = ffn
    return nout


def enc_finish(state, out):
    """Flush: emit the shortest byte suffix that pins a value in the interval.

    The interval always has width >= 1 << 24 here, so it contains a multiple
    of 1 << 24; transmitting its top bytes (low 24 bits are zero, decoder
    zero-pads) is enough.
    """
    val = ((state[0] + RC_TOP - 1) >> 24) << 24
    low = val
    cache = state[2]
    ffn = state[3]
    nout = 0
    for _ in range(2):
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            if cache >= 0:
                out[nout] = (cache + carry) & 0xFF
                nout += 1
            ff_byte = (0xFF + carry) & 0xFF
            for _ in range(ffn):
                out[nout] = ff_byte
                nout += 1
            ffn = 0
            cache = (low >> 24) & 0xFF
        else:
            ffn += 1
        low = (low << 8) & MASK32
    state[0] = low
    state[2] = cache
    state[3] = ffn
    return nout


def dec_init(state, payload):
    code = 0
    n = payload.shape[0]
    for i in range(4):
        code <<= 8
        if i < n:
            code |= int(payload[i])
    state[0] = code
    state[1] = MASK32
    state[2] = 4


def dec_symbols(state, cdfs, payload, out_symbols):
    """Decode cdfs.shape[0] symbols into out_symbols."""
    n = cdfs.shape[0]
    alphabet = cdfs.shape[1]
    plen = payload.shape[0]
    code = state[0]
    rng = state[1]
    pos = state[2]
    for t in range(n):
        r = rng >> PROB_BITS
        target = code // r
        if target > PROB_TOTAL - 1:
            target = PROB_TOTAL - 1
        lo = 0
        hi = alphabet - 1
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if int(cdfs[t, mid]) <= target:
                lo = mid
            else:
                hi = mid - 1
        s = lo
        cum_lo = int(cdfs[t, s])
        if s == alphabet - 1:
            cum_hi = PROB_TOTAL
        else:
            cum_hi = int(cdfs[t, s + 1])
        code -= r * cum_lo
        rng = r * (cum_hi - cum_lo)
        while rng < RC_TOP:
            byte = 0
            if pos < plen:
                byte = int(payload[pos])
            pos += 1
            code = ((code << 8) | byte) & MASK32
            rng <<= 8
        out_symbols[t] = s
    state[0] = code
    state[1] = rng
    state[2] = pos
    return n


def quantize_pmf(pmf, out_cdf):
    """Turn float pmf rows into cum-low count rows summing to 1 << 16.

    Every symbol gets at least one count: counts = floor(p * (T - A)) + 1,
    with the leftover apportioned to the largest remainders (ties broken
    toward the lower symbol index).
    """
    n = pmf.shape[0]
    alphabet = pmf.shape[1]
    budget = PROB_TOTAL - alphabet
    counts = np.empty(alphabet, dtype=np.int64)
    rem = np.empty(alphabet, dtype=np.float64)
    for i in range(n):
        total = 0.0
        for a in range(alphabet):
            v = pmf[i, a]
            if v > 0.0:
                total += v
        used = 0
        for a in range(alphabet):
            if total > 0.0 and pmf[i, a] > 0.0:
                ideal = pmf[i, a] / total * budget
            else:
                ideal = budget / alphabet if total <= 0.0 else 0.0
            base = int(ideal)
            counts[a] = base + 1
            rem[a] = ideal - base
            used += base
        deficit = budget - used
        if deficit > 0:
            order = np.argsort(-rem, kind="mergesort")
            for k in range(deficit):
                counts[order[k]] += 1
        cum = 0
        for a in range(alphabet):
            out_cdf[i, a] = cum
            cum += counts[a]
    return n
