//! Bit-exact native twin of the reference range coder.
//!
//! 32-bit range coder, 16-bit probability precision, byte-wise
//! renormalization with carry resolution (pending-0xFF chain).  CDF tables
//! are u16 rows of length `alphabet`: cumulative count strictly below each
//! symbol, implicit total 1 << 16.  The byte stream must match the reference
//! implementation exactly; every change here is a wire-format change.

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u64 = 1 << PROB_BITS;
pub const RC_TOP: u64 = 1 << 24;
pub const MASK32: u64 = 0xFFFF_FFFF;

#[derive(Debug)]
pub enum CoderError {
    SymbolOutOfRange,
    OutputTooSmall,
    InvalidCdf,
}

pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: i64, // -1: no byte pending yet
    ff_count: u64,
    n_symbols: u64,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: MASK32, cache: -1, ff_count: 0, n_symbols: 0 }
    }

    #[inline]
    fn shift_low(&mut self, out: &mut Vec<u8>) {
        if self.low < 0xFF00_0000 || self.low > MASK32 {
            let carry = (self.low >> 32) as u8;
            if self.cache >= 0 {
                out.push((self.cache as u8).wrapping_add(carry));
            }
            let ff_byte = 0xFFu8.wrapping_add(carry);
            for _ in 0..self.ff_count {
                out.push(ff_byte);
            }
            self.ff_count = 0;
            self.cache = ((self.low >> 24) & 0xFF) as i64;
        } else {
            self.ff_count += 1;
        }
        self.low = (self.low << 8) & MASK32;
    }

    /// Encode one batch; cdfs is row-major (n, alphabet).
    pub fn encode(
        &mut self,
        symbols: &[i64],
        cdfs: &[u16],
        alphabet: usize,
        out: &mut Vec<u8>,
    ) -> Result<(), CoderError> {
        if symbols.iter().any(|&s| s < 0 || s as usize >= alphabet) {
            return Err(CoderError::SymbolOutOfRange);
        }
        for (t, &s) in symbols.iter().enumerate() {
            let row = &cdfs[t * alphabet..(t + 1) * alphabet];
            let s = s as usize;
            let cum_lo = row[s] as u64;
            let cum_hi = if s == alphabet - 1 { PROB_TOTAL } else { row[s + 1] as u64 };
            if cum_hi <= cum_lo {
                return Err(CoderError::InvalidCdf);
            }
            let r = self.range >> PROB_BITS;
            self.low += r * cum_lo;
            self.range = r * (cum_hi - cum_lo);
            while self.range < RC_TOP {
                self.shift_low(out);
                self.range <<= 8;
            }
        }
        self.n_symbols += symbols.len() as u64;
        Ok(())
    }

    /// Emit the shortest suffix pinning a value inside the final interval.
    pub fn finish(mut self, out: &mut Vec<u8>) {
        if self.n_symbols == 0 {
            return;
        }
        self.low = ((self.low + RC_TOP - 1) >> 24) << 24;
        for _ in 0..2 {
            self.shift_low(out);
        }
    }
}

pub struct RangeDecoder {
    payload: Vec<u8>,
    code: u64,
    range: u64,
    pos: usize,
}

impl RangeDecoder {
    pub fn new(payload: &[u8]) -> Self {
        let mut code = 0u64;
        for i in 0..4 {
            code = (code << 8) | *payload.get(i).unwrap_or(&0) as u64;
        }
        RangeDecoder { payload: payload.to_vec(), code, range: MASK32, pos: 4 }
    }

    pub fn decode(
        &mut self,
        cdfs: &[u16],
        alphabet: usize,
        n: usize,
        out: &mut [i64],
    ) -> Result<(), CoderError> {
        for t in 0..n {
            let row = &cdfs[t * alphabet..(t + 1) * alphabet];
            let r = self.range >> PROB_BITS;
            let target = (self.code / r).min(PROB_TOTAL - 1);
            let mut lo = 0usize;
            let mut hi = alphabet - 1;
            while lo < hi {
                let mid = (lo + hi + 1) >> 1;
                if row[mid] as u64 <= target {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            let s = lo;
            let cum_lo = row[s] as u64;
            let cum_hi = if s == alphabet - 1 { PROB_TOTAL } else { row[s + 1] as u64 };
            if cum_hi <= cum_lo {
                return Err(CoderError::InvalidCdf);
            }
            self.code -= r * cum_lo;
            self.range = r * (cum_hi - cum_lo);
            while self.range < RC_TOP {
                let byte = *self.payload.get(self.pos).unwrap_or(&0) as u64;
                self.pos += 1;
                self.code = ((self.code << 8) | byte) & MASK32;
                self.range <<= 8;
            }
            out[t] = s as i64;
        }
        Ok(())
    }
}

// --------------------------------------------------------------------------
// C ABI: flat buffers + status codes, no object marshaling.
// status: -1 symbol out of range, -2 output too small, -3 invalid cdf,
// -4 null/invalid handle.

const ST_SYMBOL: i64 = -1;
const ST_CAPACITY: i64 = -2;
const ST_CDF: i64 = -3;
const ST_HANDLE: i64 = -4;

struct EncHandle {
    enc: Option<RangeEncoder>,
}

/// # Safety
/// Returned pointer must be released with mc_enc_free.
#[no_mangle]
pub extern "C" fn mc_enc_new() -> *mut core::ffi::c_void {
    Box::into_raw(Box::new(EncHandle { enc: Some(RangeEncoder::new()) })) as *mut _
}

unsafe fn enc_from(ptr: *mut core::ffi::c_void) -> Option<&'static mut EncHandle> {
    (ptr as *mut EncHandle).as_mut()
}

/// # Safety
/// `symbols` must hold n i64s, `cdfs` n*alphabet u16s, `out` cap bytes.
#[no_mangle]
pub unsafe extern "C" fn mc_enc_encode(
    handle: *mut core::ffi::c_void,
    symbols: *const i64,
    n: i64,
    cdfs: *const u16,
    alphabet: i64,
    out: *mut u8,
    cap: i64,
) -> i64 {
    let Some(h) = enc_from(handle) else { return ST_HANDLE };
    let Some(enc) = h.enc.as_mut() else { return ST_HANDLE };
    if n < 0 || alphabet < 2 {
        return ST_CDF;
    }
    // worst case: 16 bits/symbol renorm output + pending chain + flush slack
    let needed = 2 * n as u64 + enc.ff_count + 16;
    if (cap as u64) < needed {
        return ST_CAPACITY;
    }
    let symbols = core::slice::from_raw_parts(symbols, n as usize);
    let cdfs = core::slice::from_raw_parts(cdfs, (n * alphabet) as usize);
    let mut buf = Vec::with_capacity(needed as usize);
    match enc.encode(symbols, cdfs, alphabet as usize, &mut buf) {
        Ok(()) => {
            let out = core::slice::from_raw_parts_mut(out, cap as usize);
            out[..buf.len()].copy_from_slice(&buf);
            buf.len() as i64
        }
        Err(CoderError::SymbolOutOfRange) => ST_SYMBOL,
        Err(CoderError::InvalidCdf) => ST_CDF,
        Err(CoderError::OutputTooSmall) => ST_CAPACITY,
    }
}

/// # Safety
/// `out` must hold cap bytes; the encoder handle stays valid but is drained.
#[no_mangle]
pub unsafe extern "C" fn mc_enc_finish(
    handle: *mut core::ffi::c_void,
    out: *mut u8,
    cap: i64,
) -> i64 {
    let Some(h) = enc_from(handle) else { return ST_HANDLE };
    let Some(enc) = h.enc.take() else { return ST_HANDLE };
    let needed = enc.ff_count + 8;
    if (cap as u64) < needed {
        h.enc = Some(enc);
        return ST_CAPACITY;
    }
    let mut buf = Vec::with_capacity(needed as usize);
    enc.finish(&mut buf);
    let out = core::slice::from_raw_parts_mut(out, cap as usize);
    out[..buf.len()].copy_from_slice(&buf);
    buf.len() as i64
}

/// # Safety
/// `handle` must come from mc_enc_new and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mc_enc_free(handle: *mut core::ffi::c_void) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut EncHandle));
    }
}

/// # Safety
/// `payload` must hold len bytes; contents are copied.
#[no_mangle]
pub unsafe extern "C" fn mc_dec_new(payload: *const u8, len: i64) -> *mut core::ffi::c_void {
    let bytes = if len > 0 {
        core::slice::from_raw_parts(payload, len as usize)
    } else {
        &[]
    };
    Box::into_raw(Box::new(RangeDecoder::new(bytes))) as *mut _
}

/// # Safety
/// `cdfs` must hold n*alphabet u16s and `out` n i64s.
#[no_mangle]
pub unsafe extern "C" fn mc_dec_decode(
    handle: *mut core::ffi::c_void,
    cdfs: *const u16,
    alphabet: i64,
    n: i64,
    out: *mut i64,
) -> i64 {
    let Some(dec) = (handle as *mut RangeDecoder).as_mut() else { return ST_HANDLE };
    if n < 0 || alphabet < 2 {
        return ST_CDF;
    }
    let cdfs = core::slice::from_raw_parts(cdfs, (n * alphabet) as usize);
    let out = core::slice::from_raw_parts_mut(out, n as usize);
    match dec.decode(cdfs, alphabet as usize, n as usize, out) {
        Ok(()) => n,
        Err(CoderError::InvalidCdf) => ST_CDF,
        Err(_) => ST_CDF,
    }
}

/// # Safety
/// `handle` must come from mc_dec_new and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mc_dec_free(handle: *mut core::ffi::c_void) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut RangeDecoder));
    }
}
