//! Accelerated arithmetic coder backend.
//!
//! Byte-identical to the reference coder: a 32-bit binary arithmetic
//! coder over 16-bit integer CDF rows, stream layout
//! `[varint count][payload][crc32 LE]` where the crc covers the varint,
//! the row-index sequence as little-endian u32 and the payload.
//!
//! The FFI boundary carries only flat integer arrays and byte buffers.
//! Status codes: 0 ok, 1 row index out of range, 2 output buffer too
//! small, 3 checksum mismatch, 4 malformed stream or count mismatch.

use std::slice;

pub const STATUS_OK: i32 = 0;
pub const STATUS_ROW_RANGE: i32 = 1;
pub const STATUS_BUFFER_SMALL: i32 = 2;
pub const STATUS_CORRUPT: i32 = 3;
pub const STATUS_BAD_INPUT: i32 = 4;

const PRECISION: u32 = 16;
const STATE_BITS: u32 = 32;
const MASK: u64 = (1u64 << STATE_BITS) - 1;
const TOP: u64 = 1u64 << (STATE_BITS - 1);
const SECOND: u64 = TOP >> 1;
const BYPASS_HALF: u64 = 1u64 << (PRECISION - 1);
const BYPASS_TOTAL: u64 = 1u64 << PRECISION;

#[derive(Debug, PartialEq, Eq)]
pub enum CoderError {
    RowRange,
    Corrupt,
    BadInput,
}

impl CoderError {
    fn status(&self) -> i32 {
        match self {
            CoderError::RowRange => STATUS_ROW_RANGE,
            CoderError::Corrupt => STATUS_CORRUPT,
            CoderError::BadInput => STATUS_BAD_INPUT,
        }
    }
}

// ---------------------------------------------------------------------
// CRC32 (IEEE, zlib-compatible)
// ---------------------------------------------------------------------

const fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc_table();

#[derive(Clone, Copy)]
struct Crc32(u32);

impl Crc32 {
    fn new() -> Self {
        Crc32(0xFFFF_FFFF)
    }
    fn update(&mut self, data: &[u8]) {
        let mut c = self.0;
        for &b in data {
            c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
        }
        self.0 = c;
    }
    fn finish(self) -> u32 {
        self.0 ^ 0xFFFF_FFFF
    }
}

fn write_varint(out: &mut Vec<u8>, mut value: u64) {
    loop {
        let b = (value & 0x7F) as u8;
        value >>= 7;
        if value != 0 {
            out.push(b | 0x80);
        } else {
            out.push(b);
            return;
        }
    }
}

fn read_varint(data: &[u8], pos: &mut usize) -> Result<u64, CoderError> {
    let mut value: u64 = 0;
    let mut shift = 0u32;
    loop {
        if *pos >= data.len() {
            return Err(CoderError::Corrupt);
        }
        let b = data[*pos];
        *pos += 1;
        value |= ((b & 0x7F) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
        if shift > 63 {
            return Err(CoderError::Corrupt);
        }
    }
}

// ---------------------------------------------------------------------
// CDF table view over the flattened rows
// ---------------------------------------------------------------------

pub struct CdfTables<'a> {
    pub rows: &'a [u32],
    pub starts: &'a [i64],
    pub offsets: &'a [i32],
}

impl<'a> CdfTables<'a> {
    fn n_rows(&self) -> usize {
        self.offsets.len()
    }

    fn row(&self, index: i64) -> Result<(&'a [u32], i64), CoderError> {
        if index < 0 || index as usize >= self.n_rows() {
            return Err(CoderError::RowRange);
        }
        let i = index as usize;
        let lo = self.starts[i] as usize;
        let hi = self.starts[i + 1] as usize;
        Ok((&self.rows[lo..hi], self.offsets[i] as i64))
    }
}

// ---------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------

struct Encoder {
    low: u64,
    high: u64,
    underflow: u64,
    acc: u32,
    nacc: u32,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder { low: 0, high: MASK, underflow: 0, acc: 0, nacc: 0, out: Vec::new() }
    }

    #[inline]
    fn emit(&mut self, bit: u32) {
        self.acc = (self.acc << 1) | bit;
        self.nacc += 1;
        if self.nacc == 8 {
            self.out.push(self.acc as u8);
            self.acc = 0;
            self.nacc = 0;
        }
    }

    fn encode(&mut self, cum_lo: u64, cum_hi: u64) {
        let mut low = self.low;
        let mut high = self.high;
        let rng = high - low + 1;
        high = low + ((cum_hi * rng) >> PRECISION) - 1;
        low += (cum_lo * rng) >> PRECISION;
        while (low ^ high) & TOP == 0 {
            let bit = (low >> (STATE_BITS - 1)) as u32;
            self.emit(bit);
            let inv = bit ^ 1;
            while self.underflow > 0 {
                self.emit(inv);
                self.underflow -= 1;
            }
            low = (low << 1) & MASK;
            high = ((high << 1) & MASK) | 1;
        }
        while low & !high & SECOND != 0 {
            self.underflow += 1;
            low = (low << 1) & (MASK >> 1);
            high = ((high << 1) & (MASK >> 1)) | TOP | 1;
        }
        self.low = low;
        self.high = high;
    }

    fn encode_bypass(&mut self, bit: u64) {
        if bit != 0 {
            self.encode(BYPASS_HALF, BYPASS_TOTAL);
        } else {
            self.encode(0, BYPASS_HALF);
        }
    }

    fn encode_overflow(&mut self, mut value: u64) {
        let mut k = 0u32;
        while value >= (1u64 << k) {
            self.encode_bypass(1);
            value -= 1u64 << k;
            k += 1;
        }
        self.encode_bypass(0);
        for i in (0..k).rev() {
            self.encode_bypass((value >> i) & 1);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        self.emit(1);
        while self.nacc != 0 {
            self.emit(0);
        }
        self.out
    }
}

pub fn encode(symbols: &[i64], row_indices: &[i64], cdf: &CdfTables) -> Result<Vec<u8>, CoderError> {
    if symbols.len() != row_indices.len() {
        return Err(CoderError::BadInput);
    }
    let mut header = Vec::with_capacity(8);
    write_varint(&mut header, symbols.len() as u64);
    if symbols.is_empty() {
        return Ok(header);
    }
    let mut enc = Encoder::new();
    for (&s, &r) in symbols.iter().zip(row_indices) {
        let (row, offset) = cdf.row(r)?;
        let n_regular = row.len() as i64 - 2;
        let index = s - offset;
        if index >= 0 && index < n_regular {
            enc.encode(row[index as usize] as u64, row[index as usize + 1] as u64);
        } else {
            enc.encode(row[n_regular as usize] as u64, row[n_regular as usize + 1] as u64);
            if index < 0 {
                enc.encode_bypass(0);
                enc.encode_overflow((-index - 1) as u64);
            } else {
                enc.encode_bypass(1);
                enc.encode_overflow((index - n_regular) as u64);
            }
        }
    }
    let payload = enc.finish();
    let mut crc = Crc32::new();
    crc.update(&header);
    for &r in row_indices {
        crc.update(&(r as u32).to_le_bytes());
    }
    crc.update(&payload);
    let mut out = header;
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.finish().to_le_bytes());
    Ok(out)
}

// ---------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------

struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nacc: u32,
    low: u64,
    high: u64,
    code: u64,
}

impl<'a> Decoder<'a> {
    fn new(payload: &'a [u8]) -> Self {
        let mut d = Decoder { data: payload, pos: 0, acc: 0, nacc: 0, low: 0, high: MASK, code: 0 };
        let mut code = 0u64;
        for _ in 0..STATE_BITS {
            code = (code << 1) | d.read_bit() as u64;
        }
        d.code = code;
        d
    }

    #[inline]
    fn read_bit(&mut self) -> u32 {
        if self.nacc == 0 {
            if self.pos < self.data.len() {
                self.acc = self.data[self.pos] as u32;
                self.pos += 1;
                self.nacc = 8;
            } else {
                return 0; // implicit zero tail
            }
        }
        self.nacc -= 1;
        (self.acc >> self.nacc) & 1
    }

    fn decode(&mut self, row: &[u32]) -> usize {
        let mut low = self.low;
        let mut high = self.high;
        let mut code = self.code;
        let rng = high - low + 1;
        let value = (((code - low + 1) << PRECISION) - 1) / rng;
        // bisect_right(row, value) - 1
        let sym = row.partition_point(|&x| (x as u64) <= value) - 1;
        let cum_lo = row[sym] as u64;
        let cum_hi = row[sym + 1] as u64;
        high = low + ((cum_hi * rng) >> PRECISION) - 1;
        low += (cum_lo * rng) >> PRECISION;
        while (low ^ high) & TOP == 0 {
            code = ((code << 1) & MASK) | self.read_bit() as u64;
            low = (low << 1) & MASK;
            high = ((high << 1) & MASK) | 1;
        }
        while low & !high & SECOND != 0 {
            code = (code & TOP) | ((code << 1) & (MASK >> 1)) | self.read_bit() as u64;
            low = (low << 1) & (MASK >> 1);
            high = ((high << 1) & (MASK >> 1)) | TOP | 1;
        }
        self.low = low;
        self.high = high;
        self.code = code;
        sym
    }

    fn decode_bypass(&mut self) -> u64 {
        const ROW: [u32; 3] = [0, BYPASS_HALF as u32, BYPASS_TOTAL as u32];
        self.decode(&ROW) as u64
    }

    fn decode_overflow(&mut self) -> Result<u64, CoderError> {
        let mut k = 0u32;
        while self.decode_bypass() != 0 {
            k += 1;
            if k > 62 {
                return Err(CoderError::Corrupt);
            }
        }
        let mut rem = 0u64;
        for _ in 0..k {
            rem = (rem << 1) | self.decode_bypass();
        }
        Ok((1u64 << k) - 1 + rem)
    }
}

pub fn decode(
    stream: &[u8],
    row_indices: &[i64],
    count: usize,
    cdf: &CdfTables,
) -> Result<Vec<i64>, CoderError> {
    let mut pos = 0usize;
    let n = read_varint(stream, &mut pos)?;
    if n as usize != count || row_indices.len() != count {
        return Err(CoderError::BadInput);
    }
    if count == 0 {
        if pos != stream.len() {
            return Err(CoderError::Corrupt);
        }
        return Ok(Vec::new());
    }
    if stream.len() < pos + 4 {
        return Err(CoderError::Corrupt);
    }
    let payload = &stream[pos..stream.len() - 4];
    let stored = u32::from_le_bytes(stream[stream.len() - 4..].try_into().unwrap());
    let mut crc = Crc32::new();
    crc.update(&stream[..pos]);
    for &r in row_indices {
        crc.update(&(r as u32).to_le_bytes());
    }
    crc.update(payload);
    if crc.finish() != stored {
        return Err(CoderError::Corrupt);
    }
    let mut dec = Decoder::new(payload);
    let mut out = Vec::with_capacity(count);
    for &r in row_indices {
        let (row, offset) = cdf.row(r)?;
        let n_regular = row.len() - 2;
        let sym = dec.decode(row);
        if sym == n_regular {
            let side = dec.decode_bypass();
            let value = dec.decode_overflow()? as i64;
            if side != 0 {
                out.push(offset + n_regular as i64 + value);
            } else {
                out.push(offset - 1 - value);
            }
        } else {
            out.push(offset + sym as i64);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// C ABI
// ---------------------------------------------------------------------

/// # Safety
/// All pointers must reference valid buffers of the stated lengths;
/// `row_starts` has `n_rows + 1` entries delimiting `cdf_data`.
#[no_mangle]
pub unsafe extern "C" fn rc_encode(
    symbols: *const i64,
    n_symbols: usize,
    row_indices: *const i64,
    cdf_data: *const u32,
    row_starts: *const i64,
    n_rows: usize,
    offsets: *const i32,
    out_buf: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> i32 {
    let symbols = slice::from_raw_parts(symbols, n_symbols);
    let indices = slice::from_raw_parts(row_indices, n_symbols);
    let starts = slice::from_raw_parts(row_starts, n_rows + 1);
    let rows = slice::from_raw_parts(cdf_data, starts[n_rows] as usize);
    let offsets = slice::from_raw_parts(offsets, n_rows);
    let cdf = CdfTables { rows, starts, offsets };
    match encode(symbols, indices, &cdf) {
        Ok(bytes) => {
            if bytes.len() > out_cap {
                return STATUS_BUFFER_SMALL;
            }
            let out = slice::from_raw_parts_mut(out_buf, out_cap);
            out[..bytes.len()].copy_from_slice(&bytes);
            *out_len = bytes.len();
            STATUS_OK
        }
        Err(e) => e.status(),
    }
}

/// # Safety
/// See `rc_encode`; `out_symbols` must hold `count` entries.
#[no_mangle]
pub unsafe extern "C" fn rc_decode(
    stream: *const u8,
    stream_len: usize,
    row_indices: *const i64,
    count: usize,
    cdf_data: *const u32,
    row_starts: *const i64,
    n_rows: usize,
    offsets: *const i32,
    out_symbols: *mut i64,
) -> i32 {
    let stream = slice::from_raw_parts(stream, stream_len);
    let indices = slice::from_raw_parts(row_indices, count);
    let starts = slice::from_raw_parts(row_starts, n_rows + 1);
    let rows = slice::from_raw_parts(cdf_data, starts[n_rows] as usize);
    let offsets = slice::from_raw_parts(offsets, n_rows);
    let cdf = CdfTables { rows, starts, offsets };
    match decode(stream, indices, count, &cdf) {
        Ok(values) => {
            let out = slice::from_raw_parts_mut(out_symbols, count);
            out.copy_from_slice(&values);
            STATUS_OK
        }
        Err(e) => e.status(),
    }
}
