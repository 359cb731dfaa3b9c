//! Byte-oriented range coder with carry propagation.
//!
//! The encoder keeps a 33-bit `low` and a 32-bit `range`. Coding an
//! interval `[cum, cum + freq)` of a `2^bits` total narrows the state to
//! `low += (range >> bits) · cum`, `range = (range >> bits) · freq`; whenever
//! `range` drops below `2^24` the top byte of `low` is shifted out. A byte
//! equal to `0xFF` is held back until it is known whether a later carry
//! turns it into `0x00` (and increments its predecessor).
//!
//! To finish, `low` is rounded up to a multiple of `2^24`, which always lies
//! inside the final interval because `range ≥ 2^24`, and only its top byte
//! is written. The decoder mirrors the arithmetic on a 32-bit window of the
//! stream and reads the three omitted zero bytes as implicit padding. It
//! therefore consumes exactly `len + 3` bytes, and any truncation makes it
//! run past the padding. A stream is never shorter than the ideal code
//! length of its values and at most about one byte longer; an empty
//! message is one byte.
//!
//! Every value is coded with the table of its channel. Out-of-support values
//! are coded as the table's escape symbol followed by the zigzag LEB128
//! bytes of the value, each coded with a flat 8-bit distribution.

use crate::entropy::{CodingTable, PROB_BITS, PROB_TOTAL};
use crate::entropy::table::{unzigzag, zigzag};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const RAW_BITS: u32 = 8;
/// LEB128 bytes needed for any `u32`.
const MAX_VARINT: usize = 5;
/// Zero bytes the decoder appends to every stream.
const PADDING: usize = 3;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^bits`.
    pub fn encode(&mut self, cum: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && u64::from(cum) + u64::from(freq) <= 1 << bits);
        let r = self.range >> bits;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn emit(&mut self, byte: u8) {
        // The first byte out of the encoder is always zero and is not stored.
        if self.started {
            self.out.push(byte);
        }
        self.started = true;
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let mask = u64::from(TOP) - 1;
        self.low = (self.low + mask) & !mask;
        self.shift_low();
        self.shift_low();
        self.out
    }

    pub fn encode_value(&mut self, table: &CodingTable, value: i32) {
        match table.symbol_of(value) {
            Some(s) => self.encode(table.cdf[s], table.freq(s), PROB_BITS),
            None => {
                let esc = table.escape_symbol();
                self.encode(table.cdf[esc], table.freq(esc), PROB_BITS);
                let mut z = zigzag(value);
                loop {
                    let byte = z & 0x7F;
                    z >>= 7;
                    let more = if z == 0 { 0 } else { 0x80 };
                    self.encode(byte | more, 1, RAW_BITS);
                    if z == 0 {
                        break;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = match self.input.get(self.pos) {
            Some(&b) => b,
            None if self.pos < self.input.len() + PADDING => 0,
            None => return Err(Error::Truncated(self.input.len())),
        };
        self.pos += 1;
        Ok(b)
    }

    /// Target frequency of the next symbol; must be followed by
    /// [`Self::consume`] with the interval containing it.
    pub fn peek(&self, bits: u32) -> u32 {
        let r = self.range >> bits;
        (self.code / r).min((1 << bits) - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32, bits: u32) -> Result<()> {
        let r = self.range >> bits;
        self.code = self
            .code
            .checked_sub(r * cum)
            .ok_or_else(|| Error::format("range decoder state out of interval"))?;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(())
    }

    pub fn decode_value(&mut self, table: &CodingTable) -> Result<i32> {
        let target = self.peek(PROB_BITS);
        debug_assert!(target < PROB_TOTAL);
        let symbol = table.cdf.partition_point(|&c| c <= target) - 1;
        self.consume(table.cdf[symbol], table.freq(symbol), PROB_BITS)?;
        if symbol != table.escape_symbol() {
            return Ok(table.value_of(symbol));
        }
        let mut z: u64 = 0;
        for i in 0..MAX_VARINT {
            let byte = self.peek(RAW_BITS);
            self.consume(byte, 1, RAW_BITS)?;
            z |= u64::from(byte & 0x7F) << (7 * i);
            if byte & 0x80 == 0 {
                return u32::try_from(z)
                    .map(unzigzag)
                    .map_err(|_| Error::format("escaped value overflows i32"));
            }
        }
        Err(Error::format("escaped value longer than 5 bytes"))
    }
}

/// Encodes `values[i]` with `tables[i % tables.len()]`.
pub fn range_encode(values: &[i32], tables: &[CodingTable]) -> Result<Vec<u8>> {
    if tables.is_empty() && !values.is_empty() {
        return Err(Error::Empty("coding tables"));
    }
    for (c, t) in tables.iter().enumerate() {
        t.validate(c)?;
    }
    let mut enc = RangeEncoder::new();
    for (v, t) in values.iter().zip(tables.iter().cycle()) {
        enc.encode_value(t, *v);
    }
    Ok(enc.finish())
}

/// Decodes `count` values coded by [`range_encode`] with the same tables.
///
/// Decoding with different tables than the encoder used is not detected
/// reliably: it yields wrong values, and only sometimes an error.
pub fn range_decode(bytes: &[u8], count: usize, tables: &[CodingTable]) -> Result<Vec<i32>> {
    if tables.is_empty() && count > 0 {
        return Err(Error::Empty("coding tables"));
    }
    for (c, t) in tables.iter().enumerate() {
        t.validate(c)?;
    }
    let mut dec = RangeDecoder::new(bytes)?;
    tables.iter().cycle().take(count).map(|t| dec.decode_value(t)).collect()
}
