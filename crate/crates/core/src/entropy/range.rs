//! Carry-propagating range coder with 32-bit range and 16-bit frequencies.
//!
//! The encoder keeps `low` in 64 bits so a carry out of the 32-bit window
//! can be pushed back into bytes that are still pending. On finish it picks
//! the value in the final interval with the most trailing zero bytes and
//! drops them; the decoder reads zeros past the end. The leading byte of the
//! raw output is always zero and is never stored.

use super::table::{CdfTable, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) {
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * table.start(symbol) as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let end = self.low + self.range as u64;
        for k in [32u32, 24, 16, 8, 0] {
            let step = 1u64 << k;
            let v = self.low.div_ceil(step) * step;
            if v < end {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let v = self.code / r;
        if v >= 1 << PRECISION_BITS {
            return Err(Error::CorruptStream(
                "code value outside the coding interval".into(),
            ));
        }
        let s = table.lookup(v);
        self.code -= r * table.start(s);
        self.range = r * table.freq(s);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Bytes consumed so far, including implicit zeros past the end.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Codes `symbols[i]` with `table_of(i)`.
pub fn range_encode<'a>(symbols: &[usize], table_of: impl Fn(usize) -> &'a CdfTable) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode(table_of(i), s);
    }
    enc.finish()
}

/// Inverse of [`range_encode`]. Every valid stream is the unique canonical
/// encoding of its symbols, so the decoded symbols are re-encoded and
/// compared; truncation, trailing garbage, flipped bits and mismatched
/// tables are reported instead of silently yielding wrong symbols.
pub fn range_decode<'a>(
    bytes: &[u8],
    count: usize,
    table_of: impl Fn(usize) -> &'a CdfTable + Copy,
) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes);
    let symbols = (0..count)
        .map(|i| dec.decode(table_of(i)))
        .collect::<Result<Vec<_>>>()?;
    if range_encode(&symbols, table_of) != bytes {
        return Err(Error::CorruptStream(
            "stream is not the encoding of its decoded symbols".into(),
        ));
    }
    Ok(symbols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_empty() {
        assert!(range_encode(&[], |_| unreachable!()).is_empty());
        let t = CdfTable::uniform(4);
        assert!(range_decode(&[], 0, |_| &t).unwrap().is_empty());
    }

    #[test]
    fn skewed_round_trip() {
        let t = CdfTable::from_freqs(&[1, 65_000, 535]).unwrap();
        let syms: Vec<usize> = (0..5000)
            .map(|i| {
                if i % 97 == 0 {
                    0
                } else if i % 13 == 0 {
                    2
                } else {
                    1
                }
            })
            .collect();
        let bytes = range_encode(&syms, |_| &t);
        assert_eq!(range_decode(&bytes, syms.len(), |_| &t).unwrap(), syms);
    }

    #[test]
    fn truncation_detected() {
        let t = CdfTable::uniform(256);
        let syms: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 256).collect();
        let bytes = range_encode(&syms, |_| &t);
        // A shortened stream may be the canonical coding of other symbols;
        // it must never decode back to the original ones.
        let cut = range_decode(&bytes[..bytes.len() - 1], syms.len(), |_| &t);
        assert!(cut.map_or(true, |s| s != syms));
        let mut longer = bytes.clone();
        longer.push(7);
        assert!(range_decode(&longer, syms.len(), |_| &t).is_err());
    }

    #[test]
    fn carry_heavy_stream() {
        // Top symbols push `low` toward the window edge and force carries.
        let t = CdfTable::from_freqs(&[1, 1, 65_534]).unwrap();
        let syms: Vec<usize> = (0..3000).map(|i| if i % 5 == 0 { 1 } else { 2 }).collect();
        let bytes = range_encode(&syms, |_| &t);
        assert_eq!(range_decode(&bytes, syms.len(), |_| &t).unwrap(), syms);
    }
}
